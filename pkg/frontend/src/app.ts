/** Session flow: registration, training, screen progression, completion. */

import { ApiClient, ApiError, SessionState } from './api.js';
import { ContextLike, ScreenPlayer } from './audio.js';
import { renderScreen, ScreenController, StorageLike } from './screen.js';

const SESSION_KEY = 'mushra_session';

export interface AppOptions {
    client: ApiClient;
    experimentId: string;
    storage?: StorageLike | null;
    /** Audio context factory; omit to run without playback (tests). */
    audioContext?: () => ContextLike;
}

export class MushraApp {
    private sessionId: string | null = null;
    controller: ScreenController | null = null;

    constructor(
        private readonly root: HTMLElement,
        private readonly opts: AppOptions,
    ) {}

    private get storage(): StorageLike | null {
        return this.opts.storage ?? null;
    }

    async start(): Promise<void> {
        const stored = this.readStoredSession();
        if (stored) {
            try {
                const state = await this.opts.client.session(stored);
                this.sessionId = stored;
                await this.resume(state);
                return;
            } catch {
                this.forgetSession(); // stale id (server wiped, or foreign experiment)
            }
        }
        this.renderRegistration();
    }

    private readStoredSession(): string | null {
        try {
            return this.storage?.getItem(SESSION_KEY) ?? null;
        } catch {
            return null;
        }
    }

    private forgetSession(): void {
        try {
            this.storage?.removeItem(SESSION_KEY);
        } catch {
            // nothing to do
        }
    }

    private renderRegistration(): void {
        this.root.innerHTML = '';
        const form = document.createElement('form');
        form.className = 'registration';
        const input = document.createElement('input');
        input.type = 'text';
        input.name = 'participant';
        input.placeholder = 'Participant id';
        form.appendChild(input);
        const button = document.createElement('button');
        button.type = 'submit';
        button.textContent = 'Start';
        form.appendChild(button);
        const banner = document.createElement('div');
        banner.className = 'banner';
        banner.hidden = true;
        form.appendChild(banner);
        form.addEventListener('submit', (ev) => {
            ev.preventDefault();
            void this.register(input.value.trim(), banner);
        });
        this.root.appendChild(form);
    }

    private async register(participant: string, banner: HTMLElement): Promise<void> {
        if (!participant) {
            banner.textContent = 'Enter a participant id.';
            banner.hidden = false;
            return;
        }
        try {
            const state = await this.opts.client.createSession(
                participant,
                this.opts.experimentId,
            );
            this.sessionId = state.session_id;
            try {
                this.storage?.setItem(SESSION_KEY, state.session_id);
            } catch {
                // session survives only in memory then
            }
            if (state.training_available) {
                await this.showTraining();
            } else {
                await this.showNextScreen(state);
            }
        } catch (err) {
            banner.textContent =
                err instanceof ApiError ? `${err.message} (${err.code})` : 'Network error — try again.';
            banner.hidden = false;
        }
    }

    private async resume(state: SessionState): Promise<void> {
        if (state.status === 'complete') {
            this.renderCompletion();
            return;
        }
        await this.showNextScreen(state);
    }

    private async showTraining(): Promise<void> {
        const descriptor = await this.opts.client.training(this.sessionId!);
        this.controller = renderScreen(this.root, descriptor, {
            client: this.opts.client,
            sessionId: this.sessionId!,
            storage: this.storage,
            player: this.makePlayer(descriptor.loop_playback),
            onAccepted: () => void this.advance(),
        });
    }

    private async showNextScreen(state?: SessionState): Promise<void> {
        const session = state ?? (await this.opts.client.session(this.sessionId!));
        if (session.status === 'complete') {
            this.renderCompletion();
            return;
        }
        const next = session.screens.find((s) => !s.submitted);
        if (!next) {
            this.renderCompletion();
            return;
        }
        const descriptor = await this.opts.client.screen(this.sessionId!, next.index);
        this.controller = renderScreen(this.root, descriptor, {
            client: this.opts.client,
            sessionId: this.sessionId!,
            storage: this.storage,
            player: this.makePlayer(descriptor.loop_playback),
            onAccepted: () => void this.advance(),
        });
    }

    private async advance(): Promise<void> {
        await this.showNextScreen();
    }

    private makePlayer(loop: boolean): ScreenPlayer | undefined {
        const factory = this.opts.audioContext;
        return factory ? new ScreenPlayer(factory(), loop) : undefined;
    }

    private renderCompletion(): void {
        this.forgetSession(); // a finished session should not block re-registration
        this.root.innerHTML = '';
        const done = document.createElement('p');
        done.className = 'completion';
        done.textContent = 'All screens rated — thank you!';
        this.root.appendChild(done);
    }
}
