/** One MUSHRA screen: sliders, reference button, validation, submission. */

import { ApiClient, ApiError, ScreenDescriptor } from './api.js';
import { ScreenPlayer } from './audio.js';

export interface StorageLike {
    getItem(key: string): string | null;
    setItem(key: string, value: string): void;
    removeItem(key: string): void;
}

export interface SliderState {
    value: number;
    touched: boolean;
}

const QUALITY_INTERVALS = ['Bad', 'Poor', 'Fair', 'Good', 'Excellent'];

export function clampRating(raw: number): number {
    if (!Number.isFinite(raw)) {
        return 0;
    }
    return Math.min(100, Math.max(0, Math.round(raw)));
}

/** Per-screen state: tokens, slider values, drafts.  Untouched sliders sit at
 * 50 visually but do not count toward the submit gate. */
export class ScreenViewModel {
    readonly sliders = new Map<string, SliderState>();
    submitted: boolean;

    constructor(
        readonly descriptor: ScreenDescriptor,
        private readonly sessionId: string,
        private readonly storage: StorageLike | null,
    ) {
        for (const stim of descriptor.stimuli) {
            this.sliders.set(stim.token, { value: 50, touched: false });
        }
        this.submitted = descriptor.submitted === true;
        // server-known ratings (resubmission path) count as touched
        if (descriptor.ratings) {
            for (const [token, value] of Object.entries(descriptor.ratings)) {
                const state = this.sliders.get(token);
                if (state) {
                    state.value = clampRating(value);
                    state.touched = true;
                }
            }
        }
        this.restoreDraft(); // a local draft is newer than the server state
    }

    setValue(token: string, raw: number): void {
        const state = this.sliders.get(token);
        if (!state) {
            throw new Error(`unknown token ${token}`);
        }
        state.value = clampRating(raw);
        state.touched = true;
        this.saveDraft();
    }

    get canSubmit(): boolean {
        for (const state of this.sliders.values()) {
            if (!state.touched) {
                return false;
            }
        }
        return this.sliders.size > 0;
    }

    untouchedTokens(): string[] {
        return [...this.sliders.entries()].filter(([, s]) => !s.touched).map(([t]) => t);
    }

    payload(): Record<string, number> {
        const out: Record<string, number> = {};
        for (const [token, state] of this.sliders.entries()) {
            out[token] = state.value;
        }
        return out;
    }

    private get draftKey(): string {
        return `mushra_draft:${this.sessionId}:${this.descriptor.screen_id}`;
    }

    saveDraft(): void {
        if (!this.storage) {
            return;
        }
        const body: Record<string, number> = {};
        for (const [token, state] of this.sliders.entries()) {
            if (state.touched) {
                body[token] = state.value;
            }
        }
        try {
            this.storage.setItem(this.draftKey, JSON.stringify(body));
        } catch {
            // storage full or unavailable: drafts are a convenience only
        }
    }

    restoreDraft(): void {
        if (!this.storage) {
            return;
        }
        let raw: string | null = null;
        try {
            raw = this.storage.getItem(this.draftKey);
        } catch {
            return;
        }
        if (!raw) {
            return;
        }
        try {
            const body = JSON.parse(raw) as Record<string, number>;
            for (const [token, value] of Object.entries(body)) {
                const state = this.sliders.get(token);
                if (state && typeof value === 'number') {
                    state.value = clampRating(value);
                    state.touched = true;
                }
            }
        } catch {
            // corrupt draft: ignore it
        }
    }

    clearDraft(): void {
        if (!this.storage) {
            return;
        }
        try {
            this.storage.removeItem(this.draftKey);
        } catch {
            // nothing to do
        }
    }
}

export interface ScreenControllerOptions {
    client: ApiClient;
    sessionId: string;
    player?: ScreenPlayer;
    storage?: StorageLike | null;
    onAccepted?: (sessionStatus: string) => void;
}

/** Build the interactive screen into `root` and wire the submit flow. */
export class ScreenController {
    readonly view: ScreenViewModel;
    private banner!: HTMLElement;
    private submitButton!: HTMLButtonElement;
    private rows = new Map<string, HTMLElement>();

    constructor(
        private readonly root: HTMLElement,
        readonly descriptor: ScreenDescriptor,
        private readonly opts: ScreenControllerOptions,
    ) {
        this.view = new ScreenViewModel(descriptor, opts.sessionId, opts.storage ?? null);
        this.render();
    }

    private render(): void {
        const d = this.descriptor;
        this.root.innerHTML = '';

        const heading = document.createElement('h2');
        heading.textContent = d.training
            ? 'Training'
            : `Screen ${(d.index ?? 0) + 1} of ${d.n_screens}`;
        this.root.appendChild(heading);

        const scale = document.createElement('div');
        scale.className = 'quality-scale';
        for (const label of [...QUALITY_INTERVALS].reverse()) {
            const span = document.createElement('span');
            span.textContent = label;
            scale.appendChild(span);
        }
        this.root.appendChild(scale);

        const refButton = document.createElement('button');
        refButton.type = 'button';
        refButton.className = 'play-reference';
        refButton.textContent = 'Reference';
        refButton.dataset.url = d.reference.url;
        refButton.disabled = true;
        refButton.addEventListener('click', () => this.playUrl(d.reference.url));
        this.root.appendChild(refButton);

        const list = document.createElement('div');
        list.className = 'stimuli';
        d.stimuli.forEach((stim, i) => {
            list.appendChild(this.buildRow(stim.token, stim.url, i));
        });
        this.root.appendChild(list);

        this.banner = document.createElement('div');
        this.banner.className = 'banner';
        this.banner.hidden = true;
        this.root.appendChild(this.banner);

        this.submitButton = document.createElement('button');
        this.submitButton.type = 'button';
        this.submitButton.className = 'submit';
        this.submitButton.textContent = d.training ? 'Continue' : 'Submit ratings';
        this.submitButton.addEventListener('click', () => void this.submit());
        this.root.appendChild(this.submitButton);

        this.refresh();
        void this.preload();
    }

    private buildRow(token: string, url: string, index: number): HTMLElement {
        const state = this.view.sliders.get(token)!;
        const row = document.createElement('div');
        row.className = 'stimulus-row';
        row.dataset.token = token;

        const play = document.createElement('button');
        play.type = 'button';
        play.className = 'play-stimulus';
        // neutral letter only; anything else would leak the condition
        play.textContent = String.fromCharCode(65 + index);
        play.dataset.url = url;
        play.disabled = true;
        play.addEventListener('click', () => this.playUrl(url));
        row.appendChild(play);

        const slider = document.createElement('input');
        slider.type = 'range';
        slider.min = '0';
        slider.max = '100';
        slider.step = '1';
        slider.value = String(state.value);
        slider.addEventListener('input', () => {
            this.view.setValue(token, Number(slider.value));
            number.value = String(this.view.sliders.get(token)!.value);
            this.refresh();
        });
        row.appendChild(slider);

        const number = document.createElement('input');
        number.type = 'number';
        number.min = '0';
        number.max = '100';
        number.value = state.touched ? String(state.value) : '';
        number.addEventListener('change', () => {
            this.view.setValue(token, Number(number.value));
            const value = this.view.sliders.get(token)!.value;
            number.value = String(value);
            slider.value = String(value);
            this.refresh();
        });
        row.appendChild(number);

        this.rows.set(token, row);
        return row;
    }

    private async preload(): Promise<void> {
        const player = this.opts.player;
        if (!player) {
            return;
        }
        const urls = [
            this.descriptor.reference.url,
            ...this.descriptor.stimuli.map((s) => s.url),
        ];
        try {
            const entries = await Promise.all(
                urls.map(async (url) => ({ url, data: await this.opts.client.stimulus(url) })),
            );
            await player.preload(entries);
        } catch (err) {
            this.showBanner(`Could not load stimuli: ${(err as Error).message} — reload to retry`);
            return;
        }
        for (const button of this.root.querySelectorAll<HTMLButtonElement>(
            '.play-stimulus, .play-reference',
        )) {
            button.disabled = false;
        }
    }

    private playUrl(url: string): void {
        const player = this.opts.player;
        if (!player || !player.ready) {
            return;
        }
        player.play(url);
        for (const button of this.root.querySelectorAll<HTMLButtonElement>('button[data-url]')) {
            button.classList.toggle('active', button.dataset.url === url);
        }
    }

    /** Re-derive derived DOM state: gate, untouched highlights. */
    private refresh(): void {
        for (const [token, row] of this.rows.entries()) {
            const touched = this.view.sliders.get(token)!.touched;
            row.classList.toggle('untouched', !touched);
        }
        if (this.descriptor.training) {
            this.submitButton.disabled = false; // advancing needs no ratings
        } else {
            this.submitButton.disabled = this.view.submitted || !this.view.canSubmit;
        }
    }

    showBanner(message: string): void {
        this.banner.textContent = message;
        this.banner.hidden = false;
    }

    async submit(): Promise<void> {
        if (this.descriptor.training) {
            this.opts.onAccepted?.('training');
            return;
        }
        if (!this.view.canSubmit || this.view.submitted) {
            return;
        }
        this.banner.hidden = true;
        this.submitButton.disabled = true;
        try {
            const result = await this.opts.client.submitRatings(
                this.opts.sessionId,
                this.descriptor.index ?? 0,
                this.view.payload(),
            );
            this.view.clearDraft();
            this.view.submitted = true;
            this.opts.onAccepted?.(result.session_status);
        } catch (err) {
            // both branches keep the slider state and the local draft
            if (err instanceof ApiError) {
                this.showBanner(`${err.message} (${err.code})`);
            } else {
                this.showBanner('Network error — your ratings are kept locally; try again.');
            }
            this.refresh();
        }
    }
}

export function renderScreen(
    root: HTMLElement,
    descriptor: ScreenDescriptor,
    opts: ScreenControllerOptions,
): ScreenController {
    return new ScreenController(root, descriptor, opts);
}
