/** Typed client for the listening-test service HTTP API. */

export interface SessionScreenRef {
    index: number;
    screen_id: string;
    submitted: boolean;
}

export interface UiOptions {
    require_full_scale_use: boolean;
    loop_playback: boolean;
}

export interface SessionState {
    session_id: string;
    participant_id: string;
    experiment_id: string;
    status: 'in_progress' | 'complete';
    created_at: number;
    n_screens: number;
    screens: SessionScreenRef[];
    training_available: boolean;
    ui_options: UiOptions;
}

export interface StimulusRef {
    token: string;
    url: string;
}

export interface ScreenDescriptor {
    screen_id: string;
    index: number | null;
    n_screens: number;
    reference: { url: string };
    stimuli: StimulusRef[];
    loop_playback: boolean;
    require_full_scale_use: boolean;
    ratings: Record<string, number> | null;
    submitted?: boolean;
    session_status?: string;
    training?: boolean;
}

export interface SubmitResult {
    status: 'accepted';
    screen_id: string;
    session_status: string;
}

/** Server-side rejection with the service's {code, message} payload. */
export class ApiError extends Error {
    constructor(readonly status: number, readonly code: string, message: string) {
        super(message);
        this.name = 'ApiError';
    }
}

async function reject(res: Response): Promise<never> {
    let code = 'unknown';
    let message = `request failed with status ${res.status}`;
    try {
        const body = await res.json();
        if (body && body.detail) {
            code = body.detail.code ?? code;
            message = body.detail.message ?? message;
        }
    } catch {
        // non-JSON error body; keep the fallback message
    }
    throw new ApiError(res.status, code, message);
}

export class ApiClient {
    constructor(
        private readonly base: string = '',
        private readonly fetchFn: typeof fetch = (...args) => fetch(...args),
    ) {}

    private async requestJson<T>(path: string, init?: RequestInit): Promise<T> {
        const res = await this.fetchFn(this.base + path, init);
        if (!res.ok) {
            await reject(res);
        }
        return res.json() as Promise<T>;
    }

    createSession(participantId: string, experimentId: string): Promise<SessionState> {
        return this.requestJson('/sessions', {
            method: 'POST',
            headers: { 'Content-Type': 'application/json' },
            body: JSON.stringify({ participant_id: participantId, experiment_id: experimentId }),
        });
    }

    session(sessionId: string): Promise<SessionState> {
        return this.requestJson(`/sessions/${sessionId}`);
    }

    screen(sessionId: string, index: number): Promise<ScreenDescriptor> {
        return this.requestJson(`/sessions/${sessionId}/screens/${index}`);
    }

    training(sessionId: string): Promise<ScreenDescriptor> {
        return this.requestJson(`/sessions/${sessionId}/training`);
    }

    submitRatings(
        sessionId: string,
        index: number,
        ratings: Record<string, number>,
    ): Promise<SubmitResult> {
        return this.requestJson(`/sessions/${sessionId}/screens/${index}/ratings`, {
            method: 'POST',
            headers: { 'Content-Type': 'application/json' },
            body: JSON.stringify(ratings),
        });
    }

    async stimulus(url: string): Promise<ArrayBuffer> {
        const res = await this.fetchFn(this.base + url);
        if (!res.ok) {
            await reject(res);
        }
        return res.arrayBuffer();
    }
}
