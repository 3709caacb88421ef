/** Gapless playback over pre-decoded buffers with a shared play position.
 *
 * All stimuli of a screen are variants of the same recording, so the player
 * keeps a single timeline: switching stimuli stops the old source and starts
 * the new one at the position the old one had reached.  Structural interfaces
 * below cover the slice of Web Audio the player touches, which keeps the
 * engine testable without a real AudioContext.
 */

export interface BufferLike {
    readonly duration: number;
}

export interface SourceLike {
    buffer: BufferLike | null;
    loop: boolean;
    connect(destination: unknown): void;
    start(when?: number, offset?: number): void;
    stop(): void;
}

export interface ContextLike {
    readonly currentTime: number;
    readonly destination: unknown;
    decodeAudioData(data: ArrayBuffer): Promise<BufferLike>;
    createBufferSource(): SourceLike;
}

export class ScreenPlayer {
    private buffers = new Map<string, BufferLike>();
    private source: SourceLike | null = null;
    private currentUrl: string | null = null;
    private startedAt = 0; // ctx.currentTime when the running source began
    private startOffset = 0; // seconds into the shared timeline at that moment
    private loaded = false;

    constructor(
        private readonly ctx: ContextLike,
        private readonly loop: boolean = true,
    ) {}

    /** Decode every stimulus before any playback is allowed. */
    async preload(entries: { url: string; data: ArrayBuffer }[]): Promise<void> {
        for (const entry of entries) {
            this.buffers.set(entry.url, await this.ctx.decodeAudioData(entry.data));
        }
        this.loaded = true;
    }

    get ready(): boolean {
        return this.loaded;
    }

    get playing(): boolean {
        return this.source !== null;
    }

    get current(): string | null {
        return this.currentUrl;
    }

    /** Shared position in seconds, wrapped to the active buffer's length. */
    position(): number {
        let pos = this.startOffset;
        if (this.source !== null) {
            pos += this.ctx.currentTime - this.startedAt;
        }
        const buffer = this.currentUrl === null ? null : this.buffers.get(this.currentUrl);
        if (buffer && buffer.duration > 0) {
            pos %= buffer.duration;
        }
        return pos;
    }

    /** Start (or switch to) a stimulus, preserving the play position. */
    play(url: string): void {
        if (!this.loaded) {
            throw new Error('stimuli still loading');
        }
        const buffer = this.buffers.get(url);
        if (!buffer) {
            throw new Error(`unknown stimulus url ${url}`);
        }
        const offset = this.position();
        this.stopSource();
        const source = this.ctx.createBufferSource();
        source.buffer = buffer;
        source.loop = this.loop;
        source.connect(this.ctx.destination);
        source.start(0, buffer.duration > 0 ? offset % buffer.duration : 0);
        this.source = source;
        this.currentUrl = url;
        this.startedAt = this.ctx.currentTime;
        this.startOffset = offset;
    }

    pause(): void {
        this.startOffset = this.position();
        this.stopSource();
    }

    /** Stop and rewind the shared timeline. */
    stop(): void {
        this.stopSource();
        this.startOffset = 0;
        this.currentUrl = null;
    }

    private stopSource(): void {
        if (this.source !== null) {
            this.source.stop();
            this.source = null;
        }
    }
}
