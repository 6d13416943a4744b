// Client session logic, kept free of DOM and WebSocket so it unit-tests
// in node: main.ts supplies the transport, painter, and input sources.

import { InputTracker } from "./input.js";
import {
  ActionMsg,
  ClientMsg,
  FrameMsg,
  StateMsg,
  decodeFramePixels,
  parseServerMsg,
} from "./protocol.js";

export interface Transport {
  send(msg: ClientMsg): void;
}

export interface SessionHooks {
  paint(rgb: Uint8ClampedArray, w: number, h: number): void;
  onStatus?(s: SessionStatus): void;
  onEpisodeEnd?(score: number): void;
}

export interface SessionStatus {
  mode: "human" | "agent";
  score: number;
  tick: number;
  frameGapMs: number;
}

export class ClientSession {
  mode: "human" | "agent" = "human"; // server-confirmed, updated by state msgs
  lastTick = -1;
  framesRendered = 0;
  actionsSent = 0;
  pointerLocked = false;
  private lastFrameAt: number | null = null;
  private frameGapMs = 0;
  private lastStatus: SessionStatus | null = null;

  constructor(
    private transport: Transport,
    private input: InputTracker,
    private hooks: SessionHooks,
    private now: () => number = () => performance.now(),
  ) {}

  handleMessage(raw: string): void {
    const msg = parseServerMsg(raw);
    if (msg === null) return;
    if (msg.type === "frame") this.handleFrame(msg);
    else if (msg.type === "state") this.handleState(msg);
    else if (msg.type === "episode_end") this.hooks.onEpisodeEnd?.(msg.score);
  }

  private handleFrame(msg: FrameMsg): void {
    const t = this.now();
    if (this.lastFrameAt !== null) this.frameGapMs = t - this.lastFrameAt;
    this.lastFrameAt = t;
    // Render every received frame exactly once, byte for byte.
    this.hooks.paint(decodeFramePixels(msg), msg.w, msg.h);
    this.framesRendered += 1;
    this.lastTick = msg.tick;
    // At most one action message per frame, only while the human drives.
    if (this.mode === "human") {
      const sample = this.input.sample();
      const action: ActionMsg = {
        type: "action",
        keys: sample.keys,
        dx: this.pointerLocked ? sample.dx : 0,
        dy: this.pointerLocked ? sample.dy : 0,
        tick: msg.tick,
      };
      this.transport.send(action);
      this.actionsSent += 1;
    }
  }

  private handleState(msg: StateMsg): void {
    this.mode = msg.mode; // the server is authoritative during takeover
    this.lastStatus = {
      mode: msg.mode,
      score: msg.score,
      tick: msg.tick,
      frameGapMs: this.frameGapMs,
    };
    this.hooks.onStatus?.(this.lastStatus);
  }

  toggleMode(): void {
    const next = this.mode === "human" ? "agent" : "human";
    this.transport.send({ type: "mode", value: next });
    // this.mode stays until the server confirms via a state message.
  }

  requestReset(seed: number): void {
    this.transport.send({ type: "reset", seed });
  }

  setPointerLocked(locked: boolean): void {
    this.pointerLocked = locked;
  }

  get status(): SessionStatus | null {
    return this.lastStatus;
  }
}
