// Keyboard chords and pointer deltas, sampled once per received frame.

// Action-space key ids: W A S D SHIFT SPACE E F -> 0..7.
export const KEY_CODE_MAP: Record<string, number> = {
  KeyW: 0,
  KeyA: 1,
  KeyS: 2,
  KeyD: 3,
  ShiftLeft: 4,
  ShiftRight: 4,
  Space: 5,
  KeyE: 6,
  KeyF: 7,
};

export const MAX_CHORD = 4;
export const TOGGLE_CODE = "KeyT"; // human/agent takeover

export class InputTracker {
  // Held key ids in press order; duplicates collapse to the first press.
  private held: number[] = [];
  private dx = 0;
  private dy = 0;

  keyDown(code: string): void {
    const id = KEY_CODE_MAP[code];
    if (id === undefined) return;
    if (!this.held.includes(id)) this.held.push(id);
  }

  keyUp(code: string): void {
    const id = KEY_CODE_MAP[code];
    if (id === undefined) return;
    this.held = this.held.filter((k) => k !== id);
  }

  pointerMove(movementX: number, movementY: number): void {
    this.dx += movementX;
    this.dy += movementY;
  }

  clearKeys(): void {
    this.held = [];
  }

  // One sample per tick: first MAX_CHORD keys by press order, accumulated
  // pointer movement since the previous sample; accumulators reset.
  sample(): { keys: number[]; dx: number; dy: number } {
    const keys = this.held.slice(0, MAX_CHORD);
    const out = { keys, dx: this.dx, dy: this.dy };
    this.dx = 0;
    this.dy = 0;
    return out;
  }
}
