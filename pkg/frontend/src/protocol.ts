// Wire protocol shared with the session server. One JSON object per
// websocket message; unknown types are ignored by both ends.

export interface FrameMsg {
  type: "frame";
  tick: number;
  w: number;
  h: number;
  px: string; // base64 raw RGB, w*h*3 bytes
}

export interface StateMsg {
  type: "state";
  mode: "human" | "agent";
  score: number;
  tick: number;
}

export interface EpisodeEndMsg {
  type: "episode_end";
  score: number;
}

export type ServerMsg = FrameMsg | StateMsg | EpisodeEndMsg;

export interface ActionMsg {
  type: "action";
  keys: number[];
  dx: number;
  dy: number;
  tick: number; // tick of the frame this action answers
}

export interface ModeMsg {
  type: "mode";
  value: "human" | "agent";
}

export interface ResetMsg {
  type: "reset";
  seed: number;
}

export type ClientMsg = ActionMsg | ModeMsg | ResetMsg;

export function parseServerMsg(raw: string): ServerMsg | null {
  let obj: unknown;
  try {
    obj = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof obj !== "object" || obj === null) return null;
  const msg = obj as { type?: unknown };
  if (msg.type === "frame" || msg.type === "state" || msg.type === "episode_end") {
    return obj as ServerMsg;
  }
  return null; // unknown types are dropped, session continues
}

export function decodeFramePixels(msg: FrameMsg): Uint8ClampedArray {
  const bin = atob(msg.px);
  const rgb = new Uint8ClampedArray(bin.length);
  for (let i = 0; i < bin.length; i++) rgb[i] = bin.charCodeAt(i);
  return rgb;
}

// RGB -> RGBA for canvas putImageData; no resampling, byte for byte.
export function rgbToRgba(
  rgb: Uint8ClampedArray,
  w: number,
  h: number,
): Uint8ClampedArray<ArrayBuffer> {
  const rgba = new Uint8ClampedArray(new ArrayBuffer(w * h * 4));
  for (let p = 0, q = 0; p < rgb.length; p += 3, q += 4) {
    rgba[q] = rgb[p];
    rgba[q + 1] = rgb[p + 1];
    rgba[q + 2] = rgb[p + 2];
    rgba[q + 3] = 255;
  }
  return rgba;
}
