// Browser bootstrap: canvas, websocket, pointer lock, status bar.

import { InputTracker, TOGGLE_CODE } from "./input.js";
import { rgbToRgba } from "./protocol.js";
import { ClientSession } from "./session.js";

const canvas = document.getElementById("view") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const statusEl = document.getElementById("status")!;
const bannerEl = document.getElementById("banner")!;
const retryBtn = document.getElementById("retry") as HTMLButtonElement;

const params = new URLSearchParams(location.search);
const wsUrl = params.get("ws")
  ?? `ws://${location.hostname}:${params.get("port") ?? "8765"}`;

let session: ClientSession | null = null;
let ws: WebSocket | null = null;

function showBanner(text: string): void {
  bannerEl.textContent = text;
  bannerEl.style.display = "block";
  retryBtn.style.display = "inline-block";
}

function hideBanner(): void {
  bannerEl.style.display = "none";
  retryBtn.style.display = "none";
}

function connect(): void {
  hideBanner();
  const input = new InputTracker();
  ws = new WebSocket(wsUrl);

  session = new ClientSession(
    { send: (msg) => ws?.readyState === WebSocket.OPEN && ws.send(JSON.stringify(msg)) },
    input,
    {
      paint: (rgb, w, h) => {
        if (canvas.width !== w || canvas.height !== h) {
          canvas.width = w;
          canvas.height = h;
        }
        // Raw bytes onto the canvas; only CSS scales the picture, so the
        // human sees exactly the frame the policy would see.
        ctx.putImageData(new ImageData(rgbToRgba(rgb, w, h), w, h), 0, 0);
      },
      onStatus: (s) => {
        statusEl.textContent =
          `mode ${s.mode} | score ${s.score} | tick ${s.tick} | ` +
          `frame gap ${s.frameGapMs.toFixed(0)} ms` +
          (session?.pointerLocked ? "" : " | click canvas for mouse capture");
      },
      onEpisodeEnd: (score) => {
        statusEl.textContent = `episode over, score ${score} (auto-restarting)`;
      },
    },
  );

  ws.onmessage = (ev) => session?.handleMessage(String(ev.data));
  ws.onclose = () => showBanner("connection lost");
  ws.onerror = () => showBanner("connection failed");

  window.addEventListener("keydown", (e) => {
    if (e.code === TOGGLE_CODE) {
      session?.toggleMode();
      return;
    }
    input.keyDown(e.code);
    if (e.code === "Space") e.preventDefault();
  });
  window.addEventListener("keyup", (e) => input.keyUp(e.code));
  window.addEventListener("blur", () => input.clearKeys());

  canvas.addEventListener("click", () => canvas.requestPointerLock());
  document.addEventListener("pointerlockchange", () => {
    const locked = document.pointerLockElement === canvas;
    session?.setPointerLocked(locked);
    if (!locked) {
      statusEl.textContent += " | pointer lock off: mouse deltas sent as 0";
    }
  });
  document.addEventListener("pointerlockerror", () => {
    session?.setPointerLocked(false);
    statusEl.textContent += " | pointer lock denied: mouse deltas sent as 0";
  });
  window.addEventListener("mousemove", (e) => {
    if (session?.pointerLocked) input.pointerMove(e.movementX, e.movementY);
  });
}

retryBtn.addEventListener("click", connect);
connect();
