/** DOM wiring: gallery, canvas editor, keyboard shortcuts, progress bar. */

import { ReviewApi } from "./api";
import { dragHandle, nearestHandle, type HandleKind } from "./ellipse";
import { drawScene, type SceneImages } from "./render";
import { currentItem, previewEllipse, ReviewSession, type ViewState } from "./state";

const CANVAS_SIZE = 512;

const api = new ReviewApi("");
let scene: SceneImages | null = null;
let activeHandle: HandleKind | null = null;
let imageSize = { width: 1, height: 1 };

const canvas = document.getElementById("editor") as HTMLCanvasElement;
const statusLine = document.getElementById("status") as HTMLDivElement;
const countsLine = document.getElementById("counts") as HTMLDivElement;
const errorBanner = document.getElementById("error") as HTMLDivElement;
const donePanel = document.getElementById("done") as HTMLDivElement;
const opacitySlider = document.getElementById("opacity") as HTMLInputElement;
const qualityBadge = document.getElementById("quality") as HTMLSpanElement;
const gallery = document.getElementById("gallery") as HTMLDivElement;

const session = new ReviewSession(api, render);

function render(state: ViewState): void {
  const item = currentItem(state);
  errorBanner.hidden = state.error === null;
  if (state.error !== null) errorBanner.textContent = `${state.error} — press L to retry`;
  donePanel.hidden = !state.done;
  canvas.parentElement!.classList.toggle("hidden", state.done);
  countsLine.textContent =
    `pending ${state.counts.pending} · accepted ${state.counts.accepted}` +
    ` · rejected ${state.counts.rejected}`;
  if (!item) {
    statusLine.textContent = "queue empty";
    return;
  }
  statusLine.textContent =
    `${state.cursor + 1} / ${state.queue.length} — ${item.id}` +
    (state.dirty ? " (edited)" : "");
  qualityBadge.textContent = `q=${item.quality.toFixed(3)}`;
  loadScene(item.id).then(() => redraw(state));
  renderGallery(state);
}

function renderGallery(state: ViewState): void {
  gallery.replaceChildren(
    ...state.queue.map((item, i) => {
      const img = document.createElement("img");
      img.src = api.imageUrl(item.id);
      img.title = item.id;
      img.className = i === state.cursor ? "thumb current" : "thumb";
      img.onclick = () => {
        session.state = { ...session.state, cursor: i, edited: null, dirty: false };
        render(session.state);
      };
      return img;
    }),
  );
}

let sceneFor: string | null = null;

async function loadScene(itemId: string): Promise<void> {
  if (sceneFor === itemId && scene) return;
  const [image, mask] = await Promise.all([
    loadImage(api.imageUrl(itemId)),
    loadImage(api.maskUrl(itemId)),
  ]);
  scene = { image, mask };
  sceneFor = itemId;
  imageSize = { width: image.naturalWidth, height: image.naturalHeight };
}

function loadImage(src: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = reject;
    img.src = src;
  });
}

function redraw(state: ViewState): void {
  if (!scene) return;
  drawScene(canvas, scene, state.opacity, previewEllipse(state), activeHandle);
}

function pointerToImage(ev: PointerEvent): [number, number] {
  const rect = canvas.getBoundingClientRect();
  const sx = imageSize.width / rect.width;
  const sy = imageSize.height / rect.height;
  return [(ev.clientX - rect.left) * sx, (ev.clientY - rect.top) * sy];
}

canvas.addEventListener("pointerdown", (ev) => {
  const ellipse = previewEllipse(session.state);
  if (!ellipse) return;
  const [x, y] = pointerToImage(ev);
  activeHandle = nearestHandle(ellipse, x, y, 12);
  if (activeHandle) canvas.setPointerCapture(ev.pointerId);
});

canvas.addEventListener("pointermove", (ev) => {
  if (!activeHandle) return;
  const ellipse = previewEllipse(session.state);
  if (!ellipse) return;
  const [x, y] = pointerToImage(ev);
  session.edit(dragHandle(ellipse, activeHandle, x, y, imageSize));
});

canvas.addEventListener("pointerup", () => {
  activeHandle = null;
  redraw(session.state);
});

opacitySlider.addEventListener("input", () => {
  session.setOpacity(Number(opacitySlider.value) / 100);
});

document.getElementById("accept")!.addEventListener("click", () => session.submit(true));
document.getElementById("reject")!.addEventListener("click", () => session.submit(false));
document.getElementById("reset")!.addEventListener("click", () => session.reset());
document.getElementById("reload")!.addEventListener("click", () => session.loadQueue());
document.getElementById("export")!.addEventListener("click", async () => {
  const out = prompt("export directory (server-side path)", "curated");
  if (out) {
    const res = await api.exportCurated(out);
    alert(`exported ${res.exported} curated pairs to ${out}`);
  }
});

document.addEventListener("keydown", (ev) => {
  if (ev.target instanceof HTMLInputElement) return;
  switch (ev.key.toLowerCase()) {
    case "a":
      session.submit(true);
      break;
    case "r":
      session.submit(false);
      break;
    case "x":
      session.reset();
      break;
    case "l":
      session.loadQueue();
      break;
    case "arrowright":
      session.state = {
        ...session.state,
        cursor: Math.min(session.state.cursor + 1, session.state.queue.length),
        edited: null,
        dirty: false,
      };
      render(session.state);
      break;
    case "arrowleft":
      session.state = {
        ...session.state,
        cursor: Math.max(session.state.cursor - 1, 0),
        edited: null,
        dirty: false,
      };
      render(session.state);
      break;
  }
});

canvas.width = CANVAS_SIZE;
canvas.height = CANVAS_SIZE;
session.loadQueue();
