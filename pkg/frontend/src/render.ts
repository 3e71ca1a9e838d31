/** Canvas drawing: image, mask overlay with adjustable opacity, ellipse
 * outline and drag handles. */

import { handlePositions, outlinePoints } from "./ellipse";
import type { EllipseParams } from "./types";

const MASK_TINT = [64, 200, 255] as const;

export interface SceneImages {
  image: HTMLImageElement;
  mask: HTMLImageElement;
}

export function drawScene(
  canvas: HTMLCanvasElement,
  scene: SceneImages,
  opacity: number,
  ellipse: EllipseParams | null,
  activeHandle: string | null,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(scene.image, 0, 0, width, height);
  if (opacity > 0) {
    ctx.save();
    ctx.globalAlpha = opacity;
    ctx.drawImage(tintedMask(scene.mask), 0, 0, width, height);
    ctx.restore();
  }
  if (ellipse) drawEllipse(ctx, ellipse, scaleOf(canvas, scene.image), activeHandle);
}

function scaleOf(canvas: HTMLCanvasElement, image: HTMLImageElement): number {
  return image.naturalWidth > 0 ? canvas.width / image.naturalWidth : 1;
}

const tintCache = new WeakMap<HTMLImageElement, HTMLCanvasElement>();

function tintedMask(mask: HTMLImageElement): HTMLCanvasElement {
  const cached = tintCache.get(mask);
  if (cached) return cached;
  const off = document.createElement("canvas");
  off.width = mask.naturalWidth;
  off.height = mask.naturalHeight;
  const ctx = off.getContext("2d")!;
  ctx.drawImage(mask, 0, 0);
  const data = ctx.getImageData(0, 0, off.width, off.height);
  const px = data.data;
  for (let i = 0; i < px.length; i += 4) {
    const v = px[i];
    px[i] = MASK_TINT[0];
    px[i + 1] = MASK_TINT[1];
    px[i + 2] = MASK_TINT[2];
    px[i + 3] = v; // raw channel intensity becomes overlay alpha
  }
  ctx.putImageData(data, 0, 0);
  tintCache.set(mask, off);
  return off;
}

function drawEllipse(
  ctx: CanvasRenderingContext2D,
  p: EllipseParams,
  scale: number,
  activeHandle: string | null,
): void {
  const pts = outlinePoints(p);
  ctx.save();
  ctx.strokeStyle = "#ffd43b";
  ctx.lineWidth = 2;
  ctx.beginPath();
  pts.forEach(([x, y], i) => {
    if (i === 0) ctx.moveTo(x * scale, y * scale);
    else ctx.lineTo(x * scale, y * scale);
  });
  ctx.stroke();

  const layout = handlePositions(p);
  for (const [kind, [hx, hy]] of Object.entries(layout)) {
    ctx.beginPath();
    ctx.arc(hx * scale, hy * scale, kind === "center" ? 5 : 4, 0, 2 * Math.PI);
    ctx.fillStyle = kind === activeHandle ? "#4dabf7" : "#ffffffe0";
    ctx.strokeStyle = "#1c1c1c";
    ctx.lineWidth = 1;
    ctx.fill();
    ctx.stroke();
  }
  ctx.restore();
}
