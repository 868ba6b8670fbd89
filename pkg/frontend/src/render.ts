/** Rendering helpers. The colony is the subject: frames are upscaled with
 *  nearest-neighbor blocks so individual cells stay visible. */

export const CLASS_COLORS: Record<string, string> = {
  background: "#282830",
  object: "#eb8228",
  boundary: "#f5f5f5",
};

export interface PaneLayout {
  scale: number;
  offsetX: number;
  offsetY: number;
}

/** Integer nearest-neighbor scale fitting a src square into a dst square. */
export function fitScale(srcSize: number, dstSize: number): PaneLayout {
  const scale = Math.max(1, Math.floor(dstSize / srcSize));
  const used = scale * srcSize;
  const off = Math.floor((dstSize - used) / 2);
  return { scale, offsetX: off, offsetY: off };
}

/** Map a canvas pixel back to a frame cell; null outside the drawn area. */
export function canvasToCell(
  x: number,
  y: number,
  srcSize: number,
  layout: PaneLayout,
): { cx: number; cy: number } | null {
  const cx = Math.floor((x - layout.offsetX) / layout.scale);
  const cy = Math.floor((y - layout.offsetY) / layout.scale);
  if (cx < 0 || cy < 0 || cx >= srcSize || cy >= srcSize) return null;
  return { cx, cy };
}

export interface SparkPoint {
  x: number;
  y: number;
}

/** Polyline for the mean-gate sparkline over the last `keep` values,
 *  mapped into a w x h box (gate values live in [0, 1], y grows down). */
export function sparklinePoints(
  values: number[],
  w: number,
  h: number,
  keep = 100,
): SparkPoint[] {
  const tail = values.slice(-keep);
  if (tail.length === 0) return [];
  const n = tail.length;
  return tail.map((v, i) => ({
    x: n === 1 ? w : (i / (n - 1)) * w,
    y: h - Math.max(0, Math.min(1, v)) * h,
  }));
}

export function drawBitmap(
  ctx: CanvasRenderingContext2D,
  bmp: ImageBitmap | HTMLImageElement,
  srcSize: number,
  canvasSize: number,
): PaneLayout {
  const layout = fitScale(srcSize, canvasSize);
  ctx.imageSmoothingEnabled = false;
  ctx.fillStyle = "#14141a";
  ctx.fillRect(0, 0, canvasSize, canvasSize);
  ctx.drawImage(
    bmp,
    layout.offsetX,
    layout.offsetY,
    srcSize * layout.scale,
    srcSize * layout.scale,
  );
  return layout;
}

export function drawDragRect(
  ctx: CanvasRenderingContext2D,
  rect: { x: number; y: number; w: number; h: number },
  layout: PaneLayout,
): void {
  ctx.strokeStyle = "#4ad0ff";
  ctx.lineWidth = 2;
  ctx.strokeRect(
    layout.offsetX + rect.x * layout.scale,
    layout.offsetY + rect.y * layout.scale,
    rect.w * layout.scale,
    rect.h * layout.scale,
  );
}

export function drawSparkline(
  ctx: CanvasRenderingContext2D,
  values: number[],
  w: number,
  h: number,
): void {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#2a2a36";
  ctx.strokeRect(0.5, 0.5, w - 1, h - 1);
  const pts = sparklinePoints(values, w, h);
  if (pts.length < 2) return;
  ctx.strokeStyle = "#4ad0ff";
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  ctx.moveTo(pts[0].x, pts[0].y);
  for (const p of pts.slice(1)) ctx.lineTo(p.x, p.y);
  ctx.stroke();
}

export async function decodeBase64Png(b64: string): Promise<ImageBitmap> {
  const bin = atob(b64);
  const bytes = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) bytes[i] = bin.charCodeAt(i);
  const blob = new Blob([bytes], { type: "image/png" });
  return createImageBitmap(blob);
}
