/** Canvas rendering: images at native resolution with zoom/pan, structure
 * overlays, and selection geometry. Screen placement only; all mapped
 * coordinates come from the session (and therefore from the service). */

import { Point } from "./api.js";
import { PgmImage, pgmToRgba } from "./pgm.js";
import { Selection } from "./session.js";

export interface Viewport {
  zoom: number;
  panX: number;
  panY: number;
}

export function defaultViewport(): Viewport {
  return { zoom: 5, panX: 0, panY: 0 };
}

export function toScreen(p: Point, vp: Viewport): Point {
  return { x: (p.x + 0.5) * vp.zoom + vp.panX, y: (p.y + 0.5) * vp.zoom + vp.panY };
}

export function toImage(p: Point, vp: Viewport): Point {
  return { x: (p.x - vp.panX) / vp.zoom - 0.5, y: (p.y - vp.panY) / vp.zoom - 0.5 };
}

export class Pane {
  private ctx: CanvasRenderingContext2D;
  private image: PgmImage | null = null;
  private overlay: PgmImage | null = null;
  overlayVisible = false;
  vp: Viewport = defaultViewport();

  constructor(private canvas: HTMLCanvasElement) {
    const ctx = canvas.getContext("2d");
    if (!ctx) throw new Error("2d canvas context unavailable");
    this.ctx = ctx;
    this.ctx.imageSmoothingEnabled = false;
  }

  setImage(img: PgmImage): void {
    this.image = img;
  }

  setOverlay(img: PgmImage | null): void {
    this.overlay = img;
  }

  private drawPgm(img: PgmImage, alpha: number): void {
    const data = new ImageData(pgmToRgba(img), img.width, img.height);
    const off = document.createElement("canvas");
    off.width = img.width;
    off.height = img.height;
    off.getContext("2d")!.putImageData(data, 0, 0);
    this.ctx.save();
    this.ctx.globalAlpha = alpha;
    this.ctx.imageSmoothingEnabled = false;
    this.ctx.drawImage(
      off,
      this.vp.panX,
      this.vp.panY,
      img.width * this.vp.zoom,
      img.height * this.vp.zoom
    );
    this.ctx.restore();
  }

  /** Forward selections enter on the source pane and map onto the target
   * pane; inverse selections the other way round. */
  render(selections: readonly Selection[], role: "source" | "target"): void {
    this.ctx.fillStyle = "#111";
    this.ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
    if (this.image) this.drawPgm(this.image, 1.0);
    if (this.overlay && this.overlayVisible) this.drawPgm(this.overlay, 0.45);
    for (const sel of selections) {
      const enteredHere = (sel.direction === "forward") === (role === "source");
      const pts = enteredHere ? sel.entered : sel.mapped;
      if (!pts) continue;
      const color = sel.failed ? "#ff5555" : enteredHere ? "#4db8ff" : "#ffd24d";
      this.drawGeometry(pts, sel.kind === "rect", color);
    }
  }

  private drawGeometry(pts: Point[], closed: boolean, color: string): void {
    const screen = pts.map((p) => toScreen(p, this.vp));
    this.ctx.strokeStyle = color;
    this.ctx.fillStyle = color;
    this.ctx.lineWidth = 1.5;
    if (screen.length > 1) {
      this.ctx.beginPath();
      this.ctx.moveTo(screen[0]!.x, screen[0]!.y);
      for (const p of screen.slice(1)) this.ctx.lineTo(p.x, p.y);
      if (closed) this.ctx.closePath();
      this.ctx.stroke();
    }
    for (const p of screen) {
      this.ctx.beginPath();
      this.ctx.arc(p.x, p.y, 3, 0, Math.PI * 2);
      this.ctx.fill();
    }
  }
}
