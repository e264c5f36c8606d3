/** DOM wiring: case navigation, side-by-side panes, trace interactions, the
 * grading form, and the error banner. */

import { ApiError, Direction, Point, TraceClient } from "./api.js";
import { Pane, toImage } from "./view.js";
import { validateGrades, ViewerSession } from "./session.js";

const client = new TraceClient("");

const el = {
  caseSelect: document.getElementById("case-select") as HTMLSelectElement,
  banner: document.getElementById("banner") as HTMLDivElement,
  meta: document.getElementById("meta") as HTMLPreElement,
  sourcePane: document.getElementById("source-pane") as HTMLCanvasElement,
  targetPane: document.getElementById("target-pane") as HTMLCanvasElement,
  direction: document.getElementById("direction") as HTMLSelectElement,
  overlayToggle: document.getElementById("overlay-toggle") as HTMLInputElement,
  clearBtn: document.getElementById("clear-selections") as HTMLButtonElement,
  gradeForm: document.getElementById("grade-form") as HTMLFormElement,
  gradeStatus: document.getElementById("grade-status") as HTMLSpanElement,
  tools: document.getElementById("tools") as HTMLFieldSetElement,
};

let session: ViewerSession | null = null;
let source: Pane | null = null;
let target: Pane | null = null;
let dragStart: Point | null = null;
let caseIds: string[] = [];

function showBanner(message: string | null): void {
  el.banner.textContent = message ?? "";
  el.banner.style.display = message ? "block" : "none";
}

function setToolsEnabled(on: boolean): void {
  el.tools.disabled = !on;
  el.gradeForm.querySelectorAll("input,button").forEach((n) => {
    (n as HTMLInputElement).disabled = !on;
  });
}

function render(): void {
  if (!session || !source || !target) return;
  source.render(session.list(), "source");
  target.render(session.list(), "target");
}

async function loadCase(caseId: string): Promise<void> {
  showBanner(null);
  try {
    const [src, tra, structDef, meta] = await Promise.all([
      client.fetchImage(caseId, "source"),
      client.fetchImage(caseId, "translated"),
      client.fetchImage(caseId, "structure_deformed"),
      client.getMeta(caseId),
    ]);
    session = new ViewerSession(caseId);
    session.direction = el.direction.value as Direction;
    source = new Pane(el.sourcePane);
    target = new Pane(el.targetPane);
    source.setImage(src);
    target.setImage(tra);
    target.setOverlay(structDef);
    target.overlayVisible = el.overlayToggle.checked;
    el.meta.textContent = Object.entries(meta)
      .filter(([k]) => k.startsWith("metric.") || k === "case_id")
      .map(([k, v]) => `${k} = ${v}`)
      .join("\n");
    setToolsEnabled(true);
    render();
  } catch (e) {
    session = null;
    setToolsEnabled(false);
    showBanner(e instanceof ApiError ? `case unavailable: ${e.message}` : String(e));
  }
}

async function traceSelection(id: number, points: Point[]): Promise<void> {
  if (!session) return;
  try {
    const mapped = await client.tracePoints(session.caseId, session.direction, points);
    session.markTraced(id, mapped);
  } catch (e) {
    session.markFailed(id);
    showBanner(`trace failed: ${e instanceof Error ? e.message : e}`);
  }
  render();
}

function activePane(): Pane | null {
  if (!session) return null;
  return session.direction === "forward" ? source : target;
}

function canvasPoint(canvas: HTMLCanvasElement, ev: MouseEvent): Point {
  const rect = canvas.getBoundingClientRect();
  return { x: ev.clientX - rect.left, y: ev.clientY - rect.top };
}

function wireInteractions(canvas: HTMLCanvasElement, paneOf: () => Pane | null, isEnteredSide: () => boolean): void {
  canvas.addEventListener("mousedown", (ev) => {
    if (!session || !isEnteredSide()) return;
    const pane = paneOf();
    if (!pane) return;
    dragStart = toImage(canvasPoint(canvas, ev), pane.vp);
  });
  canvas.addEventListener("mouseup", (ev) => {
    if (!session || dragStart === null || !isEnteredSide()) return;
    const pane = paneOf();
    if (!pane) return;
    const end = toImage(canvasPoint(canvas, ev), pane.vp);
    const dist = Math.hypot(end.x - dragStart.x, end.y - dragStart.y);
    const sel =
      dist < 1.0 ? session.addPoint(dragStart) : session.addRectangle(dragStart, end);
    dragStart = null;
    render();
    void traceSelection(sel.id, sel.entered);
  });
  canvas.addEventListener("wheel", (ev) => {
    const pane = paneOf();
    if (!pane) return;
    ev.preventDefault();
    const factor = ev.deltaY < 0 ? 1.2 : 1 / 1.2;
    pane.vp.zoom = Math.min(24, Math.max(1, pane.vp.zoom * factor));
    render();
  });
}

async function init(): Promise<void> {
  try {
    caseIds = await client.listCases();
  } catch (e) {
    showBanner(`service unreachable: ${e instanceof Error ? e.message : e}`);
    setToolsEnabled(false);
    return;
  }
  for (const id of caseIds) {
    const opt = document.createElement("option");
    opt.value = id;
    opt.textContent = id;
    el.caseSelect.appendChild(opt);
  }
  el.caseSelect.addEventListener("change", () => void loadCase(el.caseSelect.value));
  el.direction.addEventListener("change", () => {
    if (session) {
      session.direction = el.direction.value as Direction;
      render();
    }
  });
  el.overlayToggle.addEventListener("change", () => {
    if (target) {
      target.overlayVisible = el.overlayToggle.checked;
      render();
    }
  });
  el.clearBtn.addEventListener("click", () => {
    session?.clear();
    render();
  });
  el.gradeForm.addEventListener("submit", (ev) => {
    ev.preventDefault();
    void submitGrades();
  });
  wireInteractions(el.sourcePane, () => source, () => session?.direction === "forward");
  wireInteractions(el.targetPane, () => target, () => session?.direction === "inverse");
  if (caseIds.length > 0) {
    el.caseSelect.value = caseIds[0]!;
    await loadCase(caseIds[0]!);
  }
}

async function submitGrades(): Promise<void> {
  if (!session) return;
  const form = new FormData(el.gradeForm);
  const input = {
    progression: Number(form.get("progression")),
    realism: Number(form.get("realism")),
    traceability: Number(form.get("traceability")),
    note: String(form.get("note") ?? ""),
  };
  const errors = validateGrades(input);
  if (errors.length > 0) {
    el.gradeStatus.textContent = errors.join("; ");
    return; // blocked client-side, no network call
  }
  try {
    await client.submitGrades(session.caseId, input);
    el.gradeStatus.textContent = "recorded";
    const idx = caseIds.indexOf(session.caseId);
    const next = caseIds[(idx + 1) % caseIds.length];
    if (next && next !== session.caseId) {
      el.caseSelect.value = next;
      await loadCase(next);
    }
  } catch (e) {
    el.gradeStatus.textContent = `submit failed: ${e instanceof Error ? e.message : e}`;
  }
}

void init();
