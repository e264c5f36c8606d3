/** Viewer session state: selections with their service-returned counterparts
 * and grade validation. Pure logic, no DOM, so it is unit-testable. */

import { Direction, Point } from "./api.js";

export type SelectionKind = "point" | "rect";

export interface Selection {
  id: number;
  kind: SelectionKind;
  direction: Direction;
  /** coordinates the user entered, in image pixels */
  entered: Point[];
  /** coordinates returned by the service, stored verbatim; null until traced */
  mapped: Point[] | null;
  failed: boolean;
}

export interface GradeInput {
  progression: number;
  realism: number;
  traceability: number;
  note: string;
}

const GRADE_KEYS = ["progression", "realism", "traceability"] as const;

export function validateGrades(input: Partial<GradeInput>): string[] {
  const errors: string[] = [];
  for (const key of GRADE_KEYS) {
    const v = input[key];
    if (typeof v !== "number" || !Number.isInteger(v) || v < 1 || v > 5) {
      errors.push(`${key} must be an integer from 1 to 5`);
    }
  }
  return errors;
}

/** Rectangle corners in drawing order; maps to a generally non-rectangular
 * quadrilateral on the other pane. */
export function rectangleCorners(a: Point, b: Point): Point[] {
  return [
    { x: a.x, y: a.y },
    { x: b.x, y: a.y },
    { x: b.x, y: b.y },
    { x: a.x, y: b.y },
  ];
}

export class ViewerSession {
  readonly caseId: string;
  direction: Direction = "forward";
  private selections: Selection[] = [];
  private nextId = 1;

  constructor(caseId: string) {
    this.caseId = caseId;
  }

  list(): readonly Selection[] {
    return this.selections;
  }

  addPoint(p: Point): Selection {
    return this.push("point", [p]);
  }

  addRectangle(a: Point, b: Point): Selection {
    return this.push("rect", rectangleCorners(a, b));
  }

  private push(kind: SelectionKind, entered: Point[]): Selection {
    const sel: Selection = {
      id: this.nextId++,
      kind,
      direction: this.direction,
      entered,
      mapped: null,
      failed: false,
    };
    this.selections.push(sel);
    return sel;
  }

  /** Record the service response verbatim; a traced selection is immutable. */
  markTraced(id: number, mapped: Point[]): Selection {
    const sel = this.get(id);
    if (sel.mapped !== null) {
      throw new Error(`selection ${id} already traced`);
    }
    if (mapped.length !== sel.entered.length) {
      throw new Error(`expected ${sel.entered.length} mapped points, got ${mapped.length}`);
    }
    sel.mapped = mapped;
    sel.failed = false;
    return sel;
  }

  /** A failed trace is retained so it can be retried. */
  markFailed(id: number): Selection {
    const sel = this.get(id);
    if (sel.mapped !== null) {
      throw new Error(`selection ${id} already traced`);
    }
    sel.failed = true;
    return sel;
  }

  pendingRetries(): Selection[] {
    return this.selections.filter((s) => s.failed && s.mapped === null);
  }

  clear(): void {
    this.selections = [];
  }

  private get(id: number): Selection {
    const sel = this.selections.find((s) => s.id === id);
    if (!sel) throw new Error(`unknown selection ${id}`);
    return sel;
  }
}
