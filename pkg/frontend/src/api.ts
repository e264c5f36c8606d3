/** Typed client for the trace-bundle service. The viewer performs no numerics
 * of its own: every mapped coordinate comes back from these endpoints. */

import { parsePgm, PgmImage } from "./pgm.js";

export interface Point {
  x: number;
  y: number;
}

export type Direction = "forward" | "inverse";

export type ImageName = "source" | "translated" | "structure_source" | "structure_deformed";

export interface Grades {
  progression: number;
  realism: number;
  traceability: number;
  note: string;
}

export interface GradeSummary {
  entries: Array<Grades & { case_id: string }>;
  averages: Partial<Record<"progression" | "realism" | "traceability", number>>;
}

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function expectOk(r: Response): Promise<Response> {
  if (!r.ok) {
    let detail = r.statusText;
    try {
      const body = (await r.json()) as { error?: string };
      if (body.error) detail = body.error;
    } catch {
      /* non-JSON error body */
    }
    throw new ApiError(r.status, detail);
  }
  return r;
}

export class TraceClient {
  constructor(private base: string = "") {}

  async listCases(): Promise<string[]> {
    const r = await expectOk(await fetch(`${this.base}/api/cases`));
    return ((await r.json()) as { cases: string[] }).cases;
  }

  async getMeta(caseId: string): Promise<Record<string, string>> {
    const r = await expectOk(await fetch(`${this.base}/api/cases/${caseId}/meta`));
    return (await r.json()) as Record<string, string>;
  }

  async fetchImage(caseId: string, name: ImageName): Promise<PgmImage> {
    const r = await expectOk(await fetch(`${this.base}/api/cases/${caseId}/image/${name}`));
    return parsePgm(new Uint8Array(await r.arrayBuffer()));
  }

  async tracePoints(caseId: string, direction: Direction, points: Point[]): Promise<Point[]> {
    const r = await expectOk(
      await fetch(`${this.base}/api/cases/${caseId}/trace`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ direction, points }),
      })
    );
    return ((await r.json()) as { points: Point[] }).points;
  }

  async submitGrades(caseId: string, grades: Grades): Promise<void> {
    await expectOk(
      await fetch(`${this.base}/api/cases/${caseId}/grade`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(grades),
      })
    );
  }

  async getGrades(caseId: string): Promise<GradeSummary> {
    const r = await expectOk(await fetch(`${this.base}/api/cases/${caseId}/grades`));
    return (await r.json()) as GradeSummary;
  }
}
