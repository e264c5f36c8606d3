import { describe, expect, it } from "vitest";
import { rectangleCorners, validateGrades, ViewerSession } from "../src/session.js";

describe("validateGrades", () => {
  it("accepts integer grades in range", () => {
    expect(validateGrades({ progression: 1, realism: 5, traceability: 3, note: "" })).toEqual([]);
  });

  it("rejects out-of-range and non-integer values before any network call", () => {
    expect(validateGrades({ progression: 6, realism: 1, traceability: 1 })).toHaveLength(1);
    expect(validateGrades({ progression: 0, realism: 1.5, traceability: 1 })).toHaveLength(2);
    expect(validateGrades({})).toHaveLength(3);
  });
});

describe("rectangleCorners", () => {
  it("produces the four corners in drawing order", () => {
    expect(rectangleCorners({ x: 1, y: 2 }, { x: 4, y: 6 })).toEqual([
      { x: 1, y: 2 },
      { x: 4, y: 2 },
      { x: 4, y: 6 },
      { x: 1, y: 6 },
    ]);
  });
});

describe("ViewerSession", () => {
  it("stores service responses verbatim", () => {
    const s = new ViewerSession("a_0001");
    const sel = s.addPoint({ x: 3.25, y: 8.5 });
    const mapped = [{ x: 3.2500001192092896, y: 8.499999812345 }];
    s.markTraced(sel.id, mapped);
    // the exact array object, no rounding or copies of the numbers
    expect(s.list()[0]!.mapped).toBe(mapped);
    expect(s.list()[0]!.mapped![0]!.x).toBe(3.2500001192092896);
  });

  it("selections are immutable once traced", () => {
    const s = new ViewerSession("a_0001");
    const sel = s.addRectangle({ x: 0, y: 0 }, { x: 2, y: 2 });
    s.markTraced(sel.id, rectangleCorners({ x: 1, y: 1 }, { x: 3, y: 3 }));
    expect(() => s.markTraced(sel.id, [])).toThrow(/already traced/);
    expect(() => s.markFailed(sel.id)).toThrow(/already traced/);
  });

  it("failed selections are retained for retry", () => {
    const s = new ViewerSession("a_0001");
    const sel = s.addPoint({ x: 1, y: 1 });
    s.markFailed(sel.id);
    expect(s.pendingRetries().map((x) => x.id)).toEqual([sel.id]);
    s.markTraced(sel.id, [{ x: 1, y: 1 }]);
    expect(s.pendingRetries()).toEqual([]);
  });

  it("rejects mapped lists of the wrong length", () => {
    const s = new ViewerSession("a_0001");
    const sel = s.addRectangle({ x: 0, y: 0 }, { x: 1, y: 1 });
    expect(() => s.markTraced(sel.id, [{ x: 0, y: 0 }])).toThrow(/4 mapped points/);
  });

  it("records the direction each selection was traced under", () => {
    const s = new ViewerSession("a_0001");
    const fwd = s.addPoint({ x: 1, y: 1 });
    s.direction = "inverse";
    const inv = s.addPoint({ x: 2, y: 2 });
    expect(s.list().map((x) => x.direction)).toEqual(["forward", "inverse"]);
    expect(fwd.direction).toBe("forward");
    expect(inv.direction).toBe("inverse");
  });
});
