import { describe, expect, it } from "vitest";
import { assertSharedTimeGrid, numericColumn, parseLog } from "../src/csv.js";
import { plotBaseline, plotIndicator, plotRuntime, plotTrajectories } from "../src/figures.js";

const HEADER = "t,p,v,a,a_req,j,j_req,p_obs,delta_j,delta_a,mode,F1,F2,qp_status,solve_time_ms";

function makeLog(steps: number, opts: { jumpAt?: number; f1?: (i: number) => number; ms?: (i: number) => number } = {}) {
  const lines = [HEADER];
  for (let i = 0; i < steps; i++) {
    const t = i * 0.05;
    const pObs = 18.4 - (opts.jumpAt !== undefined && t >= opts.jumpAt ? 1 : 0);
    const row = [
      t, 5 * t, 5 - 0.1 * i, -0.1, -0.2, -2, -2, pObs,
      0.1 * (i % 3), 0.05 * (i % 2), 1, opts.f1 ? opts.f1(i) : 0, 0,
      "Optimal", opts.ms ? opts.ms(i) : 10 + (i % 5),
    ];
    lines.push(row.join(","));
  }
  return lines.join("\n") + "\n";
}

describe("csv parsing", () => {
  it("reads the simulator schema", () => {
    const log = parseLog(makeLog(5), "run.csv");
    expect(numericColumn(log, "t")).toHaveLength(5);
    expect(numericColumn(log, "p_obs")[0]).toBeCloseTo(18.4);
  });

  it("names the missing column", () => {
    const log = parseLog("t,p\n0,1\n", "broken.csv");
    expect(() => numericColumn(log, "F1")).toThrowError(/missing column "F1"/);
    expect(() => numericColumn(log, "delta_j")).toThrowError(/delta_j/);
  });

  it("rejects ragged rows", () => {
    expect(() => parseLog("t,p\n0,1,2\n", "ragged.csv")).toThrowError(/row 1/);
  });

  it("rejects mismatched time grids", () => {
    const a = parseLog(makeLog(5), "a.csv");
    const b = parseLog(makeLog(5).replace("0.05", "0.06"), "b.csv");
    expect(() => assertSharedTimeGrid(a, b)).toThrowError(/time grids differ/);
  });
});

describe("figure rendering", () => {
  it("trajectories: one log gives three panels with obstacle overlay", () => {
    const svg = plotTrajectories([parseLog(makeLog(40, { jumpAt: 1.0 }), "run.csv")], ["run"]);
    expect(svg).toContain("<svg");
    expect(svg).toContain("Closed-loop trajectories");
    expect(svg).toContain("obstacle");
    expect((svg.match(/<rect x=/g) ?? []).length).toBe(3);
    // the jump appears as an event marker
    expect(svg).toContain("stroke-dasharray=\"4,3\"");
  });

  it("trajectories: two logs overlay dashed", () => {
    const a = parseLog(makeLog(40), "nn.csv");
    const b = parseLog(makeLog(40), "exact.csv");
    const svg = plotTrajectories([a, b], ["nn", "exact"]);
    expect(svg).toContain("nn");
    expect(svg).toContain("exact");
    expect(svg).toContain("stroke-dasharray=\"6,4\"");
  });

  it("trajectories: refuses three logs", () => {
    const a = parseLog(makeLog(4), "a.csv");
    expect(() => plotTrajectories([a, a, a], ["a", "a", "a"])).toThrowError(/1 or 2/);
  });

  it("indicator: renders a step pulse", () => {
    const log = parseLog(
      makeLog(60, { jumpAt: 1.0, f1: (i) => (i >= 20 && i < 40 ? 1 : 0) }), "run.csv");
    const svg = plotIndicator(log);
    expect(svg).toContain("Infeasibility indicator");
    expect(svg).toContain("polyline");
  });

  it("indicator: flat zero stays inside the band", () => {
    const svg = plotIndicator(parseLog(makeLog(10), "run.csv"));
    expect(svg).toContain("F1");
  });

  it("runtime: draws mean lines for both logs", () => {
    const fast = parseLog(makeLog(30, { ms: () => 8 }), "nn.csv");
    const slow = parseLog(makeLog(30, { ms: () => 40 }), "exact.csv");
    const svg = plotRuntime([fast, slow], ["nn", "exact"]);
    expect(svg).toContain("mean 8.0 ms");
    expect(svg).toContain("mean 40.0 ms");
  });

  it("runtime: single log fallback", () => {
    const svg = plotRuntime([parseLog(makeLog(10), "run.csv")], ["run"]);
    expect(svg).toContain("mean");
  });

  it("runtime: header-only log errors", () => {
    const empty = parseLog(HEADER + "\n", "empty.csv");
    expect(() => plotRuntime([empty], ["empty"])).toThrowError(/no rows/);
  });

  it("baseline: renders slack panels for two designs", () => {
    const a = parseLog(makeLog(30), "design1.csv");
    const b = parseLog(makeLog(30), "design2.csv");
    const svg = plotBaseline([a, b], ["design1", "design2"]);
    expect(svg).toContain("jerk slack");
    expect(svg).toContain("accel slack");
  });

  it("is deterministic: identical input, identical bytes", () => {
    const text = makeLog(50, { jumpAt: 1.5, f1: (i) => (i > 30 ? 1 : 0) });
    const first = plotTrajectories([parseLog(text, "x.csv")], ["x"]);
    const second = plotTrajectories([parseLog(text, "x.csv")], ["x"]);
    expect(first).toBe(second);
    // no embedded timestamps of any common shape
    expect(first).not.toMatch(/\d{4}-\d{2}-\d{2}|\d{2}:\d{2}:\d{2}|Date\(/);
  });
});
