/** Parsing of relaxmpc closed-loop logs.
 *
 * The log schema is fixed by the simulator; every accessor names the column
 * it needs so a missing or reordered column fails loudly.
 */

export const LOG_COLUMNS = [
  "t", "p", "v", "a", "a_req", "j", "j_req", "p_obs",
  "delta_j", "delta_a", "mode", "F1", "F2", "qp_status", "solve_time_ms",
] as const;

export interface ScenarioLog {
  columns: string[];
  rows: string[][];
  path: string;
}

export function parseLog(text: string, path = "<memory>"): ScenarioLog {
  const lines = text.split("\n").filter((l) => l.trim().length > 0);
  if (lines.length === 0) {
    throw new Error(`${path}: empty log file`);
  }
  const columns = lines[0].split(",").map((c) => c.trim());
  const rows = lines.slice(1).map((line) => line.split(","));
  for (const [i, row] of rows.entries()) {
    if (row.length !== columns.length) {
      throw new Error(
        `${path}: row ${i + 1} has ${row.length} fields, header has ${columns.length}`);
    }
  }
  return { columns, rows, path };
}

export function numericColumn(log: ScenarioLog, name: string): number[] {
  const idx = log.columns.indexOf(name);
  if (idx < 0) {
    throw new Error(`${log.path}: missing column "${name}"`);
  }
  return log.rows.map((row, i) => {
    const value = Number(row[idx]);
    if (Number.isNaN(value)) {
      throw new Error(`${log.path}: non-numeric value in column "${name}" row ${i + 1}`);
    }
    return value;
  });
}

export function stringColumn(log: ScenarioLog, name: string): string[] {
  const idx = log.columns.indexOf(name);
  if (idx < 0) {
    throw new Error(`${log.path}: missing column "${name}"`);
  }
  return log.rows.map((row) => row[idx]);
}

/** Two logs being overlaid must share the sampling grid. */
export function assertSharedTimeGrid(a: ScenarioLog, b: ScenarioLog): void {
  const ta = numericColumn(a, "t");
  const tb = numericColumn(b, "t");
  const n = Math.min(ta.length, tb.length);
  for (let i = 0; i < n; i++) {
    if (Math.abs(ta[i] - tb[i]) > 1e-9) {
      throw new Error(
        `time grids differ at index ${i}: ${a.path} has t=${ta[i]}, ${b.path} has t=${tb[i]}`);
    }
  }
}
