/** Batch figure rendering:
 *
 *   node dist/cli.js trajectories run.csv [exact.csv] --out fig.svg
 *   node dist/cli.js indicator run.csv --out fig.svg
 *   node dist/cli.js runtime nn.csv exact.csv --out fig.svg
 *   node dist/cli.js baseline design1.csv design2.csv --out fig.svg
 */

import { readFileSync, writeFileSync } from "fs";
import { basename } from "path";
import { parseLog } from "./csv.js";
import { plotBaseline, plotIndicator, plotRuntime, plotTrajectories } from "./figures.js";

const KINDS: Record<string, (logs: ReturnType<typeof parseLog>[], labels: string[]) => string> = {
  trajectories: (logs, labels) => plotTrajectories(logs, labels),
  indicator: (logs) => plotIndicator(logs[0]),
  runtime: (logs, labels) => plotRuntime(logs, labels),
  baseline: (logs, labels) => plotBaseline(logs, labels),
};

export function main(argv: string[]): number {
  const [kind, ...rest] = argv;
  if (!kind || !(kind in KINDS)) {
    process.stderr.write(
      `usage: cli.js {${Object.keys(KINDS).join("|")}} <csv...> --out <svg>\n`);
    return 2;
  }
  const paths: string[] = [];
  let out = "";
  for (let i = 0; i < rest.length; i++) {
    if (rest[i] === "--out") {
      out = rest[++i];
    } else {
      paths.push(rest[i]);
    }
  }
  if (!out || paths.length === 0) {
    process.stderr.write("need at least one CSV and --out\n");
    return 2;
  }
  try {
    const logs = paths.map((p) => parseLog(readFileSync(p, "utf8"), p));
    const labels = paths.map((p) => basename(p).replace(/\.csv$/, ""));
    const svg = KINDS[kind](logs, labels);
    writeFileSync(out, svg);
    process.stdout.write(`wrote ${out} (${svg.length} bytes)\n`);
    return 0;
  } catch (err) {
    process.stderr.write(`${(err as Error).message}\n`);
    return 1;
  }
}

if (process.argv[1] && process.argv[1].endsWith("cli.js")) {
  process.exit(main(process.argv.slice(2)));
}
