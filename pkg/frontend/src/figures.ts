/** The four figure kinds rendered from closed-loop logs. */

import { ScenarioLog, assertSharedTimeGrid, numericColumn } from "./csv.js";
import { PanelSpec, Series, renderPanels } from "./svg.js";

const COLORS = ["#1f6fb4", "#e07b27", "#2c8c4a", "#8a4fb0"];

function eventMarkers(log: ScenarioLog): number[] {
  // obstacle jumps show up as downward steps of the logged position
  const t = numericColumn(log, "t");
  const pObs = numericColumn(log, "p_obs");
  const markers: number[] = [];
  for (let i = 1; i < pObs.length; i++) {
    if (pObs[i] < pObs[i - 1] - 1e-9) {
      markers.push(t[i]);
    }
  }
  return markers;
}

export function plotTrajectories(logs: ScenarioLog[], labels: string[]): string {
  if (logs.length < 1 || logs.length > 2) {
    throw new Error(`trajectories figure takes 1 or 2 logs, got ${logs.length}`);
  }
  if (logs.length === 2) {
    assertSharedTimeGrid(logs[0], logs[1]);
  }
  const t = numericColumn(logs[0], "t");
  const panels: PanelSpec[] = [];
  const defs: [string, string][] = [
    ["p", "position [m]"], ["v", "velocity [m/s]"], ["a", "acceleration [m/s2]"]];
  defs.forEach(([col, ylabel], pi) => {
    const series: Series[] = logs.map((log, i) => ({
      x: numericColumn(log, "t"),
      y: numericColumn(log, col),
      color: COLORS[i],
      label: labels[i],
      dash: i === 1,
    }));
    if (col === "p") {
      series.push({
        x: t,
        y: numericColumn(logs[0], "p_obs"),
        color: "#cc2222",
        label: "obstacle",
        width: 1.2,
      });
    }
    panels.push({
      title: pi === 0 ? "Closed-loop trajectories" : "",
      xLabel: pi === defs.length - 1 ? "time [s]" : "",
      yLabel: ylabel,
      series,
      markers: eventMarkers(logs[0]),
    });
  });
  return renderPanels(panels);
}

export function plotIndicator(log: ScenarioLog): string {
  const t = numericColumn(log, "t");
  const f1 = numericColumn(log, "F1");
  return renderPanels([{
    title: "Infeasibility indicator of the softest relaxation mode",
    xLabel: "time [s]",
    yLabel: "F1",
    series: [{ x: t, y: f1, color: COLORS[0], label: "F1" }],
    markers: eventMarkers(log),
    yRange: [-0.1, 1.1],
    step: true,
  }]);
}

export function plotRuntime(logs: ScenarioLog[], labels: string[]): string {
  if (logs.length < 1 || logs.length > 2) {
    throw new Error(`runtime figure takes 1 or 2 logs, got ${logs.length}`);
  }
  const series: Series[] = [];
  const hlines: PanelSpec["hlines"] = [];
  logs.forEach((log, i) => {
    const t = numericColumn(log, "t");
    const ms = numericColumn(log, "solve_time_ms");
    if (ms.length === 0) {
      throw new Error(`${log.path}: no rows to plot`);
    }
    const mean = ms.reduce((acc, v) => acc + v, 0) / ms.length;
    series.push({ x: t, y: ms, color: COLORS[i], label: labels[i], width: 1.1 });
    hlines.push({
      y: mean, color: COLORS[i], dash: true,
      label: `mean ${mean.toFixed(1)} ms`,
    });
  });
  return renderPanels([{
    title: "Per-step decision time",
    xLabel: "time [s]",
    yLabel: "solve time [ms]",
    series,
    hlines,
    markers: eventMarkers(logs[0]),
  }]);
}

export function plotBaseline(logs: ScenarioLog[], labels: string[]): string {
  if (logs.length < 1 || logs.length > 2) {
    throw new Error(`baseline figure takes 1 or 2 logs, got ${logs.length}`);
  }
  if (logs.length === 2) {
    assertSharedTimeGrid(logs[0], logs[1]);
  }
  const panels: PanelSpec[] = [];
  panels.push({
    title: "Softened designs: velocity",
    xLabel: "",
    yLabel: "velocity [m/s]",
    series: logs.map((log, i) => ({
      x: numericColumn(log, "t"),
      y: numericColumn(log, "v"),
      color: COLORS[i],
      label: labels[i],
      dash: i === 1,
    })),
    markers: eventMarkers(logs[0]),
  });
  for (const col of ["delta_j", "delta_a"]) {
    panels.push({
      title: "",
      xLabel: col === "delta_a" ? "time [s]" : "",
      yLabel: col === "delta_j" ? "jerk slack [m/s3]" : "accel slack [m/s2]",
      series: logs.map((log, i) => ({
        x: numericColumn(log, "t"),
        y: numericColumn(log, col),
        color: COLORS[i],
        label: labels[i],
        dash: i === 1,
      })),
      markers: eventMarkers(logs[0]),
    });
  }
  return renderPanels(panels);
}
