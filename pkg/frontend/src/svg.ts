/** Deterministic SVG assembly: plain string building, no timestamps, no
 * randomness, fixed numeric formatting, so identical inputs give identical
 * bytes. */

export interface PanelSpec {
  title: string;
  xLabel: string;
  yLabel: string;
  series: Series[];
  markers?: number[];        // vertical event lines (x positions)
  hlines?: { y: number; color: string; dash?: boolean; label?: string }[];
  yRange?: [number, number];
  step?: boolean;            // render series as steps (indicator plots)
}

export interface Series {
  x: number[];
  y: number[];
  color: string;
  label?: string;
  width?: number;
  dash?: boolean;
}

const W = 760;
const PANEL_H = 210;
const MARGIN = { left: 62, right: 150, top: 30, bottom: 40 };

function fmt(v: number): string {
  if (!Number.isFinite(v)) return "0";
  const s = v.toFixed(2);
  return s === "-0.00" ? "0.00" : s;
}

function niceTicks(lo: number, hi: number, n = 5): number[] {
  if (!(hi > lo)) {
    hi = lo + 1;
  }
  const span = hi - lo;
  const step = Math.pow(10, Math.floor(Math.log10(span / n)));
  const err = span / (n * step);
  const mult = err >= 7.5 ? 10 : err >= 3.5 ? 5 : err >= 1.5 ? 2 : 1;
  const s = mult * step;
  const ticks: number[] = [];
  for (let v = Math.ceil(lo / s) * s; v <= hi + 1e-12; v += s) {
    ticks.push(Math.abs(v) < 1e-12 ? 0 : v);
  }
  return ticks;
}

function extent(values: number[]): [number, number] {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  if (!Number.isFinite(lo)) return [0, 1];
  if (hi - lo < 1e-9) {
    lo -= 0.5;
    hi += 0.5;
  }
  return [lo, hi];
}

export function renderPanels(panels: PanelSpec[]): string {
  const height = MARGIN.top + panels.length * PANEL_H + MARGIN.bottom;
  const parts: string[] = [];
  parts.push(`<svg xmlns="http://www.w3.org/2000/svg" width="${W}" height="${height}" viewBox="0 0 ${W} ${height}" font-family="Helvetica,Arial,sans-serif" font-size="12">`);
  parts.push(`<rect width="${W}" height="${height}" fill="white"/>`);
  panels.forEach((panel, pi) => {
    const top = MARGIN.top + pi * PANEL_H;
    const plotW = W - MARGIN.left - MARGIN.right;
    const plotH = PANEL_H - 55;
    const xs = panel.series.flatMap((s) => s.x);
    const ys = panel.series.flatMap((s) => s.y)
      .concat((panel.hlines ?? []).map((h) => h.y));
    const [x0, x1] = extent(xs);
    let [y0, y1] = panel.yRange ?? extent(ys);
    const pad = (y1 - y0) * 0.08;
    if (!panel.yRange) {
      y0 -= pad;
      y1 += pad;
    }
    const sx = (v: number) => MARGIN.left + ((v - x0) / (x1 - x0)) * plotW;
    const sy = (v: number) => top + plotH - ((v - y0) / (y1 - y0)) * plotH;

    parts.push(`<g>`);
    parts.push(`<text x="${MARGIN.left}" y="${top - 8}" font-weight="bold">${panel.title}</text>`);
    parts.push(`<rect x="${MARGIN.left}" y="${top}" width="${plotW}" height="${plotH}" fill="none" stroke="#888"/>`);
    for (const t of niceTicks(x0, x1)) {
      const x = sx(t);
      parts.push(`<line x1="${fmt(x)}" y1="${top + plotH}" x2="${fmt(x)}" y2="${top + plotH + 4}" stroke="#444"/>`);
      parts.push(`<text x="${fmt(x)}" y="${top + plotH + 16}" text-anchor="middle">${fmt(t)}</text>`);
    }
    for (const t of niceTicks(y0, y1)) {
      const y = sy(t);
      parts.push(`<line x1="${MARGIN.left - 4}" y1="${fmt(y)}" x2="${MARGIN.left}" y2="${fmt(y)}" stroke="#444"/>`);
      parts.push(`<text x="${MARGIN.left - 7}" y="${fmt(y + 4)}" text-anchor="end">${fmt(t)}</text>`);
    }
    parts.push(`<text x="${MARGIN.left + plotW / 2}" y="${top + plotH + 32}" text-anchor="middle">${panel.xLabel}</text>`);
    parts.push(`<text transform="translate(${MARGIN.left - 44},${top + plotH / 2}) rotate(-90)" text-anchor="middle">${panel.yLabel}</text>`);

    for (const mx of panel.markers ?? []) {
      if (mx < x0 || mx > x1) continue;
      parts.push(`<line x1="${fmt(sx(mx))}" y1="${top}" x2="${fmt(sx(mx))}" y2="${top + plotH}" stroke="#cc2222" stroke-dasharray="4,3"/>`);
    }
    for (const hl of panel.hlines ?? []) {
      parts.push(`<line x1="${MARGIN.left}" y1="${fmt(sy(hl.y))}" x2="${MARGIN.left + plotW}" y2="${fmt(sy(hl.y))}" stroke="${hl.color}"${hl.dash ? ' stroke-dasharray="6,4"' : ""}/>`);
      if (hl.label) {
        parts.push(`<text x="${MARGIN.left + plotW + 6}" y="${fmt(sy(hl.y) + 4)}" fill="${hl.color}">${hl.label}</text>`);
      }
    }
    let legendY = top + 8;
    for (const s of panel.series) {
      const pts: string[] = [];
      for (let i = 0; i < s.x.length; i++) {
        const xpix = sx(s.x[i]);
        const ypix = sy(Math.max(y0, Math.min(y1, s.y[i])));
        if (panel.step && i > 0) {
          pts.push(`${fmt(xpix)},${fmt(sy(Math.max(y0, Math.min(y1, s.y[i - 1]))))}`);
        }
        pts.push(`${fmt(xpix)},${fmt(ypix)}`);
      }
      parts.push(`<polyline points="${pts.join(" ")}" fill="none" stroke="${s.color}" stroke-width="${s.width ?? 1.6}"${s.dash ? ' stroke-dasharray="6,4"' : ""}/>`);
      if (s.label) {
        parts.push(`<line x1="${MARGIN.left + plotW + 6}" y1="${legendY}" x2="${MARGIN.left + plotW + 26}" y2="${legendY}" stroke="${s.color}" stroke-width="${s.width ?? 1.6}"${s.dash ? ' stroke-dasharray="6,4"' : ""}/>`);
        parts.push(`<text x="${MARGIN.left + plotW + 30}" y="${legendY + 4}">${s.label}</text>`);
        legendY += 16;
      }
    }
    parts.push(`</g>`);
  });
  parts.push(`</svg>`);
  return parts.join("\n") + "\n";
}
