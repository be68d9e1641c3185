/** Minimal canvas line charts; no external charting dependency. */

export interface Series {
  label: string;
  x: number[];
  y: (number | null)[];
  color: string;
}

export interface ChartOptions {
  logY?: boolean;
  yLabel?: string;
  xLabel?: string;
  markers?: number[]; // x positions of truncation markers
}

const PALETTE = [
  '#4c78a8', '#f58518', '#54a24b', '#e45756',
  '#72b7b2', '#b279a2', '#eeca3b', '#9d755d',
];

export function color(index: number): string {
  return PALETTE[index % PALETTE.length];
}

function transform(value: number, lo: number, hi: number, pixLo: number, pixHi: number): number {
  if (hi === lo) return (pixLo + pixHi) / 2;
  return pixLo + ((value - lo) / (hi - lo)) * (pixHi - pixLo);
}

export function drawChart(
  canvas: HTMLCanvasElement,
  series: Series[],
  options: ChartOptions = {},
): void {
  const ctx = canvas.getContext('2d');
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  const margin = { left: 48, right: 10, top: 10, bottom: 28 };

  const xs = series.flatMap((s) => s.x);
  const ys = series.flatMap((s) => s.y.filter((v): v is number => v !== null));
  if (xs.length === 0 || ys.length === 0) return;
  const mapY = (v: number) => (options.logY ? Math.log10(Math.max(v, 1e-12)) : v);
  let xLo = Math.min(...xs);
  let xHi = Math.max(...xs);
  let yLo = Math.min(...ys.map(mapY));
  let yHi = Math.max(...ys.map(mapY));
  if (xLo === xHi) {
    xLo -= 1;
    xHi += 1;
  }
  if (yLo === yHi) {
    yLo -= 1;
    yHi += 1;
  }
  const pad = (yHi - yLo) * 0.05;
  yLo -= pad;
  yHi += pad;

  ctx.strokeStyle = '#888';
  ctx.lineWidth = 1;
  ctx.strokeRect(margin.left, margin.top, width - margin.left - margin.right,
    height - margin.top - margin.bottom);

  ctx.fillStyle = '#555';
  ctx.font = '10px sans-serif';
  for (let i = 0; i <= 4; i += 1) {
    const vy = yLo + ((yHi - yLo) * i) / 4;
    const py = transform(vy, yLo, yHi, height - margin.bottom, margin.top);
    const label = options.logY ? `1e${vy.toFixed(1)}` : vy.toPrecision(3);
    ctx.fillText(label, 4, py + 3);
    const vx = xLo + ((xHi - xLo) * i) / 4;
    const px = transform(vx, xLo, xHi, margin.left, width - margin.right);
    ctx.fillText(vx.toPrecision(3), px - 8, height - 8);
  }
  if (options.yLabel) ctx.fillText(options.yLabel, 4, margin.top + 2);
  if (options.xLabel) ctx.fillText(options.xLabel, width - margin.right - 60, height - 8);

  for (const marker of options.markers ?? []) {
    const px = transform(marker, xLo, xHi, margin.left, width - margin.right);
    ctx.strokeStyle = 'rgba(228, 87, 86, 0.45)';
    ctx.beginPath();
    ctx.moveTo(px, margin.top);
    ctx.lineTo(px, height - margin.bottom);
    ctx.stroke();
  }

  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 1.5;
    ctx.beginPath();
    let pen = false;
    for (let i = 0; i < s.x.length; i += 1) {
      const yv = s.y[i];
      if (yv === null || yv === undefined) {
        pen = false;
        continue;
      }
      const px = transform(s.x[i], xLo, xHi, margin.left, width - margin.right);
      const py = transform(mapY(yv), yLo, yHi, height - margin.bottom, margin.top);
      if (pen) ctx.lineTo(px, py);
      else ctx.moveTo(px, py);
      pen = true;
    }
    ctx.stroke();
  }
}

export function drawLegend(element: HTMLElement, series: Series[]): void {
  element.innerHTML = series
    .map((s) => `<span class="legend-item"><span class="swatch" style="background:${s.color}"></span>${s.label}</span>`)
    .join(' ');
}
