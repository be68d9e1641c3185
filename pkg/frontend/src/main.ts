/** DOM wiring for the operator console; all logic lives in the view model. */
import { ServiceClient } from './api.js';
import { drawChart, drawLegend, color, Series } from './charts.js';
import { ConsoleViewModel } from './model.js';

const client = new ServiceClient('');
const vm = new ConsoleViewModel(client);

const $ = (id: string) => document.getElementById(id)!;

function renderTargetsTable(): void {
  const table = $('targets') as HTMLTableElement;
  table.innerHTML =
    '<tr><th>section</th><th>dW [g]</th><th>dL [mm]</th></tr>' +
    vm.targets
      .map(
        (row, i) =>
          `<tr><td>${i}</td>` +
          `<td><input id="dw-${i}" type="number" step="0.5" value="${row[0]}"></td>` +
          `<td><input id="dl-${i}" type="number" step="0.5" value="${row[1]}"></td></tr>`,
      )
      .join('');
  vm.targets.forEach((_, i) => {
    $(`dw-${i}`).addEventListener('change', (e) =>
      vm.setTarget(i, Number((e.target as HTMLInputElement).value), vm.targets[i][1]),
    );
    $(`dl-${i}`).addEventListener('change', (e) =>
      vm.setTarget(i, vm.targets[i][0], Number((e.target as HTMLInputElement).value)),
    );
  });
}

function renderBanner(): void {
  const banner = $('banner');
  banner.textContent = vm.banner || 'ready';
  banner.className = `banner ${vm.phase}`;
  ($('apply') as HTMLButtonElement).disabled = !vm.applyEnabled;
  $('events-count').textContent = `${vm.eventsReceived} events`;
}

function renderTrace(): void {
  const lossSeries: Series[] = [
    { label: 'loss', x: vm.trace.steps, y: vm.trace.loss, color: color(0) },
  ];
  drawChart($('loss-chart') as HTMLCanvasElement, lossSeries, { logY: true, xLabel: 'step' });
  const weightSeries = vm.trace.predictions.map((p, i) => ({
    label: `s${i}`,
    x: vm.trace.steps,
    y: p.weight as (number | null)[],
    color: color(i),
  }));
  drawChart($('dw-chart') as HTMLCanvasElement, weightSeries, { xLabel: 'step', yLabel: 'dW [g]' });
  const lengthSeries = vm.trace.predictions.map((p, i) => ({
    label: `s${i}`,
    x: vm.trace.steps,
    y: p.length as (number | null)[],
    color: color(i),
  }));
  drawChart($('dl-chart') as HTMLCanvasElement, lengthSeries, { xLabel: 'step', yLabel: 'dL [mm]' });
  drawLegend($('trace-legend'), weightSeries);
}

function renderDiff(): void {
  const rows = vm.proposalDiff();
  $('diff').innerHTML = rows.length
    ? '<tr><th>section</th><th>dSP</th><th>dLP</th><th>dUP</th></tr>' +
      rows
        .map(
          (r) =>
            `<tr><td>${r.section}</td><td>${r.dsp.toFixed(2)}</td>` +
            `<td>${r.dlp.toFixed(2)}</td><td>${r.dup.toFixed(2)}</td></tr>`,
        )
        .join('')
    : '<tr><td>no proposal</td></tr>';
}

function renderMeasurements(): void {
  const series: Series[] = [];
  for (let s = 0; s < vm.nSections; s += 1) {
    series.push({
      label: `s${s}`,
      x: vm.measurements.map((m) => m.cycleId),
      y: vm.measurements.map((m) => m.weights[s]),
      color: color(s),
    });
  }
  drawChart($('weights-chart') as HTMLCanvasElement, series, {
    xLabel: 'cycle', yLabel: 'weight [g]',
  });
}

async function renderMotion(): Promise<void> {
  const motion = await client.getMotion(40);
  const series = motion.sections.map((sec, i) => ({
    label: `s${i}`,
    x: sec.times,
    y: sec.heights as (number | null)[],
    color: color(i),
  }));
  drawChart($('motion-chart') as HTMLCanvasElement, series, {
    xLabel: 't [s]', yLabel: 'height [mm]',
  });
}

function renderSweep(): void {
  if (!vm.sweep) return;
  const pts = vm.sweep.points;
  const markers = pts.filter((p) => p.verdict !== 'converged').map((p) => p.requested);
  const mk = (key: 'dsp' | 'dlp' | 'dup', i: number): Series => ({
    label: key,
    x: pts.map((p) => p.requested),
    y: pts.map((p) => p[key]),
    color: color(i),
  });
  drawChart($('sweep-chart') as HTMLCanvasElement, [mk('dsp', 0), mk('dlp', 1), mk('dup', 2)], {
    xLabel: vm.sweep.axis === 'weight' ? 'requested dW [g]' : 'requested dL [mm]',
    yLabel: 'correction [mm]',
    markers,
  });
  $('sweep-note').textContent = vm.notices.slice(-1)[0] ?? '';
}

async function refreshAll(): Promise<void> {
  await vm.refreshState();
  $('machine-state').textContent = JSON.stringify(vm.state?.machine_state, null, 1);
  renderTargetsTable();
  renderBanner();
  renderMeasurements();
  await renderMotion();
}

async function start(): Promise<void> {
  await refreshAll();

  $('run').addEventListener('click', async () => {
    renderBanner();
    const verdict = await vm.runInversion();
    renderBanner();
    renderTrace();
    renderDiff();
    if (!verdict) $('error').textContent = vm.lastError;
  });

  $('apply').addEventListener('click', async () => {
    await vm.applyProposal();
    renderBanner();
    renderDiff();
    renderMeasurements();
    await renderMotion();
  });

  $('advance').addEventListener('click', async () => {
    await vm.advancePlant(10);
    renderMeasurements();
  });

  $('run-sweep').addEventListener('click', async () => {
    const section = Number(($('sweep-section') as HTMLInputElement).value);
    const axis = ($('sweep-axis') as HTMLSelectElement).value as 'weight' | 'length';
    const lo = Number(($('sweep-lo') as HTMLInputElement).value);
    const hi = Number(($('sweep-hi') as HTMLInputElement).value);
    const points = Number(($('sweep-points') as HTMLInputElement).value);
    $('sweep-note').textContent = 'sweeping...';
    await vm.runSweep(section, axis, lo, hi, points);
    renderSweep();
  });

  // live step rendering while a run streams
  const origOnEvent = vm.onEvent.bind(vm);
  vm.onEvent = (event) => {
    origOnEvent(event);
    if (event.type === 'step' && vm.trace.steps.length % 4 === 0) {
      renderTrace();
      renderBanner();
    }
  };
}

start().catch((error) => {
  $('error').textContent = String(error);
});
