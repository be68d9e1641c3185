/**
 * Console view model: all operator-facing state and transitions, kept free
 * of DOM code so the logic is testable headlessly. The service is the only
 * source of truth; this layer never computes physics, it only arranges the
 * numbers the service returns.
 */
import {
  CycleDto,
  RunEvent,
  ServiceClient,
  ServiceError,
  StateDto,
  StepEvent,
  VerdictEvent,
} from './api.js';

export interface TargetBounds {
  weight_g: number;
  length_mm: number;
}

export const DEFAULT_BOUNDS: TargetBounds = { weight_g: 50, length_mm: 50 };

export type RunPhase = 'idle' | 'running' | 'converged' | 'infeasible' | 'failed';

export interface TraceSeries {
  steps: number[];
  loss: number[];
  /** predictions[section] -> {weight: [...], length: [...]} per received event */
  predictions: { weight: number[]; length: number[] }[];
  deadpoints: { sp: number[]; lp: number[]; up: number[] }[];
}

export interface SweepPointView {
  requested: number;
  verdict: string;
  dsp: number | null;
  dlp: number | null;
  dup: number | null;
}

export function validateTargets(
  targets: number[][],
  nSections: number,
  bounds: TargetBounds = DEFAULT_BOUNDS,
): string[] {
  const problems: string[] = [];
  if (targets.length !== nSections) {
    problems.push(`expected ${nSections} target rows, got ${targets.length}`);
    return problems;
  }
  targets.forEach((row, index) => {
    const [dw, dl] = row;
    if (!Number.isFinite(dw) || !Number.isFinite(dl)) {
      problems.push(`section ${index}: targets must be finite numbers`);
      return;
    }
    if (Math.abs(dw) > bounds.weight_g) {
      problems.push(`section ${index}: |dW| exceeds ${bounds.weight_g} g`);
    }
    if (Math.abs(dl) > bounds.length_mm) {
      problems.push(`section ${index}: |dL| exceeds ${bounds.length_mm} mm`);
    }
  });
  return problems;
}

export function emptyTrace(nSections: number): TraceSeries {
  return {
    steps: [],
    loss: [],
    predictions: Array.from({ length: nSections }, () => ({ weight: [], length: [] })),
    deadpoints: Array.from({ length: nSections }, () => ({ sp: [], lp: [], up: [] })),
  };
}

export interface MeasurementPoint {
  cycleId: number;
  weights: (number | null)[];
  lengths: (number | null)[];
}

export class ConsoleViewModel {
  state: StateDto | null = null;
  phase: RunPhase = 'idle';
  banner = '';
  runId: number | null = null;
  trace: TraceSeries = emptyTrace(0);
  eventsReceived = 0;
  verdict: VerdictEvent | null = null;
  proposedCycle: CycleDto | null = null;
  proposalBaseCycleId: number | null = null;
  conflict = false;
  measurements: MeasurementPoint[] = [];
  targets: number[][] = [];
  lastError = '';
  notices: string[] = [];
  sweep: { axis: 'weight' | 'length'; section: number; points: SweepPointView[] } | null = null;

  constructor(
    private readonly client: ServiceClient,
    readonly bounds: TargetBounds = DEFAULT_BOUNDS,
  ) {}

  get nSections(): number {
    return this.state?.machine_state.n_sections ?? 0;
  }

  get applyEnabled(): boolean {
    return this.phase === 'converged' && this.proposedCycle !== null && !this.conflict;
  }

  async refreshState(): Promise<void> {
    this.state = await this.client.getState();
    if (this.targets.length !== this.nSections) {
      this.targets = Array.from({ length: this.nSections }, () => [0, 0]);
    }
    for (const cycle of this.state.recent_measurements) {
      this.recordMeasurements(cycle.cycle_id, cycle.sections);
    }
  }

  private recordMeasurements(
    cycleId: number,
    sections: { section: number; weight_g: number | null; length_mm: number | null }[],
  ): void {
    if (this.measurements.some((m) => m.cycleId === cycleId)) return;
    const weights: (number | null)[] = Array(this.nSections).fill(null);
    const lengths: (number | null)[] = Array(this.nSections).fill(null);
    for (const m of sections) {
      weights[m.section] = m.weight_g;
      lengths[m.section] = m.length_mm;
    }
    this.measurements.push({ cycleId, weights, lengths });
    this.measurements.sort((a, b) => a.cycleId - b.cycleId);
    if (this.measurements.length > 512) {
      this.measurements.splice(0, this.measurements.length - 512);
    }
  }

  setTarget(section: number, dw: number, dl: number): void {
    this.targets[section] = [dw, dl];
  }

  /** POST the targets and follow the event stream to its verdict. */
  async runInversion(params: Record<string, unknown> = {}): Promise<VerdictEvent | null> {
    if (this.state === null) await this.refreshState();
    const problems = validateTargets(this.targets, this.nSections, this.bounds);
    if (problems.length > 0) {
      this.lastError = problems.join('; ');
      return null;
    }
    this.phase = 'running';
    this.banner = 'optimizing deadpoint corrections...';
    this.trace = emptyTrace(this.nSections);
    this.eventsReceived = 0;
    this.verdict = null;
    this.proposedCycle = null;
    this.conflict = false;
    try {
      this.runId = await this.client.startInversion(this.targets, params);
      const verdict = await this.client.streamEvents(this.runId, (event) =>
        this.onEvent(event),
      );
      return verdict;
    } catch (error) {
      this.phase = 'failed';
      this.banner = error instanceof ServiceError ? error.message : String(error);
      this.lastError = this.banner;
      return null;
    }
  }

  onEvent(event: RunEvent): void {
    this.eventsReceived += 1;
    if (event.type === 'step') {
      this.appendStep(event);
      return;
    }
    this.verdict = event;
    if (event.verdict === 'converged' && event.cycle) {
      this.phase = 'converged';
      this.banner = `converged in ${event.steps} steps`;
      this.proposedCycle = event.cycle;
      this.proposalBaseCycleId = event.base_cycle_id ?? null;
    } else if (event.verdict === 'infeasible') {
      this.phase = 'infeasible';
      this.banner =
        'infeasible: no deadpoint configuration reaches the requested ' +
        'transformation (physically unfeasible request)';
    } else {
      this.phase = 'failed';
      this.banner = event.error ?? `stopped: ${event.verdict}`;
    }
  }

  private appendStep(event: StepEvent): void {
    this.trace.steps.push(event.step);
    this.trace.loss.push(event.loss);
    event.predictions.forEach((pair, section) => {
      this.trace.predictions[section]?.weight.push(pair[0]);
      this.trace.predictions[section]?.length.push(pair[1]);
    });
    event.deadpoints.forEach((triple, section) => {
      const series = this.trace.deadpoints[section];
      if (series) {
        series.sp.push(triple[0]);
        series.lp.push(triple[1]);
        series.up.push(triple[2]);
      }
    });
  }

  /** Per-section diff between the proposal and the live cycle. */
  proposalDiff(): { section: number; dsp: number; dlp: number; dup: number }[] {
    if (!this.proposedCycle || !this.state) return [];
    return this.proposedCycle.sections.map((cam, section) => {
      const current = this.state!.cycle.sections[section];
      return {
        section,
        dsp: cam.sp - current.sp,
        dlp: cam.lp - current.lp,
        dup: cam.up - current.up,
      };
    });
  }

  /** Apply the proposal; on a stale-plant conflict, flag it for re-run. */
  async applyProposal(): Promise<boolean> {
    if (!this.applyEnabled || !this.proposedCycle) return false;
    try {
      const applied = await this.client.applyCycle(
        this.proposedCycle,
        this.proposalBaseCycleId ?? undefined,
      );
      this.recordMeasurements(applied.cycle_id, applied.measurements);
      this.banner = `applied as cycle ${applied.cycle_id}`;
      this.phase = 'idle';
      this.proposedCycle = null;
      await this.refreshState();
      return true;
    } catch (error) {
      if (error instanceof ServiceError && error.status === 409) {
        this.conflict = true;
        this.banner = 'plant changed since the proposal was computed; re-run the inversion';
        return false;
      }
      this.lastError = String(error);
      return false;
    }
  }

  async advancePlant(cycles: number): Promise<void> {
    const result = await this.client.advance(cycles);
    for (const entry of result.cycles) {
      this.recordMeasurements(entry.cycle_id, entry.measurements);
    }
    await this.refreshState();
  }

  /**
   * What-if sweep on one section: a series of single-target inversions with
   * progressively larger requests; infeasible points truncate the curve.
   */
  async runSweep(
    section: number,
    axis: 'weight' | 'length',
    lo: number,
    hi: number,
    nPoints: number,
  ): Promise<void> {
    if (this.state === null) await this.refreshState();
    const bound = axis === 'weight' ? this.bounds.weight_g : this.bounds.length_mm;
    const clampedLo = Math.max(lo, -bound);
    const clampedHi = Math.min(hi, bound);
    if (clampedLo !== lo || clampedHi !== hi) {
      this.notices.push(`sweep range clamped to [${clampedLo}, ${clampedHi}]`);
    }
    const points: SweepPointView[] = [];
    const baseCycle = this.state!.cycle;
    for (let index = 0; index < nPoints; index += 1) {
      const requested =
        nPoints === 1 ? clampedLo : clampedLo + ((clampedHi - clampedLo) * index) / (nPoints - 1);
      const targets = Array.from({ length: this.nSections }, () => [0, 0] as number[]);
      targets[section] = axis === 'weight' ? [requested, 0] : [0, requested];
      const runId = await this.client.startInversion(targets, {}, 50);
      const verdict = await this.client.streamEvents(runId, () => undefined);
      if (verdict.verdict === 'converged' && verdict.cycle) {
        const cam = verdict.cycle.sections[section];
        const base = baseCycle.sections[section];
        points.push({
          requested,
          verdict: verdict.verdict,
          dsp: cam.sp - base.sp,
          dlp: cam.lp - base.lp,
          dup: cam.up - base.up,
        });
      } else {
        points.push({ requested, verdict: verdict.verdict, dsp: null, dlp: null, dup: null });
      }
    }
    this.sweep = { axis, section, points };
  }

  /** Mean observed weight shift of one section over recent cycles. */
  sectionWeightShift(section: number, beforeCycleId: number, window = 20): number | null {
    const before = this.measurements
      .filter((m) => m.cycleId < beforeCycleId)
      .slice(-window)
      .map((m) => m.weights[section])
      .filter((w): w is number => w !== null);
    const after = this.measurements
      .filter((m) => m.cycleId >= beforeCycleId)
      .slice(0, window)
      .map((m) => m.weights[section])
      .filter((w): w is number => w !== null);
    if (before.length === 0 || after.length === 0) return null;
    const mean = (xs: number[]) => xs.reduce((a, b) => a + b, 0) / xs.length;
    return mean(after) - mean(before);
  }
}
