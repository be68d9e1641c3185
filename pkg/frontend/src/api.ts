/**
 * Typed client for the feeder control service (HTTP/JSON + NDJSON streams).
 * All numbers shown in the console come straight from these payloads; the
 * client never recomputes any physics.
 */

export interface MachineStateDto {
  temperature_c: number;
  master_speed: number;
  tube_rotation: number;
  phase_deg: number;
  tube_height_mm: number;
  firing_order: number[];
  n_sections: number;
}

export interface CamDto {
  sp: number;
  lp: number;
  up: number;
}

export interface CycleDto {
  machine_state: MachineStateDto;
  sections: CamDto[];
}

export interface MeasurementDto {
  section: number;
  weight_g: number | null;
  length_mm: number | null;
  cycle_id: number;
  timestamp: number;
  dirty: boolean;
}

export interface StateDto {
  version: number;
  machine_state: MachineStateDto;
  cycle: CycleDto;
  cycle_id: number;
  timestamp: number;
  working_point: { weight_g: number; length_mm: number };
  model_loaded: boolean;
  recent_measurements: HistoryCycleDto[];
}

export interface HistoryCycleDto {
  cycle_id: number;
  timestamp: number;
  sections: MeasurementDto[];
}

export interface StepEvent {
  version: number;
  type: 'step';
  run_id: number;
  step: number;
  loss: number;
  predictions: number[][];
  deadpoints: number[][];
}

export interface VerdictEvent {
  version: number;
  type: 'verdict';
  run_id: number;
  verdict: 'converged' | 'max_steps' | 'infeasible' | 'error';
  steps?: number;
  wall_time_s?: number;
  cycle?: CycleDto;
  free_deltas?: number[];
  predictions?: number[][];
  residuals?: number[][];
  base_cycle_id?: number;
  error?: string;
}

export type RunEvent = StepEvent | VerdictEvent;

export interface MotionDto {
  version: number;
  sections: { times: number[]; heights: number[] }[];
}

export class ServiceError extends Error {
  constructor(
    public status: number,
    public detail: unknown,
  ) {
    super(`service error ${status}: ${JSON.stringify(detail)}`);
  }
}

/** Incremental NDJSON parser; tolerates partial lines across chunks. */
export function ndjsonSplitter(onEvent: (event: RunEvent) => void): (chunk: string) => void {
  let buffer = '';
  return (chunk: string) => {
    buffer += chunk;
    for (;;) {
      const index = buffer.indexOf('\n');
      if (index < 0) break;
      const line = buffer.slice(0, index).trim();
      buffer = buffer.slice(index + 1);
      if (line.length > 0) {
        onEvent(JSON.parse(line) as RunEvent);
      }
    }
  };
}

async function expectOk(response: Response): Promise<any> {
  const body = await response.json().catch(() => null);
  if (!response.ok) {
    throw new ServiceError(response.status, body?.detail ?? body);
  }
  return body;
}

export class ServiceClient {
  constructor(
    private readonly base: string,
    private readonly fetchImpl: typeof fetch = fetch,
  ) {}

  getState(): Promise<StateDto> {
    return this.fetchImpl(`${this.base}/state`).then(expectOk);
  }

  getHistory(): Promise<{ cycles: HistoryCycleDto[] }> {
    return this.fetchImpl(`${this.base}/history`).then(expectOk);
  }

  getMotion(samples = 40): Promise<MotionDto> {
    return this.fetchImpl(`${this.base}/cycle/motion?samples=${samples}`).then(expectOk);
  }

  async startInversion(
    targets: number[][],
    params: Record<string, unknown> = {},
    emitEvery = 5,
  ): Promise<number> {
    const body = await this.fetchImpl(`${this.base}/inversion`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ targets, params, emit_every: emitEvery }),
    }).then(expectOk);
    return body.run_id as number;
  }

  /**
   * Stream run events, invoking the callback in arrival order. Resolves on
   * the verdict event; a dropped connection resumes from the last seen step.
   */
  async streamEvents(
    runId: number,
    onEvent: (event: RunEvent) => void,
    maxReconnects = 3,
  ): Promise<VerdictEvent> {
    let lastStep = 0;
    let attempts = 0;
    for (;;) {
      try {
        const verdict = await this.streamOnce(runId, lastStep, (event) => {
          if (event.type === 'step') {
            lastStep = Math.max(lastStep, event.step);
          }
          onEvent(event);
        });
        if (verdict) return verdict;
        throw new Error('event stream ended without a verdict');
      } catch (error) {
        attempts += 1;
        if (attempts > maxReconnects) throw error;
      }
    }
  }

  private async streamOnce(
    runId: number,
    fromStep: number,
    onEvent: (event: RunEvent) => void,
  ): Promise<VerdictEvent | null> {
    const response = await this.fetchImpl(
      `${this.base}/inversion/${runId}/events?from_step=${fromStep}`,
    );
    if (!response.ok || response.body === null) {
      throw new ServiceError(response.status, 'stream unavailable');
    }
    let verdict: VerdictEvent | null = null;
    const feed = ndjsonSplitter((event) => {
      if (event.type === 'verdict') verdict = event;
      onEvent(event);
    });
    const reader = response.body.getReader();
    const decoder = new TextDecoder();
    for (;;) {
      const { value, done } = await reader.read();
      if (value) feed(decoder.decode(value, { stream: true }));
      if (done) break;
    }
    feed('\n');
    return verdict;
  }

  applyCycle(cycle: CycleDto, expectedCycleId?: number): Promise<any> {
    return this.fetchImpl(`${this.base}/apply`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ cycle, expected_cycle_id: expectedCycleId ?? null }),
    }).then(expectOk);
  }

  advance(cycles: number): Promise<{ cycles: { cycle_id: number; measurements: MeasurementDto[] }[] }> {
    return this.fetchImpl(`${this.base}/plant/advance`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify({ cycles }),
    }).then(expectOk);
  }
}
