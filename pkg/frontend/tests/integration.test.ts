/**
 * End-to-end console flow against the live service: enter targets, watch the
 * stream, apply the proposal, observe the plant shift; infeasible requests
 * must surface the infeasible banner.
 */
import { beforeAll, describe, expect, it } from 'vitest';

import { ServiceClient } from '../src/api.js';
import { ConsoleViewModel } from '../src/model.js';

const BASE = `http://127.0.0.1:8731`;
const NOISE_SIGMA_W = 1.5;

describe('console against the live service', () => {
  let client: ServiceClient;

  beforeAll(() => {
    client = new ServiceClient(BASE);
  });

  it('state endpoint reports a loaded model and 8 sections', async () => {
    const state = await client.getState();
    expect(state.model_loaded).toBe(true);
    expect(state.machine_state.n_sections).toBe(8);
  });

  it(
    'plus-10g closed loop: stream, verdict, apply, observed shift within 3 sigma',
    async () => {
      const vm = new ConsoleViewModel(client);
      await vm.refreshState();
      await vm.advancePlant(30);

      vm.setTarget(2, 10, 0);
      const verdict = await vm.runInversion();
      expect(verdict?.verdict).toBe('converged');
      // at least one progress event plus exactly one verdict
      expect(vm.eventsReceived).toBeGreaterThanOrEqual(2);
      expect(vm.trace.steps.length).toBeGreaterThanOrEqual(1);
      expect(vm.phase).toBe('converged');
      expect(vm.applyEnabled).toBe(true);

      const diff = vm.proposalDiff();
      expect(diff.some((d) => Math.abs(d.dup) > 0.5)).toBe(true);

      const applied = await vm.applyProposal();
      expect(applied).toBe(true);
      const appliedCycleId = vm.measurements[vm.measurements.length - 1].cycleId;
      await vm.advancePlant(30);

      const shift = vm.sectionWeightShift(2, appliedCycleId);
      expect(shift).not.toBeNull();
      expect(Math.abs((shift as number) - 10)).toBeLessThanOrEqual(3 * NOISE_SIGMA_W);
    },
    180_000,
  );

  it(
    'absurd request (-500 g) surfaces the infeasible banner',
    async () => {
      const vm = new ConsoleViewModel(client, { weight_g: 500, length_mm: 50 });
      await vm.refreshState();
      vm.setTarget(1, -500, 0);
      const verdict = await vm.runInversion();
      expect(verdict?.verdict).toBe('infeasible');
      expect(vm.phase).toBe('infeasible');
      expect(vm.banner).toContain('infeasible');
      expect(vm.applyEnabled).toBe(false);
    },
    180_000,
  );

  it(
    'conflict path: plant advances between converge and apply',
    async () => {
      const vm = new ConsoleViewModel(client);
      await vm.refreshState();
      vm.setTarget(0, 5, 0);
      const verdict = await vm.runInversion();
      expect(verdict?.verdict).toBe('converged');
      await client.advance(1); // plant moves on before the operator applies
      const applied = await vm.applyProposal();
      expect(applied).toBe(false);
      expect(vm.conflict).toBe(true);
      expect(vm.applyEnabled).toBe(false);
    },
    180_000,
  );

  it('motion endpoint returns a continuous cam strip', async () => {
    const motion = await client.getMotion(30);
    expect(motion.sections).toHaveLength(8);
    for (let i = 0; i + 1 < motion.sections.length; i += 1) {
      const end = motion.sections[i].heights.at(-1) as number;
      const start = motion.sections[i + 1].heights[0];
      expect(Math.abs(end - start)).toBeLessThanOrEqual(1e-9);
    }
  });
});
