"""Deadpoint inversion: search cam corrections that realize gob targets.

Given the machine state, the current cycle and per-section (dW, dL) targets,
both optimizers work in the cycle's 2N-dimensional free-parameter space
(junction heights + upper deadpoints), so the junction constraints hold
exactly at every iterate instead of being penalized. Gradients flow from the
forward model's input gradients through the free-parameter mapping: a
junction collects the lower-deadpoint gradient of its own section plus the
starting-point gradient of the following one.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .cam import Cycle, MachineState, from_free_parameters, to_free_parameters
from .forward import TrainedModel


@dataclass
class InversionParams:
    learning_rate: float = 0.5  # initial gradient step, halved on backtracking
    max_steps: int = 2000
    tol_weight_g: float = 1.0
    tol_length_mm: float = 1.0
    optimizer: str = "gradient"  # "gradient" | "montecarlo"
    upper_preference_weight: float = 0.01  # penalty on junction movement
    step_size_weight: float = 0.0  # penalty on total movement from the start
    mc_proposal_scale_mm: float = 0.5
    momentum: float = 0.0
    seed: int = 0
    # Keep optimizing past the tolerance box until progress stalls; the
    # endpoint is then a stationary point rather than the first acceptable
    # iterate (used by the landscape experiments to land on minima).
    polish: bool = False
    # Residuals are divided by these scales before squaring so grams and
    # millimetres are commensurable (the raw sum of MSEs would mix units).
    weight_scale_g: float = 10.0
    length_scale_mm: float = 10.0
    barrier_weight: float = 1e3
    stall_steps: int = 200
    stall_improvement: float = 1e-6

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.max_steps < 1:
            raise ValueError("learning_rate must be > 0 and max_steps >= 1")
        if self.tol_weight_g <= 0 or self.tol_length_mm <= 0:
            raise ValueError("tolerances must be > 0")
        if self.optimizer not in ("gradient", "montecarlo"):
            raise ValueError(f"unknown optimizer: {self.optimizer}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "learning_rate", "max_steps", "tol_weight_g", "tol_length_mm",
            "optimizer", "upper_preference_weight", "step_size_weight",
            "mc_proposal_scale_mm", "momentum", "seed", "polish",
            "weight_scale_g", "length_scale_mm", "barrier_weight",
            "stall_steps", "stall_improvement",
        )}

    @staticmethod
    def from_dict(d: dict) -> "InversionParams":
        params = InversionParams(**d)
        params.validate()
        return params


@dataclass
class InversionRequest:
    machine_state: MachineState
    initial_cycle: Cycle
    targets: np.ndarray  # (N, 2): requested (dW g, dL mm) per section
    params: InversionParams = field(default_factory=InversionParams)

    def validate(self) -> None:
        self.params.validate()
        self.targets = np.asarray(self.targets, dtype=float)
        n = self.initial_cycle.n_sections
        if self.targets.shape != (n, 2):
            raise ValueError(f"targets must be shaped ({n}, 2)")
        if not np.all(np.isfinite(self.targets)):
            raise ValueError("targets must be finite")

    def to_dict(self) -> dict:
        return {
            "machine_state": self.machine_state.to_dict(),
            "initial_cycle": self.initial_cycle.to_dict(),
            "targets": np.asarray(self.targets, dtype=float).tolist(),
            "params": self.params.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "InversionRequest":
        req = InversionRequest(
            machine_state=MachineState.from_dict(d["machine_state"]),
            initial_cycle=Cycle.from_dict(d["initial_cycle"]),
            targets=np.array(d["targets"], dtype=float),
            params=InversionParams.from_dict(d["params"]),
        )
        req.validate()
        return req


@dataclass
class TraceStep:
    step: int
    loss: float
    free_deltas: np.ndarray  # (2N,)
    predictions: np.ndarray  # (N, 2)


@dataclass
class InversionTrace:
    steps: list[TraceStep]
    verdict: str  # "converged" | "max_steps" | "infeasible"
    wall_time_s: float
    metadata: dict = field(default_factory=dict)

    def losses(self) -> np.ndarray:
        return np.array([s.loss for s in self.steps])

    def to_dict(self) -> dict:
        return {
            "verdict": self.verdict,
            "wall_time_s": self.wall_time_s,
            "metadata": self.metadata,
            "steps": [
                {
                    "step": s.step,
                    "loss": s.loss,
                    "free_deltas": s.free_deltas.tolist(),
                    "predictions": s.predictions.tolist(),
                }
                for s in self.steps
            ],
        }


@dataclass
class InversionResult:
    cycle: Cycle
    trace: InversionTrace
    free_deltas: np.ndarray
    predictions: np.ndarray
    residuals: np.ndarray  # predictions - targets, (N, 2)

    @property
    def converged(self) -> bool:
        return self.trace.verdict == "converged"


def section_deltas_from_free(free_deltas: np.ndarray, n: int) -> np.ndarray:
    """(2N,) free-parameter deltas -> (N, 3) per-section (dSP, dLP, dUP)."""
    junctions, uppers = free_deltas[:n], free_deltas[n:]
    return np.stack([np.roll(junctions, 1), junctions, uppers], axis=1)


def free_gradient_from_sections(section_grads: np.ndarray, n: int) -> np.ndarray:
    """Adjoint of :func:`section_deltas_from_free`.

    Junction k aggregates section k's lower-deadpoint gradient and section
    (k+1)'s starting-point gradient; uppers map one to one.
    """
    g_sp, g_lp, g_up = section_grads[:, 0], section_grads[:, 1], section_grads[:, 2]
    return np.concatenate([g_lp + np.roll(g_sp, -1), g_up])


class Objective:
    """Loss over free-parameter deltas for one inversion request."""

    def __init__(self, request: InversionRequest, model: TrainedModel):
        request.validate()
        self.request = request
        self.model = model
        self.n = request.initial_cycle.n_sections
        self.base_params = to_free_parameters(request.initial_cycle)
        self.globals = request.machine_state.global_features()
        self.scales = np.array(
            [request.params.weight_scale_g, request.params.length_scale_mm]
        )

    def features(self, free_deltas: np.ndarray) -> np.ndarray:
        deltas = section_deltas_from_free(free_deltas, self.n)
        return np.hstack([np.tile(self.globals, (self.n, 1)), deltas])

    def penalties_batch(self, free_deltas: np.ndarray) -> np.ndarray:
        """Penalty terms for a batch of free-delta rows (n_rows, 2N).

        Movement penalties act on normalized displacements (mm divided by
        the length scale) so their weights are commensurate with the
        normalized data terms; the non-negativity barrier stays in mm.
        """
        p = self.request.params
        s2 = p.length_scale_mm**2
        junctions = free_deltas[:, : self.n]
        value = p.upper_preference_weight * (junctions**2).sum(axis=1) / s2
        value = value + p.step_size_weight * (free_deltas**2).sum(axis=1) / s2
        negative = np.minimum(self.base_params + free_deltas, 0.0)
        return value + p.barrier_weight * (negative**2).sum(axis=1)

    def penalties(self, free_deltas: np.ndarray) -> float:
        return float(self.penalties_batch(free_deltas[None, :])[0])

    def penalty_gradient(self, free_deltas: np.ndarray) -> np.ndarray:
        p = self.request.params
        s2 = p.length_scale_mm**2
        grad = 2.0 * p.step_size_weight * free_deltas / s2
        grad[: self.n] += 2.0 * p.upper_preference_weight * free_deltas[: self.n] / s2
        negative = np.minimum(self.base_params + free_deltas, 0.0)
        grad += 2.0 * p.barrier_weight * negative
        return grad

    def __call__(self, free_deltas: np.ndarray) -> tuple[float, np.ndarray]:
        """Returns (loss, per-section predictions in physical units)."""
        preds = self.model.predict(self.features(free_deltas))
        residual = (preds - self.request.targets) / self.scales
        loss = float((residual**2).sum()) + self.penalties(free_deltas)
        return loss, preds

    def with_gradient(self, free_deltas: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
        preds, section_grads = self.model.input_gradient(
            self.features(free_deltas), self.request.targets, self.scales
        )
        residual = (preds - self.request.targets) / self.scales
        loss = float((residual**2).sum()) + self.penalties(free_deltas)
        grad = free_gradient_from_sections(section_grads, self.n) + self.penalty_gradient(
            free_deltas
        )
        return loss, preds, grad

    def within_tolerance(self, preds: np.ndarray) -> bool:
        p = self.request.params
        residual = np.abs(preds - self.request.targets)
        return bool(
            np.all(residual[:, 0] <= p.tol_weight_g)
            and np.all(residual[:, 1] <= p.tol_length_mm)
        )

    def clamp_excess(self, free_deltas: np.ndarray) -> float:
        """How far the solution sits below the non-negativity bound."""
        return float(np.maximum(-(self.base_params + free_deltas), 0.0).max(initial=0.0))


CLAMP_TOL_MM = 1e-6


def _finish(
    objective: Objective,
    free_deltas: np.ndarray,
    steps: list[TraceStep],
    verdict: str,
    t0: float,
    metadata: dict,
) -> InversionResult:
    # A solution leaning on the non-negativity barrier by more than the
    # clamp tolerance means the request needs negative deadpoints.
    excess = objective.clamp_excess(free_deltas)
    clamped = np.maximum(objective.base_params + free_deltas, 0.0)
    if excess > CLAMP_TOL_MM:
        verdict = "infeasible"
        metadata["clamp_excess_mm"] = excess
    cycle = from_free_parameters(clamped, objective.request.machine_state)
    _, preds = objective(clamped - objective.base_params)
    trace = InversionTrace(
        steps=steps,
        verdict=verdict,
        wall_time_s=time.perf_counter() - t0,
        metadata=metadata,
    )
    return InversionResult(
        cycle=cycle,
        trace=trace,
        free_deltas=clamped - objective.base_params,
        predictions=preds,
        residuals=preds - objective.request.targets,
    )


def invert_gradient(
    request: InversionRequest,
    model: TrainedModel,
    callback: Callable[[TraceStep], None] | None = None,
    free_mask: np.ndarray | None = None,
) -> InversionResult:
    """Backtracking gradient descent on the free parameters, from zero deltas.

    The step size is halved whenever a step would increase the loss, so the
    recorded loss sequence is non-increasing; persistent failure to improve
    triggers the stall criterion and an infeasible verdict. ``free_mask``
    restricts the search to a subset of free parameters (slice studies).
    """
    objective = Objective(request, model)
    params = request.params
    t0 = time.perf_counter()
    u = np.zeros(2 * objective.n)
    mask = np.ones(2 * objective.n) if free_mask is None else np.asarray(free_mask, dtype=float)
    metadata = {
        "optimizer": "gradient",
        "loss_normalization": {
            "weight_scale_g": params.weight_scale_g,
            "length_scale_mm": params.length_scale_mm,
            "note": "residuals divided by scales before squaring (units mixed otherwise)",
        },
    }
    theta = params.learning_rate
    theta_max_accepted = 0.0
    velocity = np.zeros_like(u)
    loss, preds, grad = objective.with_gradient(u)
    steps = [TraceStep(0, loss, u.copy(), preds.copy())]
    if callback:
        callback(steps[0])
    if objective.within_tolerance(preds):
        return _finish(objective, u, steps, "converged", t0, metadata)

    best_loss = loss
    last_improvement_step = 0
    for step in range(1, params.max_steps + 1):
        direction = (grad + params.momentum * velocity) * mask
        accepted = False
        for _ in range(40):
            candidate = u - theta * direction
            cand_loss, cand_preds = objective(candidate)
            if cand_loss <= loss:
                accepted = True
                break
            theta *= 0.5
        if accepted:
            velocity = direction
            u = candidate
            loss, preds = cand_loss, cand_preds
            theta_max_accepted = max(theta_max_accepted, theta)
            theta = min(theta * 1.25, params.learning_rate)
            _, _, grad = objective.with_gradient(u)
        else:
            velocity = np.zeros_like(u)
        record = TraceStep(step, loss, u.copy(), preds.copy())
        steps.append(record)
        if callback:
            callback(record)
        acceptable = objective.within_tolerance(preds) and objective.clamp_excess(u) <= CLAMP_TOL_MM
        if acceptable and not params.polish:
            metadata["theta_max_accepted"] = theta_max_accepted
            return _finish(objective, u, steps, "converged", t0, metadata)
        if best_loss - loss > params.stall_improvement:
            best_loss = loss
            last_improvement_step = step
        elif step - last_improvement_step >= params.stall_steps:
            metadata["theta_max_accepted"] = theta_max_accepted
            metadata["stalled_at_step"] = step
            verdict = "converged" if acceptable else "infeasible"
            return _finish(objective, u, steps, verdict, t0, metadata)
    metadata["theta_max_accepted"] = theta_max_accepted
    acceptable = objective.within_tolerance(preds) and objective.clamp_excess(u) <= CLAMP_TOL_MM
    verdict = "converged" if params.polish and acceptable else "max_steps"
    return _finish(objective, u, steps, verdict, t0, metadata)


def invert_montecarlo(
    request: InversionRequest,
    model: TrainedModel,
    callback: Callable[[TraceStep], None] | None = None,
    free_mask: np.ndarray | None = None,
) -> InversionResult:
    """Seeded random-perturbation search: keep only loss-decreasing moves."""
    objective = Objective(request, model)
    params = request.params
    t0 = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0x3C0]))
    u = np.zeros(2 * objective.n)
    mask = np.ones(2 * objective.n) if free_mask is None else np.asarray(free_mask, dtype=float)
    metadata = {
        "optimizer": "montecarlo",
        "proposal_scale_mm": params.mc_proposal_scale_mm,
        "loss_normalization": {
            "weight_scale_g": params.weight_scale_g,
            "length_scale_mm": params.length_scale_mm,
            "note": "residuals divided by scales before squaring (units mixed otherwise)",
        },
    }
    loss, preds = objective(u)
    steps = [TraceStep(0, loss, u.copy(), preds.copy())]
    if callback:
        callback(steps[0])
    if objective.within_tolerance(preds):
        metadata["accepted_moves"] = 0
        return _finish(objective, u, steps, "converged", t0, metadata)

    accepted_moves = 0
    best_loss = loss
    last_improvement_step = 0
    scale = params.mc_proposal_scale_mm
    rejection_streak = 0
    for step in range(1, params.max_steps + 1):
        proposal = u + rng.normal(0.0, scale, u.shape) * mask
        cand_loss, cand_preds = objective(proposal)
        if cand_loss < loss:
            u, loss, preds = proposal, cand_loss, cand_preds
            accepted_moves += 1
            rejection_streak = 0
        else:
            # Shrink proposals when nothing lands: near a valley floor,
            # isotropic moves at a fixed scale are almost always uphill.
            rejection_streak += 1
            if rejection_streak >= 25:
                scale = max(scale * 0.7, params.mc_proposal_scale_mm / 200.0)
                rejection_streak = 0
        record = TraceStep(step, loss, u.copy(), preds.copy())
        steps.append(record)
        if callback:
            callback(record)
        acceptable = objective.within_tolerance(preds) and objective.clamp_excess(u) <= CLAMP_TOL_MM
        if acceptable and not params.polish:
            metadata["accepted_moves"] = accepted_moves
            metadata["final_proposal_scale_mm"] = scale
            return _finish(objective, u, steps, "converged", t0, metadata)
        if best_loss - loss > params.stall_improvement:
            best_loss = loss
            last_improvement_step = step
        elif step - last_improvement_step >= params.stall_steps:
            metadata["accepted_moves"] = accepted_moves
            metadata["final_proposal_scale_mm"] = scale
            metadata["stalled_at_step"] = step
            verdict = "converged" if acceptable else "infeasible"
            return _finish(objective, u, steps, verdict, t0, metadata)
    metadata["accepted_moves"] = accepted_moves
    metadata["final_proposal_scale_mm"] = scale
    acceptable = objective.within_tolerance(preds) and objective.clamp_excess(u) <= CLAMP_TOL_MM
    verdict = "converged" if params.polish and acceptable else "max_steps"
    return _finish(objective, u, steps, verdict, t0, metadata)


def invert(
    request: InversionRequest,
    model: TrainedModel,
    callback: Callable[[TraceStep], None] | None = None,
    free_mask: np.ndarray | None = None,
) -> InversionResult:
    if request.params.optimizer == "montecarlo":
        return invert_montecarlo(request, model, callback, free_mask)
    return invert_gradient(request, model, callback, free_mask)
