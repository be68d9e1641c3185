"""Closed-loop control service: simulated plant + inversion over HTTP/JSON.

One process owns one plant session. Plant mutations (apply/advance) are
serialized through a lock; inversion runs execute on worker threads and
publish their progress as an ordered newline-delimited JSON event stream
that always terminates with exactly one verdict event.
"""
from __future__ import annotations

import itertools
import json
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, HTTPException
from fastapi.responses import HTMLResponse, StreamingResponse
from pydantic import BaseModel

from .cam import Cycle, cycle_motion, validate_cycle
from .config import AppConfig
from .forward import TrainedModel
from .inversion import (
    InversionParams,
    InversionRequest,
    TraceStep,
    invert,
    section_deltas_from_free,
)
from .plant import GobMeasurement, SimulatedPlant

API_VERSION = 1


class InversionBody(BaseModel):
    targets: list[list[float]]
    params: dict = {}
    emit_every: int = 5


class ApplyBody(BaseModel):
    cycle: dict
    expected_cycle_id: int | None = None


class AdvanceBody(BaseModel):
    cycles: int = 1


@dataclass
class RunState:
    run_id: int
    events: list[dict] = field(default_factory=list)
    done: bool = False
    condition: threading.Condition = field(default_factory=threading.Condition)

    def publish(self, event: dict) -> None:
        with self.condition:
            self.events.append(event)
            if event["type"] == "verdict":
                self.done = True
            self.condition.notify_all()


def _measurement_dict(m: GobMeasurement) -> dict:
    return {
        "section": m.section_index,
        "weight_g": None if np.isnan(m.weight) else m.weight,
        "length_mm": None if np.isnan(m.length) else m.length,
        "cycle_id": m.cycle_id,
        "timestamp": m.timestamp,
        "dirty": m.dirty,
    }


class Session:
    """Mutable service state: one plant, one model, active inversion runs."""

    def __init__(self, model: TrainedModel | None, config: AppConfig):
        self.model = model
        self.config = config
        self.plant = SimulatedPlant(config.plant)
        self.plant_lock = threading.Lock()
        self.runs: dict[int, RunState] = {}
        self.runs_lock = threading.Lock()
        self._run_ids = itertools.count(1)
        self.measurements: deque = deque(maxlen=512)
        # Seed the history with one cycle so /state has something to show.
        with self.plant_lock:
            self._record(self.plant.advance(1)[0])

    def _record(self, measurements: list[GobMeasurement]) -> None:
        self.measurements.append(
            {
                "cycle_id": measurements[0].cycle_id,
                "timestamp": measurements[0].timestamp,
                "sections": [_measurement_dict(m) for m in measurements],
            }
        )

    def start_inversion(self, body: InversionBody) -> int:
        if self.model is None:
            raise HTTPException(status_code=409, detail="no forward model loaded")
        n = self.plant.config.n_sections
        targets = np.asarray(body.targets, dtype=float)
        if targets.shape != (n, 2) or not np.all(np.isfinite(targets)):
            raise HTTPException(
                status_code=400,
                detail=f"targets must be a finite {n}x2 array of (dW, dL)",
            )
        try:
            params = InversionParams.from_dict(
                {**self.config.inversion.to_dict(), **body.params}
            )
        except (TypeError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"bad params: {exc}")
        with self.plant_lock:
            cycle = self.plant.cycle
        request = InversionRequest(
            machine_state=cycle.machine_state,
            initial_cycle=cycle,
            targets=targets,
            params=params,
        )
        run_id = next(self._run_ids)
        run = RunState(run_id)
        with self.runs_lock:
            self.runs[run_id] = run
        emit_every = max(1, body.emit_every)
        base_cycle = cycle

        def step_event(step: TraceStep) -> None:
            if step.step % emit_every != 0 and step.step != 0:
                return
            deltas = section_deltas_from_free(step.free_deltas, n)
            deadpoints = base_cycle.deadpoint_matrix() + deltas
            run.publish(
                {
                    "version": API_VERSION,
                    "type": "step",
                    "run_id": run_id,
                    "step": step.step,
                    "loss": step.loss,
                    "predictions": step.predictions.tolist(),
                    "deadpoints": deadpoints.tolist(),
                }
            )

        def work() -> None:
            try:
                result = invert(request, self.model, callback=step_event)
                run.publish(
                    {
                        "version": API_VERSION,
                        "type": "verdict",
                        "run_id": run_id,
                        "verdict": result.trace.verdict,
                        "steps": len(result.trace.steps) - 1,
                        "wall_time_s": result.trace.wall_time_s,
                        "cycle": result.cycle.to_dict(),
                        "free_deltas": result.free_deltas.tolist(),
                        "predictions": result.predictions.tolist(),
                        "residuals": result.residuals.tolist(),
                        "base_cycle_id": self.plant.cycle_id,
                    }
                )
            except Exception as exc:  # defensive: stream must terminate
                run.publish(
                    {
                        "version": API_VERSION,
                        "type": "verdict",
                        "run_id": run_id,
                        "verdict": "error",
                        "error": str(exc),
                    }
                )

        threading.Thread(target=work, daemon=True).start()
        return run_id

    def stream(self, run_id: int, from_step: int = 0):
        with self.runs_lock:
            run = self.runs.get(run_id)
        if run is None:
            raise HTTPException(status_code=404, detail=f"unknown run id {run_id}")

        def generate():
            index = 0
            while True:
                with run.condition:
                    while index >= len(run.events) and not run.done:
                        run.condition.wait(timeout=0.5)
                    events = run.events[index:]
                    index = len(run.events)
                    finished = run.done and index >= len(run.events)
                for event in events:
                    if event["type"] == "verdict" or event.get("step", 0) >= from_step:
                        yield json.dumps(event) + "\n"
                if finished:
                    return

        return generate()


def create_app(model: TrainedModel | None, config: AppConfig | None = None) -> FastAPI:
    config = config or AppConfig()
    session = Session(model, config)
    app = FastAPI(title="gob feeder control service")
    app.state.session = session

    @app.get("/state")
    def get_state():
        with session.plant_lock:
            plant = session.plant
            recent = list(session.measurements)[-8:]
            return {
                "version": API_VERSION,
                "machine_state": plant.machine_state.to_dict(),
                "cycle": plant.cycle.to_dict(),
                "cycle_id": plant.cycle_id,
                "timestamp": plant.timestamp,
                "working_point": {
                    "weight_g": plant.recipe.working_point.weight_g,
                    "length_mm": plant.recipe.working_point.length_mm,
                },
                "model_loaded": session.model is not None,
                "recent_measurements": recent,
            }

    @app.post("/inversion")
    def post_inversion(body: InversionBody):
        run_id = session.start_inversion(body)
        return {"version": API_VERSION, "run_id": run_id}

    @app.get("/inversion/{run_id}/events")
    def get_events(run_id: int, from_step: int = 0):
        return StreamingResponse(
            session.stream(run_id, from_step), media_type="application/x-ndjson"
        )

    @app.post("/apply")
    def post_apply(body: ApplyBody):
        try:
            cycle = Cycle.from_dict(body.cycle)
        except (KeyError, TypeError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=f"malformed cycle: {exc}")
        violations = validate_cycle(cycle)
        if violations:
            raise HTTPException(
                status_code=422,
                detail={
                    "message": "cycle failed validation",
                    "violations": [
                        {"kind": v.kind, "section": v.section, "magnitude": v.magnitude,
                         "description": str(v)}
                        for v in violations
                    ],
                },
            )
        with session.plant_lock:
            if (
                body.expected_cycle_id is not None
                and body.expected_cycle_id != session.plant.cycle_id
            ):
                raise HTTPException(
                    status_code=409,
                    detail={
                        "message": "plant advanced since the proposal was computed",
                        "cycle_id": session.plant.cycle_id,
                    },
                )
            measurements = session.plant.step(cycle)
            session._record(measurements)
            return {
                "version": API_VERSION,
                "cycle_id": measurements[0].cycle_id,
                "measurements": [_measurement_dict(m) for m in measurements],
            }

    @app.post("/plant/advance")
    def post_advance(body: AdvanceBody):
        if not 1 <= body.cycles <= 1000:
            raise HTTPException(status_code=400, detail="cycles must be in [1, 1000]")
        with session.plant_lock:
            batches = session.plant.advance(body.cycles)
            for batch in batches:
                session._record(batch)
            return {
                "version": API_VERSION,
                "cycles": [
                    {
                        "cycle_id": batch[0].cycle_id,
                        "timestamp": batch[0].timestamp,
                        "measurements": [_measurement_dict(m) for m in batch],
                    }
                    for batch in batches
                ],
            }

    @app.get("/history")
    def get_history():
        with session.plant_lock:
            return {"version": API_VERSION, "cycles": list(session.measurements)}

    @app.get("/cycle/motion")
    def get_motion(samples: int = 40):
        with session.plant_lock:
            cycle = session.plant.cycle
        curves = cycle_motion(cycle, n_samples_per_section=max(2, min(samples, 500)))
        return {
            "version": API_VERSION,
            "sections": [
                {"times": list(c.times), "heights": list(c.heights)} for c in curves
            ],
        }

    frontend_dir = Path(__file__).resolve().parents[2] / "frontend"
    index_html = frontend_dir / "index.html"
    if index_html.exists():
        from fastapi.staticfiles import StaticFiles

        @app.get("/", response_class=HTMLResponse)
        def root():
            return index_html.read_text()

        if (frontend_dir / "dist").exists():
            app.mount("/dist", StaticFiles(directory=frontend_dir / "dist"), name="dist")
        if (frontend_dir / "styles.css").exists():
            @app.get("/styles.css")
            def styles():
                from fastapi.responses import FileResponse

                return FileResponse(frontend_dir / "styles.css")

    return app
