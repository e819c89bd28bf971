"""HTTP inference service for the what-if planning UI.

The model and dataset are immutable after startup; handlers are stateless per
request, so restarting the service reproduces all responses. Forecast
responses are produced by the same builder the CLI uses, which keeps the two
surfaces numerically identical.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .data import Dataset, TimeStep, Trajectory
from .effects import (Forecaster, default_plan_features, estimate_interaction,
                      plan_matrix, recommend_treatment)
from .model import CheckpointBundle

SCHEMA_VERSION = 1


class PlanItem(BaseModel):
    offset: int = Field(ge=1, description="1-based future step")
    a: list[int]
    v: list[list[float]] | None = None  # (d_v, k) raw feature matrix


class InlineStep(BaseModel):
    x: list[float]
    v: list[list[float]]
    a: list[int]
    y: float


class ForecastRequest(BaseModel):
    entity_id: str | None = None
    history: list[InlineStep] | None = None
    plan: list[PlanItem] = Field(default_factory=list)
    horizon: int = Field(ge=1)


class RecommendRequest(BaseModel):
    entity_id: str
    horizon: int = Field(ge=1)
    objective: str = "min"


def build_forecast_response(forecaster: Forecaster, trajectory: Trajectory,
                            plan: list[dict], horizon: int, fingerprint: str) -> dict:
    """Shared CLI/service response: per-step forecasts, the one-step outcome
    decomposition of the plan's first-step treatment, per-treatment effects,
    and the interaction consistent with that decomposition."""
    k = forecaster.k
    t_base = trajectory.length
    cols = default_plan_features(trajectory, t_base, k)
    bits = np.zeros((horizon, k), dtype=np.int64)
    v_rows = plan_matrix(bits, cols)
    for item in plan:
        off = int(item["offset"])
        if not 1 <= off <= horizon:
            raise ValueError(f"plan offset {off} outside 1..{horizon}")
        row = np.asarray(item["a"], dtype=np.int64)
        if row.shape != (k,) or not np.all((row == 0) | (row == 1)):
            raise ValueError(f"plan treatment vector must be {k} bits")
        bits[off - 1] = row
        if item.get("v") is not None:
            v_rows[off - 1] = np.asarray(item["v"], dtype=np.float64)
        else:
            v_rows[off - 1] = cols * row
    _, states = forecaster.encode_states(trajectory, t_base)
    y_hat = forecaster.decode_raw(states, bits, v_rows)
    first = bits[0]
    oset = forecaster.outcome_set_raw(trajectory, t_base, first)
    interaction = estimate_interaction(forecaster, trajectory, t_base, first)
    return {
        "schema_version": SCHEMA_VERSION,
        "model_fingerprint": fingerprint,
        "horizon": horizon,
        "forecast": [{"offset": i + 1, "y_hat": float(y)} for i, y in enumerate(y_hat)],
        "outcome_set": {
            "a": list(oset.a),
            "y0": oset.y0,
            "arms": list(oset.arms),
            "combined": oset.combined,
        },
        "cate": [{"treatment": j + 1, "value": oset.arms[j] - oset.y0} for j in range(k)],
        "interaction": {"a": list(interaction.a), "value": interaction.value},
    }


def create_app(bundle: CheckpointBundle, dataset: Dataset) -> FastAPI:
    app = FastAPI(title="counterfactual forecast service")
    forecaster = Forecaster(bundle)

    def get_trajectory(entity_id: str) -> Trajectory:
        try:
            return dataset.by_id(entity_id)
        except KeyError:
            raise HTTPException(status_code=404, detail=f"unknown entity {entity_id!r}") from None

    @app.get("/health")
    def health():
        return {"status": "ok", "schema_version": SCHEMA_VERSION}

    @app.get("/model")
    def model_info():
        cfg = bundle.config
        return {
            "schema_version": SCHEMA_VERSION,
            "fingerprint": bundle.fingerprint,
            "dataset_fingerprint": bundle.dataset_fingerprint,
            "model_config": {
                "d_x": cfg.d_x, "d_v": cfg.d_v, "k": cfg.k, "d_r": cfg.d_r,
                "d_z": cfg.d_z, "tau_max": cfg.tau_max, "depth": cfg.depth,
            },
            "k": cfg.k,
            "tau_max": cfg.tau_max,
        }

    @app.get("/entities")
    def entities():
        return {
            "schema_version": SCHEMA_VERSION,
            "entities": [{"id": t.entity_id, "length": t.length} for t in dataset],
        }

    @app.get("/entities/{entity_id}/history")
    def history(entity_id: str):
        traj = get_trajectory(entity_id)
        return {
            "schema_version": SCHEMA_VERSION,
            "entity_id": traj.entity_id,
            "steps": [{"x": s.x.tolist(), "v": s.v.tolist(),
                       "a": s.a.astype(int).tolist(), "y": float(s.y)} for s in traj.steps],
        }

    @app.post("/forecast")
    def forecast(req: ForecastRequest):
        if req.horizon > bundle.config.tau_max:
            raise HTTPException(status_code=422,
                                detail=f"horizon {req.horizon} exceeds model tau_max {bundle.config.tau_max}")
        if req.entity_id is not None:
            traj = get_trajectory(req.entity_id)
        elif req.history:
            try:
                steps = [TimeStep(x=np.asarray(s.x), v=np.asarray(s.v),
                                  a=np.asarray(s.a, dtype=np.int64), y=s.y) for s in req.history]
                traj = Trajectory(entity_id="inline", steps=steps)
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
        else:
            raise HTTPException(status_code=422, detail="entity_id or history required")
        try:
            return build_forecast_response(
                forecaster, traj, [item.model_dump() for item in req.plan],
                req.horizon, bundle.fingerprint)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc

    @app.post("/recommend")
    def recommend(req: RecommendRequest):
        if req.horizon > bundle.config.tau_max:
            raise HTTPException(status_code=422,
                                detail=f"horizon {req.horizon} exceeds model tau_max {bundle.config.tau_max}")
        traj = get_trajectory(req.entity_id)
        try:
            ranked = recommend_treatment(forecaster, traj, traj.length, req.horizon,
                                         objective=req.objective)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        return {
            "schema_version": SCHEMA_VERSION,
            "model_fingerprint": bundle.fingerprint,
            "objective": req.objective,
            "ranked": [{"plan": {"a": list(p.bits), "offset": p.offset}, "score": p.score}
                       for p in ranked],
        }

    return app
