"""Pseudo-counterfactual corruption of treatment/feature pairs.

At every timestep one treatment position is chosen uniformly at random; its
bit is inverted and its feature column is mapped ``x -> 1 - x``. Covariates
and outcomes are left untouched: the counterfactual outcome is unknown and is
what the model predicts. The flip is an involution, so re-applying a recorded
corruption restores the factual input exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset, TimeStep, Trajectory


class CorruptionError(ValueError):
    pass


@dataclass
class CorruptionRecord:
    t: int                  # 1-based timestep
    position: int           # 0-based treatment index that was flipped
    a_original: int
    v_original: np.ndarray  # (d_v,) column before the flip
    a_corrupted: int
    v_corrupted: np.ndarray

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "position": self.position,
            "a_original": self.a_original,
            "v_original": self.v_original.tolist(),
            "a_corrupted": self.a_corrupted,
            "v_corrupted": self.v_corrupted.tolist(),
        }


def corrupt_step(v: np.ndarray, a: np.ndarray, rng: np.random.Generator, t: int = 0,
                 n_positions: int = 1) -> tuple[np.ndarray, np.ndarray, list[CorruptionRecord]]:
    """Flip ``n_positions`` distinct uniformly-chosen treatment positions.

    Requires min-max normalized features: the reverse operation is only
    defined on [0, 1].
    """
    if np.any(v < 0) or np.any(v > 1):
        raise CorruptionError(f"features outside [0, 1] at t={t}; corruption undefined")
    k = a.shape[0]
    if not 1 <= n_positions <= k:
        raise CorruptionError(f"n_positions must be in [1, {k}], got {n_positions}")
    positions = rng.choice(k, size=n_positions, replace=False) if n_positions > 1 else [int(rng.integers(k))]
    v2 = v.copy()
    a2 = a.copy()
    records = []
    for pos in positions:
        pos = int(pos)
        rec = CorruptionRecord(
            t=t, position=pos,
            a_original=int(a[pos]), v_original=v[:, pos].copy(),
            a_corrupted=int(1 - a[pos]), v_corrupted=1.0 - v[:, pos],
        )
        a2[pos] = 1 - a2[pos]
        v2[:, pos] = 1.0 - v2[:, pos]
        records.append(rec)
    return v2, a2, records


def corrupt_trajectory(trajectory: Trajectory, rng: np.random.Generator,
                       n_positions: int = 1) -> tuple[Trajectory, list[CorruptionRecord]]:
    """Corrupt every timestep independently; x and y pass through unchanged."""
    steps = []
    records: list[CorruptionRecord] = []
    for i, s in enumerate(trajectory.steps):
        v2, a2, recs = corrupt_step(s.v, s.a, rng, t=i + 1, n_positions=n_positions)
        steps.append(TimeStep(x=s.x.copy(), v=v2, a=a2, y=s.y))
        records.extend(recs)
    return Trajectory(entity_id=trajectory.entity_id, steps=steps), records


def apply_records(trajectory: Trajectory, records: list[CorruptionRecord]) -> Trajectory:
    """Re-apply recorded flips; corrupting a corrupted trajectory restores it."""
    steps = [TimeStep(x=s.x.copy(), v=s.v.copy(), a=s.a.copy(), y=s.y) for s in trajectory.steps]
    for rec in records:
        step = steps[rec.t - 1]
        step.a[rec.position] = 1 - step.a[rec.position]
        step.v[:, rec.position] = 1.0 - step.v[:, rec.position]
    return Trajectory(entity_id=trajectory.entity_id, steps=steps)


def corrupt_dataset(dataset: Dataset, rng: np.random.Generator,
                    n_positions: int = 1) -> tuple[Dataset, list[list[CorruptionRecord]]]:
    trajectories = []
    all_records = []
    for traj in dataset:
        corrupted, recs = corrupt_trajectory(traj, rng, n_positions=n_positions)
        trajectories.append(corrupted)
        all_records.append(recs)
    return Dataset(trajectories=trajectories), all_records


def save_records(records: list[list[CorruptionRecord]], entity_ids: list[str], path) -> None:
    """Audit trail: one JSON line per trajectory."""
    with open(path, "w") as fh:
        for eid, recs in zip(entity_ids, records):
            fh.write(json.dumps({"entity_id": eid, "records": [r.to_dict() for r in recs]},
                                separators=(",", ":")) + "\n")
