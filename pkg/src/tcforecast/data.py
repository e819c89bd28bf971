"""Trajectory data structures, JSONL serialization, normalization, splits.

A trajectory is a per-entity sequence of steps ``(x, v, a, y)``: covariates,
per-treatment interventional features, the treatment bit-vector, and the
scalar outcome. Histories condition forecasts on everything observed up to a
time point except the current treatment assignment.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


class DatasetError(ValueError):
    pass


@dataclass
class TimeStep:
    x: np.ndarray  # (d_x,)
    v: np.ndarray  # (d_v, k): column k describes treatment k
    a: np.ndarray  # (k,) bits
    y: float

    def validate(self) -> None:
        if self.v.ndim != 2 or self.v.shape[1] != self.a.shape[0]:
            raise DatasetError(f"v shape {self.v.shape} does not align with {self.a.shape[0]} treatments")
        if not np.all((self.a == 0) | (self.a == 1)):
            raise DatasetError(f"treatment bits must be 0/1, got {self.a}")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v)) and np.isfinite(self.y)):
            raise DatasetError("non-finite values in step")


@dataclass
class Trajectory:
    entity_id: str
    steps: list[TimeStep]

    def __post_init__(self):
        if len(self.steps) < 2:
            raise DatasetError(f"trajectory {self.entity_id!r} needs length >= 2, got {len(self.steps)}")

    @property
    def length(self) -> int:
        return len(self.steps)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (x, v, a, y) arrays of shapes (T,d_x), (T,d_v,k), (T,k), (T,)."""
        x = np.stack([s.x for s in self.steps])
        v = np.stack([s.v for s in self.steps])
        a = np.stack([s.a for s in self.steps])
        y = np.array([s.y for s in self.steps], dtype=np.float64)
        return x, v, a, y


@dataclass
class Dataset:
    trajectories: list[Trajectory]

    def __post_init__(self):
        dims = {(t.steps[0].x.shape[0], t.steps[0].v.shape) for t in self.trajectories}
        if len(dims) > 1:
            raise DatasetError(f"inconsistent dimensions across trajectories: {sorted(dims)}")
        for traj in self.trajectories:
            ref = traj.steps[0]
            for i, s in enumerate(traj.steps):
                if s.x.shape != ref.x.shape or s.v.shape != ref.v.shape or s.a.shape != ref.a.shape:
                    raise DatasetError(f"ragged step {i} in trajectory {traj.entity_id!r}")
                s.validate()

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    @property
    def d_x(self) -> int:
        return self.trajectories[0].steps[0].x.shape[0]

    @property
    def d_v(self) -> int:
        return self.trajectories[0].steps[0].v.shape[0]

    @property
    def k(self) -> int:
        return self.trajectories[0].steps[0].a.shape[0]

    def by_id(self, entity_id: str) -> Trajectory:
        for traj in self.trajectories:
            if traj.entity_id == entity_id:
                return traj
        raise KeyError(entity_id)


@dataclass
class History:
    """Conditioning set at time t: everything observed except the current treatment."""

    t: int
    treatments: np.ndarray  # (t-1, k)
    features: np.ndarray    # (t, d_v, k)
    covariates: np.ndarray  # (t, d_x)

    def __post_init__(self):
        if self.treatments.shape[0] != self.covariates.shape[0] - 1:
            raise DatasetError("history treatments must be one step shorter than covariates")


@dataclass
class DecoderContext:
    """Rolling decode state: base history plus what the model has produced so far."""

    history: History
    predicted_treatments: list[np.ndarray] = field(default_factory=list)
    predicted_outcomes: list[float] = field(default_factory=list)


def build_history(trajectory: Trajectory, t: int) -> History:
    """History through step t (1-based); the treatment at t itself is excluded."""
    if not 1 <= t <= trajectory.length:
        raise DatasetError(f"t={t} out of range for trajectory of length {trajectory.length}")
    x, v, a, _ = trajectory.arrays()
    return History(t=t, treatments=a[: t - 1].copy(), features=v[:t].copy(), covariates=x[:t].copy())


# ---------------------------------------------------------------------------
# serialization

def _step_to_dict(s: TimeStep) -> dict:
    return {"x": s.x.tolist(), "v": s.v.tolist(), "a": s.a.astype(int).tolist(), "y": float(s.y)}


def _step_from_dict(d: dict) -> TimeStep:
    return TimeStep(
        x=np.asarray(d["x"], dtype=np.float64),
        v=np.asarray(d["v"], dtype=np.float64),
        a=np.asarray(d["a"], dtype=np.int64),
        y=float(d["y"]),
    )


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for traj in dataset.trajectories:
            rec = {"entity_id": traj.entity_id, "steps": [_step_to_dict(s) for s in traj.steps]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(path) -> Dataset:
    trajectories = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                steps = [_step_from_dict(d) for d in rec["steps"]]
                k = steps[0].a.shape[0]
                for s in steps:
                    if s.a.ndim != 1 or s.a.shape[0] != k:
                        raise DatasetError(f"ragged treatment vector (expected length {k})")
                trajectories.append(Trajectory(entity_id=str(rec["entity_id"]), steps=steps))
            except (KeyError, ValueError, TypeError) as exc:
                raise DatasetError(f"line {lineno}: {exc}") from exc
    return Dataset(trajectories=trajectories)


def dataset_fingerprint(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# normalization

@dataclass
class NormStats:
    """Z-score stats for x and y, min-max range for v. Fit on the train split only.

    Constant features are passed through unchanged and flagged.
    """

    x_mean: np.ndarray
    x_std: np.ndarray
    x_const: np.ndarray  # bool mask of passthrough covariates
    y_mean: float
    y_std: float
    y_const: bool
    v_min: np.ndarray   # (d_v, k)
    v_max: np.ndarray
    v_const: np.ndarray

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "x_const": self.x_const.astype(bool).tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
            "y_const": bool(self.y_const),
            "v_min": self.v_min.tolist(),
            "v_max": self.v_max.tolist(),
            "v_const": self.v_const.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(
            x_mean=np.asarray(d["x_mean"], dtype=np.float64),
            x_std=np.asarray(d["x_std"], dtype=np.float64),
            x_const=np.asarray(d["x_const"], dtype=bool),
            y_mean=float(d["y_mean"]),
            y_std=float(d["y_std"]),
            y_const=bool(d["y_const"]),
            v_min=np.asarray(d["v_min"], dtype=np.float64),
            v_max=np.asarray(d["v_max"], dtype=np.float64),
            v_const=np.asarray(d["v_const"], dtype=bool),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "NormStats":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def fit_stats(train: Dataset) -> NormStats:
    xs = np.concatenate([traj.arrays()[0] for traj in train])
    vs = np.concatenate([traj.arrays()[1] for traj in train])
    ys = np.concatenate([traj.arrays()[3] for traj in train])
    x_mean = xs.mean(axis=0)
    x_std = xs.std(axis=0)
    x_const = x_std <= 0
    x_std = np.where(x_const, 1.0, x_std)
    x_mean = np.where(x_const, 0.0, x_mean)
    y_std = float(ys.std())
    y_const = y_std <= 0
    y_mean = 0.0 if y_const else float(ys.mean())
    v_min = vs.min(axis=0)
    v_max = vs.max(axis=0)
    v_const = (v_max - v_min) <= 0
    v_min = np.where(v_const, 0.0, v_min)
    v_max = np.where(v_const, 1.0, v_max)
    return NormStats(
        x_mean=x_mean, x_std=x_std, x_const=x_const,
        y_mean=y_mean, y_std=1.0 if y_const else y_std, y_const=y_const,
        v_min=v_min, v_max=v_max, v_const=v_const,
    )


def _map_dataset(dataset: Dataset, fx, fv, fy) -> Dataset:
    out = []
    for traj in dataset:
        steps = [TimeStep(x=fx(s.x), v=fv(s.v), a=s.a.copy(), y=fy(s.y)) for s in traj.steps]
        out.append(Trajectory(entity_id=traj.entity_id, steps=steps))
    return Dataset(trajectories=out)


def normalize(dataset: Dataset, stats: NormStats) -> Dataset:
    return _map_dataset(
        dataset,
        fx=lambda x: (x - stats.x_mean) / stats.x_std,
        fv=lambda v: (v - stats.v_min) / (stats.v_max - stats.v_min),
        fy=lambda y: (y - stats.y_mean) / stats.y_std,
    )


def denormalize(dataset: Dataset, stats: NormStats) -> Dataset:
    return _map_dataset(
        dataset,
        fx=lambda x: x * stats.x_std + stats.x_mean,
        fv=lambda v: v * (stats.v_max - stats.v_min) + stats.v_min,
        fy=lambda y: y * stats.y_std + stats.y_mean,
    )


def normalize_v(v: np.ndarray, stats: NormStats) -> np.ndarray:
    return (v - stats.v_min) / (stats.v_max - stats.v_min)


def denormalize_y(y, stats: NormStats):
    return np.asarray(y) * stats.y_std + stats.y_mean


# ---------------------------------------------------------------------------
# splits

def split(dataset: Dataset, fractions: tuple[float, float, float], seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Entity-level split, deterministic under seed.

    A strictly positive fraction that would receive zero entities is rejected.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError(f"fractions must sum to 1, got {fractions}")
    n = len(dataset)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    counts = [int(np.floor(f * n)) for f in fractions]
    # distribute the remainder by largest fractional part, ties by position
    remainders = [f * n - c for f, c in zip(fractions, counts)]
    for _ in range(n - sum(counts)):
        i = int(np.argmax(remainders))
        counts[i] += 1
        remainders[i] = -1.0
    for f, c in zip(fractions, counts):
        if f > 0 and c == 0:
            raise DatasetError(f"fraction {f} yields an empty split for {n} entities")
    pieces = []
    start = 0
    for c in counts:
        idx = sorted(order[start:start + c])
        pieces.append(Dataset(trajectories=[dataset.trajectories[i] for i in idx]))
        start += c
    return pieces[0], pieces[1], pieces[2]
