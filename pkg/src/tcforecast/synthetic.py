"""Synthetic additive-plus-interaction generator with known counterfactuals.

The outcome is an AR(1) process driven by a smooth function of exogenous
covariates, per-treatment main effects scaled by the treatment's feature, and
pairwise interaction terms. Assignment depends on the covariates (selection
bias); noise is shared across counterfactual arms so the ground-truth table
is exact. This is the verification oracle for effect disentanglement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, TimeStep, Trajectory
from .groundtruth import GroundTruthTable, all_masks


class SyntheticError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    k: int = 2
    d_x: int = 3
    d_v: int = 1
    w: tuple = (0.7, 0.4)              # main-effect weight per treatment
    u: dict = field(default_factory=dict)  # {"jk": weight} pairwise interactions, j < k
    ar_coef: float = 0.5
    bias_strength: float = 1.5
    assignment: str = "logistic"       # "logistic" | "deterministic" (separable)
    interaction_v_product: bool = False  # scale u_jk by the two feature values
    noise_std: float = 0.1
    x_ar: float = 0.7
    x_noise_std: float = 0.5
    steps: int = 30
    patients: int = 500
    seed: int = 0

    def __post_init__(self):
        if abs(self.ar_coef) >= 1:
            raise SyntheticError(f"|ar_coef| must be < 1 for stationarity, got {self.ar_coef}")
        if self.k > 8:
            raise SyntheticError(f"k={self.k} exceeds the 2^k table limit of 8")
        if len(self.w) != self.k:
            raise SyntheticError(f"need {self.k} main-effect weights, got {len(self.w)}")
        if self.assignment not in ("logistic", "deterministic"):
            raise SyntheticError(f"unknown assignment mode {self.assignment!r}")
        for key in self.u:
            j, k = _pair(key)
            if not 0 <= j < k < self.k:
                raise SyntheticError(f"interaction key {key!r} is not an ordered pair below k={self.k}")

    def u_matrix(self) -> np.ndarray:
        mat = np.zeros((self.k, self.k))
        for key, val in self.u.items():
            j, k = _pair(key)
            mat[j, k] = val
        return mat


def _pair(key: str) -> tuple[int, int]:
    j, k = key.split(",")
    return int(j), int(k)


def treatment_term(bits, vbar, w: np.ndarray, u: np.ndarray, v_product: bool):
    """Main effects plus pairwise interactions for one transition.

    ``bits`` and ``vbar`` are (..., k); broadcasting over leading axes.
    """
    bits = np.asarray(bits, dtype=np.float64)
    vbar = np.asarray(vbar, dtype=np.float64)
    total = np.sum(w * bits * vbar, axis=-1)
    k = w.shape[0]
    for j in range(k):
        for m in range(j + 1, k):
            if u[j, m] != 0.0:
                term = u[j, m] * bits[..., j] * bits[..., m]
                if v_product:
                    term = term * vbar[..., j] * vbar[..., m]
                total = total + term
    return total


def simulate_synthetic(config: SyntheticConfig) -> tuple[Dataset, GroundTruthTable]:
    """Generate trajectories plus the exact 2^k potential-outcome table."""
    ss = np.random.SeedSequence(config.seed)
    rng_structure, rng_data = [np.random.default_rng(s) for s in ss.spawn(2)]
    n, t_len, k, d_x = config.patients, config.steps, config.k, config.d_x

    g_w = rng_structure.normal(0.0, 1.0, size=d_x) / np.sqrt(d_x)
    q = rng_structure.normal(0.0, 1.0, size=(k, d_x))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    w = np.asarray(config.w, dtype=np.float64)
    u = config.u_matrix()

    x = np.zeros((n, t_len, d_x))
    x[:, 0] = rng_data.normal(0.0, 1.0, size=(n, d_x))
    for t in range(1, t_len):
        x[:, t] = config.x_ar * x[:, t - 1] + rng_data.normal(0.0, config.x_noise_std, size=(n, d_x))

    v = rng_data.uniform(0.0, 1.0, size=(n, t_len, config.d_v, k))
    vbar = v.mean(axis=2)  # (n, T, k)

    score = np.einsum("ntd,kd->ntk", x, q)
    if config.assignment == "deterministic":
        bits = (score > 0).astype(np.int64)
    else:
        prob = 1.0 / (1.0 + np.exp(-config.bias_strength * score))
        bits = (rng_data.random(size=(n, t_len, k)) < prob).astype(np.int64)

    gx = np.tanh(x @ g_w)  # (n, T)
    noise = rng_data.normal(0.0, config.noise_std, size=(n, t_len - 1))
    init_noise = rng_data.normal(0.0, config.noise_std, size=n)

    y = np.zeros((n, t_len))
    y[:, 0] = gx[:, 0] + init_noise
    for t in range(t_len - 1):
        y[:, t + 1] = (config.ar_coef * y[:, t] + gx[:, t]
                       + treatment_term(bits[:, t], vbar[:, t], w, u, config.interaction_v_product)
                       + noise[:, t])

    meta = {
        "ar_coef": config.ar_coef,
        "w": w.tolist(),
        "u": {key: float(val) for key, val in config.u.items()},
        "interaction_v_product": config.interaction_v_product,
    }
    table = GroundTruthTable(k=k, kind="synthetic", meta=meta)
    masks = all_masks(k)
    mask_arr = np.array([[int(c) for c in m] for m in masks], dtype=np.float64)  # (2^k, k)
    trajectories = []
    for i in range(n):
        eid = f"s{i:05d}"
        steps = [TimeStep(x=x[i, t].copy(), v=v[i, t].copy(), a=bits[i, t].copy(), y=float(y[i, t]))
                 for t in range(t_len)]
        trajectories.append(Trajectory(entity_id=eid, steps=steps))
        for t in range(t_len - 1):
            # same op order as the factual update so the factual arm is bit-equal
            base = config.ar_coef * y[i, t] + gx[i, t]
            terms = treatment_term(mask_arr, vbar[i, t], w, u, config.interaction_v_product)
            for m, mask in enumerate(masks):
                table.outcomes[(eid, t + 1, mask)] = float(base + terms[m] + noise[i, t])
        table.entity_state[eid] = {
            "noise": noise[i].copy(),
            "gx": gx[i].copy(),
            "vplan": vbar[i].copy(),
            "y": y[i].copy(),
        }
        table.status[eid] = "ok"
    return Dataset(trajectories=trajectories), table


def rerun_synthetic_plan(meta: dict, state: dict, t_base: int, plan_bits: np.ndarray) -> np.ndarray:
    """Counterfactual outcomes from the saved state under a treatment plan."""
    w = np.asarray(meta["w"], dtype=np.float64)
    k = w.shape[0]
    u = np.zeros((k, k))
    for key, val in meta["u"].items():
        j, m = _pair(key)
        u[j, m] = val
    y_prev = float(np.asarray(state["y"])[t_base - 1])
    gx = np.asarray(state["gx"])
    vbar = np.asarray(state["vplan"])
    noise = np.asarray(state["noise"])
    out = np.zeros(plan_bits.shape[0])
    for j in range(plan_bits.shape[0]):
        idx = t_base - 1 + j
        y_prev = (meta["ar_coef"] * y_prev + gx[idx]
                  + float(treatment_term(plan_bits[j], vbar[idx], w, u, meta["interaction_v_product"]))
                  + noise[idx])
        out[j] = y_prev
    return out
