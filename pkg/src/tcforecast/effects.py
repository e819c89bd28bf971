"""Effect estimators, treatment recommendation, and evaluation metrics.

Everything here operates in raw (denormalized) units through a Forecaster
that wraps a trained checkpoint bundle: effect estimates are differences of
decoder forecasts between treatment arms with identical histories and
planned features.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import Dataset, History, Trajectory, build_history, normalize_v
from .groundtruth import GroundTruthTable, all_masks, mask_bits
from .model import CheckpointBundle, OutcomeSet


class EffectsError(ValueError):
    pass


@dataclass
class CateEstimate:
    entity_id: str
    t: int
    k: int
    tau: int
    value: float


@dataclass
class InteractionEstimate:
    entity_id: str
    t: int
    a: tuple
    value: float


@dataclass
class RankedPlan:
    bits: tuple          # treatment combination applied at the offset step
    offset: int          # 1-based future step at which it is applied
    score: float         # forecast objective value at the horizon

    def encoding(self) -> tuple[str, int]:
        return ("".join(str(b) for b in self.bits), self.offset)


class Forecaster:
    """Checkpoint-backed forecaster working on raw-unit trajectories."""

    def __init__(self, bundle: CheckpointBundle):
        self.bundle = bundle
        self.net = bundle.network()
        self.stats = bundle.norm_stats

    @property
    def k(self) -> int:
        return self.net.config.k

    @property
    def tau_max(self) -> int:
        return self.net.config.tau_max

    def _normalize_history(self, history: History) -> History:
        s = self.stats
        return History(
            t=history.t,
            treatments=history.treatments.copy(),
            features=(history.features - s.v_min) / (s.v_max - s.v_min),
            covariates=(history.covariates - s.x_mean) / s.x_std,
        )

    def encode_states(self, trajectory: Trajectory, t: int) -> tuple[np.ndarray, list[np.ndarray]]:
        """Balanced representation and decoder-init states at base time t."""
        history = self._normalize_history(build_history(trajectory, t))
        return self.net.encode_full(history)

    def decode_raw(self, states: list[np.ndarray], plan_bits: np.ndarray,
                   plan_v_raw: np.ndarray) -> np.ndarray:
        """Forecast raw outcomes over the plan horizon."""
        plan_bits = np.asarray(plan_bits, dtype=np.float64)
        if plan_bits.shape[0] > self.tau_max:
            raise EffectsError(f"horizon {plan_bits.shape[0]} exceeds model tau_max {self.tau_max}")
        plan_v = normalize_v(np.asarray(plan_v_raw, dtype=np.float64), self.stats)
        y_norm = self.net.decode(states, plan_bits, plan_v)
        return y_norm * self.stats.y_std + self.stats.y_mean

    def forecast(self, trajectory: Trajectory, t: int, plan_bits: np.ndarray,
                 plan_v_raw: np.ndarray) -> np.ndarray:
        _, states = self.encode_states(trajectory, t)
        return self.decode_raw(states, plan_bits, plan_v_raw)

    def outcome_set_raw(self, trajectory: Trajectory, t: int, a) -> OutcomeSet:
        """One-step outcome decomposition in raw units (k+2 head evaluations)."""
        rep, _ = self.encode_states(trajectory, t)
        oset = self.net.outcome_set(rep, np.asarray(a, dtype=np.float64))
        s = self.stats
        return OutcomeSet(
            a=oset.a,
            y0=oset.y0 * s.y_std + s.y_mean,
            arms=[v * s.y_std + s.y_mean for v in oset.arms],
            combined=oset.combined * s.y_std + s.y_mean,
        )


def default_plan_features(trajectory: Trajectory, t: int, k: int) -> np.ndarray:
    """Per-treatment feature column to use for planned interventions: the mean
    observed feature over history steps where that treatment was on, falling
    back to the overall history mean."""
    _, v, a, _ = trajectory.arrays()
    v, a = v[:t], a[:t]
    out = np.zeros(v.shape[1:])  # (d_v, k)
    for j in range(k):
        on = a[:, j] == 1
        out[:, j] = v[on, :, j].mean(axis=0) if np.any(on) else v[:, :, j].mean(axis=0)
    return out


def plan_matrix(bits_rows: np.ndarray, feature_cols: np.ndarray) -> np.ndarray:
    """Raw plan features for bit rows: column k present only where bit k is on."""
    bits_rows = np.asarray(bits_rows, dtype=np.float64)
    return bits_rows[:, None, :] * feature_cols[None, :, :]


def estimate_effect(forecaster: Forecaster, trajectory: Trajectory, t: int,
                    a_target, a_base, tau: int, plan_v_raw: np.ndarray | None = None) -> float:
    """Forecast difference between two arms applied at the final plan step,
    identical histories and planned features. Antisymmetric in its arms."""
    k = forecaster.k
    if tau < 1 or tau > forecaster.tau_max:
        raise EffectsError(f"tau={tau} out of range 1..{forecaster.tau_max}")
    a_target = np.asarray(a_target, dtype=np.int64)
    a_base = np.asarray(a_base, dtype=np.int64)
    if plan_v_raw is None:
        cols = default_plan_features(trajectory, t, k)
        plan_v_raw = np.broadcast_to(cols, (tau,) + cols.shape).copy()
    _, states = forecaster.encode_states(trajectory, t)
    plan_t = np.zeros((tau, k), dtype=np.int64)
    plan_b = np.zeros((tau, k), dtype=np.int64)
    plan_t[tau - 1] = a_target
    plan_b[tau - 1] = a_base
    y_t = forecaster.decode_raw(states, plan_t, plan_v_raw)
    y_b = forecaster.decode_raw(states, plan_b, plan_v_raw)
    return float(y_t[tau - 1] - y_b[tau - 1])


def estimate_cate(forecaster: Forecaster, trajectory: Trajectory, t: int, k: int,
                  tau: int = 1, plan_v_raw: np.ndarray | None = None) -> CateEstimate:
    """Effect of single treatment k at horizon tau against the no-treatment
    baseline. k=0 denotes the baseline itself and is exactly zero."""
    kk = forecaster.k
    if not 0 <= k <= kk:
        raise EffectsError(f"treatment index {k} out of range 0..{kk}")
    if k == 0:
        return CateEstimate(trajectory.entity_id, t, 0, tau, 0.0)
    one_hot = np.zeros(kk, dtype=np.int64)
    one_hot[k - 1] = 1
    value = estimate_effect(forecaster, trajectory, t, one_hot, np.zeros(kk, dtype=np.int64),
                            tau, plan_v_raw)
    return CateEstimate(trajectory.entity_id, t, k, tau, value)


def estimate_interaction(forecaster: Forecaster, trajectory: Trajectory, t: int, a,
                         tau: int = 1, literal_sum: bool = False,
                         plan_v_raw: np.ndarray | None = None) -> InteractionEstimate:
    """Mixed effect minus the sum of single-treatment effects.

    By default the sum runs over the active treatments (the inactive terms of
    the printed bound are identically zero one-hot cancellations);
    ``literal_sum`` subtracts every arm's effect instead.
    """
    bits = np.asarray(a, dtype=np.int64)
    k = forecaster.k
    if bits.shape != (k,) or not np.all((bits == 0) | (bits == 1)):
        raise EffectsError(f"treatment vector must be {k} bits")
    if tau == 1:
        oset = forecaster.outcome_set_raw(trajectory, t, bits)
        arms, y0, combined = oset.arms, oset.y0, oset.combined
    else:
        if plan_v_raw is None:
            cols = default_plan_features(trajectory, t, k)
            plan_v_raw = np.broadcast_to(cols, (tau,) + cols.shape).copy()
        _, states = forecaster.encode_states(trajectory, t)

        def arm_value(arm_bits):
            plan = np.zeros((tau, k), dtype=np.int64)
            plan[tau - 1] = arm_bits
            return float(forecaster.decode_raw(states, plan, plan_v_raw)[tau - 1])

        y0 = arm_value(np.zeros(k, dtype=np.int64))
        arms = [arm_value(np.eye(k, dtype=np.int64)[j]) for j in range(k)]
        combined = arm_value(bits)
    value = combined - y0
    for j in range(k):
        if literal_sum or bits[j] == 1:
            value -= arms[j] - y0
    return InteractionEstimate(trajectory.entity_id, t, tuple(int(b) for b in bits), float(value))


def candidate_plans(k: int, horizon: int) -> list[tuple[tuple, int]]:
    """Default candidate set: every treatment combination at every offset."""
    return [(tuple(mask_bits(m)), off) for m in all_masks(k) for off in range(1, horizon + 1)]


def _plan_rows(bits: tuple, offset: int, horizon: int, k: int) -> np.ndarray:
    rows = np.zeros((horizon, k), dtype=np.int64)
    rows[offset - 1] = bits
    return rows


def rank_plans(scored: list[RankedPlan], objective: str) -> list[RankedPlan]:
    """Sort by forecast objective; ties broken by lexicographic plan encoding."""
    if objective not in ("min", "max"):
        raise EffectsError(f"objective must be 'min' or 'max', got {objective!r}")
    sign = 1.0 if objective == "min" else -1.0
    return sorted(scored, key=lambda rp: (sign * rp.score, rp.encoding()))


def recommend_treatment(forecaster: Forecaster, trajectory: Trajectory, t: int, horizon: int,
                        candidates: list[tuple[tuple, int]] | None = None,
                        objective: str = "min",
                        feature_cols: np.ndarray | None = None) -> list[RankedPlan]:
    """Rank candidate (combination, timing) plans by the forecast at the horizon."""
    if horizon > forecaster.tau_max:
        raise EffectsError(f"horizon {horizon} exceeds model tau_max {forecaster.tau_max}")
    if candidates is None:
        candidates = candidate_plans(forecaster.k, horizon)
    if not candidates:
        raise EffectsError("candidate set must be nonempty")
    if feature_cols is None:
        feature_cols = default_plan_features(trajectory, t, forecaster.k)
    _, states = forecaster.encode_states(trajectory, t)
    scored = []
    for bits, offset in candidates:
        rows = _plan_rows(bits, offset, horizon, forecaster.k)
        y = forecaster.decode_raw(states, rows, plan_matrix(rows, feature_cols))
        scored.append(RankedPlan(bits=tuple(int(b) for b in bits), offset=offset,
                                 score=float(y[horizon - 1])))
    return rank_plans(scored, objective)


# ---------------------------------------------------------------------------
# metrics

@dataclass
class HorizonMetrics:
    tau: int
    rmse_pct: float
    mae_pct: float
    cf_rmse_pct: float | None = None
    cf_mae_pct: float | None = None
    tr_acc: float | None = None
    trt_acc: float | None = None


@dataclass
class MetricsReport:
    kind: str
    normalizer: float
    n_entities: int
    horizons: list[HorizonMetrics]

    def __post_init__(self):
        for h in self.horizons:
            if h.tr_acc is not None and h.trt_acc is not None and h.trt_acc > h.tr_acc + 1e-12:
                raise EffectsError(f"timing accuracy {h.trt_acc} exceeds type accuracy {h.tr_acc}")

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "kind": self.kind,
            "normalizer": self.normalizer,
            "n_entities": self.n_entities,
            "horizons": [vars(h) for h in self.horizons],
        }

    _COLS = ["tau", "rmse_pct", "mae_pct", "cf_rmse_pct", "cf_mae_pct", "tr_acc", "trt_acc"]

    def to_table(self) -> str:
        header = ["tau", "RMSE%", "MAE%", "CF RMSE%", "CF MAE%", "Tr Acc", "TrT Acc"]
        rows = [header]
        for h in self.horizons:
            row = []
            for c in self._COLS:
                val = getattr(h, c)
                row.append("-" if val is None else (f"{val:.4f}" if isinstance(val, float) else str(val)))
            rows.append(row)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in rows)

    def to_csv(self) -> str:
        lines = [",".join(self._COLS)]
        for h in self.horizons:
            cells = []
            for c in self._COLS:
                val = getattr(h, c)
                cells.append("" if val is None else (repr(val) if isinstance(val, float) else str(val)))
            lines.append(",".join(cells))
        return "\n".join(lines)


def _pct(err: np.ndarray, normalizer: float, kind: str) -> float:
    if kind == "rmse":
        return 100.0 * float(np.sqrt(np.mean(err ** 2))) / normalizer
    return 100.0 * float(np.mean(np.abs(err))) / normalizer


def _normalize_batch(arrs: dict, stats) -> tuple[np.ndarray, np.ndarray]:
    x = (arrs["x"] - stats.x_mean) / stats.x_std
    v = (arrs["v"] - stats.v_min) / (stats.v_max - stats.v_min)
    return x, v


def evaluate(forecaster: Forecaster, test: Dataset, ground_truth: GroundTruthTable | None,
             taus: list[int], base_stride: int = 3) -> MetricsReport:
    """Factual and counterfactual forecast error plus recommendation accuracy.

    Forecast errors pool every base time on a stride (counterfactual plans are
    hardest early, when little history has accumulated); recommendation
    accuracy is scored once per entity at its final decision point. Without a
    ground-truth table only the factual metrics are emitted.
    """
    from .autodiff import Tape
    from .training import batch_arrays

    taus = sorted(set(taus))
    max_tau = max(taus)
    if max_tau > forecaster.tau_max:
        raise EffectsError(f"tau {max_tau} exceeds model tau_max {forecaster.tau_max}")
    k = forecaster.k
    net = forecaster.net
    stats = forecaster.stats
    factual_err: dict[int, list[np.ndarray]] = {tau: [] for tau in taus}
    cf_err: dict[int, list[np.ndarray]] = {tau: [] for tau in taus}
    tr_hits: dict[int, list[bool]] = {tau: [] for tau in taus}
    trt_hits: dict[int, list[bool]] = {tau: [] for tau in taus}
    test_y = np.concatenate([traj.arrays()[3] for traj in test]) if len(test) else np.array([])

    groups: dict[int, list[Trajectory]] = {}
    for traj in test:
        if traj.length - max_tau >= 1:
            groups.setdefault(traj.length, []).append(traj)
    n_used = sum(len(g) for g in groups.values())

    for t_len, trajs in sorted(groups.items()):
        arrs = batch_arrays(trajs)
        xn, vn = _normalize_batch(arrs, stats)
        tape = Tape()
        p = net.param_nodes(tape)
        _, all_states = net.encoder_reps(tape, p, xn, vn, arrs["a"])
        last_base = t_len - max_tau
        bases = sorted(set(range(1, last_base + 1, base_stride)) | {last_base})

        def decode_batch(t_base: int, plan_bits: np.ndarray, plan_v_raw: np.ndarray) -> np.ndarray:
            """(B, H) raw forecasts from the shared encoder pass."""
            states = [tape.constant(s.value) for s in all_states[t_base - 1]]
            plan_v = (plan_v_raw - stats.v_min) / (stats.v_max - stats.v_min)
            outs = net.decode_graph(tape, p, states, plan_bits, plan_v)
            y = np.concatenate([o.value for o in outs], axis=1)
            return y * stats.y_std + stats.y_mean

        for t_base in bases:
            plan_a = arrs["a"][:, t_base - 1: t_base - 1 + max_tau]
            plan_v = arrs["v"][:, t_base - 1: t_base - 1 + max_tau]
            y_hat = decode_batch(t_base, plan_a, plan_v)
            for tau in taus:
                factual_err[tau].append(y_hat[:, tau - 1] - arrs["y"][:, t_base - 1 + tau])
            if ground_truth is None:
                continue
            for mask in all_masks(k):
                bits = mask_bits(mask)
                rows = np.tile(bits, (max_tau, 1))
                v_rows = np.stack([ground_truth.plan_features(tr.entity_id, t_base, rows)
                                   for tr in trajs])
                y_cf_hat = decode_batch(t_base, np.tile(rows, (len(trajs), 1, 1)), v_rows)
                y_cf_true = np.stack([ground_truth.rerun_plan(tr.entity_id, t_base, rows)
                                      for tr in trajs])
                for tau in taus:
                    cf_err[tau].append(y_cf_hat[:, tau - 1] - y_cf_true[:, tau - 1])

        if ground_truth is not None:
            sign = 1.0 if ground_truth.objective() == "min" else -1.0
            for tau in taus:
                t_base = t_len - tau
                cands = candidate_plans(k, tau)
                model_scores = np.zeros((len(cands), len(trajs)))
                oracle_scores = np.zeros((len(cands), len(trajs)))
                for ci, (bits, offset) in enumerate(cands):
                    rows = _plan_rows(bits, offset, tau, k)
                    v_rows = np.stack([ground_truth.plan_features(tr.entity_id, t_base, rows)
                                       for tr in trajs])
                    y_m = decode_batch(t_base, np.tile(rows, (len(trajs), 1, 1)), v_rows)
                    model_scores[ci] = sign * y_m[:, tau - 1]
                    oracle_scores[ci] = sign * np.array(
                        [ground_truth.rerun_plan(tr.entity_id, t_base, rows)[tau - 1]
                         for tr in trajs])
                encodings = [("".join(str(b) for b in bits), off) for bits, off in cands]
                for b in range(len(trajs)):
                    best_m = min(range(len(cands)), key=lambda ci: (model_scores[ci, b], encodings[ci]))
                    best_o = min(range(len(cands)), key=lambda ci: (oracle_scores[ci, b], encodings[ci]))
                    tr_hits[tau].append(cands[best_m][0] == cands[best_o][0])
                    trt_hits[tau].append(cands[best_m][0] == cands[best_o][0]
                                         and cands[best_m][1] == cands[best_o][1])

    if ground_truth is not None:
        normalizer = ground_truth.normalizer(test_y)
        kind = ground_truth.kind
    else:
        if test_y.size == 0:
            raise EffectsError("empty test set")
        normalizer = float(np.max(np.abs(test_y)))
        kind = "factual-only"
    horizons = []
    for tau in taus:
        fe = np.concatenate(factual_err[tau]) if factual_err[tau] else np.array([])
        hm = HorizonMetrics(tau=tau, rmse_pct=_pct(fe, normalizer, "rmse"),
                            mae_pct=_pct(fe, normalizer, "mae"))
        if ground_truth is not None:
            ce = np.concatenate(cf_err[tau])
            hm.cf_rmse_pct = _pct(ce, normalizer, "rmse")
            hm.cf_mae_pct = _pct(ce, normalizer, "mae")
            hm.tr_acc = float(np.mean(tr_hits[tau]))
            hm.trt_acc = float(np.mean(trt_hits[tau]))
        horizons.append(hm)
    return MetricsReport(kind=kind, normalizer=normalizer, n_entities=n_used, horizons=horizons)


def effect_dump(forecaster: Forecaster, test: Dataset, ground_truth: GroundTruthTable | None,
                path) -> None:
    """Per-entity one-step effect estimates as JSON-lines."""
    k = forecaster.k
    with open(path, "w") as fh:
        for traj in test:
            t_base = traj.length - 1
            cates = [estimate_cate(forecaster, traj, t_base, j + 1, tau=1).value for j in range(k)]
            inter = estimate_interaction(forecaster, traj, t_base, np.ones(k, dtype=np.int64)).value
            rec = {"entity_id": traj.entity_id, "t": t_base,
                   "cate": cates, "interaction_all_on": inter}
            if ground_truth is not None:
                rec["true_cate"] = [ground_truth.cate(traj.entity_id, t_base, j) for j in range(k)]
                rec["true_interaction_all_on"] = ground_truth.interaction(
                    traj.entity_id, t_base, np.ones(k, dtype=np.int64))
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
