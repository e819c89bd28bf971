"""Ground-truth potential-outcome tables and counterfactual re-runs.

Simulators emit, next to each dataset, a table of one-step potential outcomes
under every treatment combination (noise shared across arms, so effects are
exact noise-free differences) plus the per-entity state needed to re-run the
dynamics under arbitrary future plans.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class GroundTruthError(ValueError):
    pass


def mask_string(bits) -> str:
    return "".join(str(int(b)) for b in bits)


def mask_bits(mask: str) -> np.ndarray:
    return np.array([int(c) for c in mask], dtype=np.int64)


def all_masks(k: int) -> list[str]:
    if k > 8:
        raise GroundTruthError(f"k={k} treatments would need 2^{k} table entries; limit is 8")
    return [format(m, f"0{k}b") for m in range(2 ** k)]


@dataclass
class GroundTruthTable:
    """Potential outcomes keyed by (entity_id, treatment time t, bitmask).

    ``t`` is the 1-based step at which the treatment acts; the stored value is
    the outcome realized at t+1 under that treatment combination.
    """

    k: int
    kind: str                                   # "tumour" | "synthetic"
    meta: dict
    outcomes: dict[tuple[str, int, str], float] = field(default_factory=dict)
    entity_state: dict[str, dict] = field(default_factory=dict)
    status: dict[str, str] = field(default_factory=dict)

    # -- table queries -------------------------------------------------------

    def potential_outcome(self, entity_id: str, t: int, a) -> float:
        key = (entity_id, t, mask_string(a) if not isinstance(a, str) else a)
        if key not in self.outcomes:
            raise GroundTruthError(f"no table entry for {key}")
        return self.outcomes[key]

    def cate(self, entity_id: str, t: int, k: int) -> float:
        """True one-step effect of single treatment k against no treatment."""
        one_hot = ["0"] * self.k
        one_hot[k] = "1"
        return (self.potential_outcome(entity_id, t, "".join(one_hot))
                - self.potential_outcome(entity_id, t, "0" * self.k))

    def interaction(self, entity_id: str, t: int, a) -> float:
        """Mixed effect minus the sum of its single-treatment effects, exactly."""
        bits = mask_bits(a) if isinstance(a, str) else np.asarray(a, dtype=np.int64)
        if bits.shape != (self.k,):
            raise GroundTruthError(f"treatment vector must have {self.k} bits")
        y0 = self.potential_outcome(entity_id, t, "0" * self.k)
        total = self.potential_outcome(entity_id, t, bits) - y0
        for k in range(self.k):
            if bits[k] == 1:
                total -= self.cate(entity_id, t, k)
        return total

    def entries(self):
        return self.outcomes.items()

    # -- counterfactual re-runs ----------------------------------------------

    def rerun_plan(self, entity_id: str, t_base: int, plan_bits: np.ndarray) -> np.ndarray:
        """Outcomes y_{t_base+1..t_base+H} under the plan, with factual noise."""
        state = self.entity_state.get(entity_id)
        if state is None:
            raise GroundTruthError(f"no saved state for entity {entity_id!r}")
        plan_bits = np.asarray(plan_bits, dtype=np.int64)
        horizon = plan_bits.shape[0]
        if t_base < 1 or t_base - 1 + horizon > len(state["noise"]):
            raise GroundTruthError(f"plan from t={t_base} horizon {horizon} leaves the recorded noise")
        if self.kind == "tumour":
            from .tumour import rerun_tumour_plan
            return rerun_tumour_plan(self.meta, state, t_base, plan_bits)
        if self.kind == "synthetic":
            from .synthetic import rerun_synthetic_plan
            return rerun_synthetic_plan(self.meta, state, t_base, plan_bits)
        raise GroundTruthError(f"unknown simulator kind {self.kind!r}")

    def plan_features(self, entity_id: str, t_base: int, plan_bits: np.ndarray) -> np.ndarray:
        """Raw interventional features implied by a plan, (H, d_v, k): the
        exogenous feature values the dynamics would apply over that window."""
        plan_bits = np.asarray(plan_bits, dtype=np.int64)
        state = self.entity_state[entity_id]
        vplan = np.asarray(state["vplan"])
        rows = vplan[t_base - 1: t_base - 1 + plan_bits.shape[0]]
        return rows[:, None, :].astype(np.float64)

    def objective(self) -> str:
        return "min" if self.kind == "tumour" else "max"

    def normalizer(self, test_y: np.ndarray | None = None) -> float:
        """Scale for percentage metrics: the maximum attainable outcome."""
        if self.kind == "tumour":
            return 1.05 * float(self.meta["k_cap"])
        if test_y is None or test_y.size == 0:
            raise GroundTruthError("synthetic normalizer needs test outcomes")
        return float(np.max(np.abs(test_y)))


def check_interaction_identity(table: GroundTruthTable, entity_id: str, t: int, a) -> float:
    """Recompute the interaction from raw potential outcomes (independent of
    the cate helper); used to verify the decomposition identity."""
    bits = np.asarray(a, dtype=np.int64)
    y0 = table.potential_outcome(entity_id, t, "0" * table.k)
    ya = table.potential_outcome(entity_id, t, bits)
    acc = ya - y0
    for k in range(table.k):
        if bits[k] == 1:
            one_hot = np.zeros(table.k, dtype=np.int64)
            one_hot[k] = 1
            acc -= table.potential_outcome(entity_id, t, one_hot) - y0
    return acc


# ---------------------------------------------------------------------------
# serialization

def save_ground_truth(table: GroundTruthTable, table_path, states_path) -> None:
    with open(table_path, "w") as fh:
        for (eid, t, mask), y in sorted(table.outcomes.items()):
            fh.write(json.dumps({"entity_id": eid, "t": t, "a": mask, "y": y},
                                separators=(",", ":")) + "\n")
    with open(states_path, "w") as fh:
        fh.write(json.dumps({"meta": {"kind": table.kind, "k": table.k, **table.meta}},
                            separators=(",", ":")) + "\n")
        for eid in sorted(table.entity_state):
            state = {key: (val.tolist() if isinstance(val, np.ndarray) else val)
                     for key, val in table.entity_state[eid].items()}
            fh.write(json.dumps({"entity_id": eid, "status": table.status.get(eid, "ok"),
                                 "state": state}, separators=(",", ":")) + "\n")


def load_ground_truth(table_path, states_path) -> GroundTruthTable:
    with open(states_path) as fh:
        header = json.loads(fh.readline())
        meta = header["meta"]
        kind, k = meta.pop("kind"), meta.pop("k")
        table = GroundTruthTable(k=k, kind=kind, meta=meta)
        for line in fh:
            rec = json.loads(line)
            table.entity_state[rec["entity_id"]] = {
                key: (np.asarray(val) if isinstance(val, list) else val)
                for key, val in rec["state"].items()
            }
            table.status[rec["entity_id"]] = rec["status"]
    with open(table_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                table.outcomes[(rec["entity_id"], int(rec["t"]), rec["a"])] = float(rec["y"])
            except (KeyError, ValueError) as exc:
                raise GroundTruthError(f"{table_path}: line {lineno}: {exc}") from exc
    return table


def sidecar_paths(dataset_path) -> tuple[str, str]:
    base = str(dataset_path)
    if base.endswith(".jsonl"):
        base = base[: -len(".jsonl")]
    return base + ".gt.jsonl", base + ".states.jsonl"
