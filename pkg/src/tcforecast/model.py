"""Forecasting network: balanced encoder, treatment heads, outcome head,
autoregressive decoder, and the effect-disentanglement block.

The encoder is a GRU over (covariates, interventional features, previous
treatment) triples; the current treatment is never an encoder input, so the
representation is structurally invariant to it. Treatment classifiers sit
behind a gradient-reversal layer during training. The outcome head is shared
between the encoder-side one-step prediction and every decoder step, which
forces the horizon-1 decode to equal the one-step prediction bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .data import History, NormStats

DENSITY_FLOOR = 1e-9
CHECKPOINT_FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_x: int
    d_v: int
    k: int
    d_r: int = 64
    d_z: int = 8
    tau_max: int = 5
    depth: int = 1

    def __post_init__(self):
        for name in ("d_x", "d_v", "k", "d_r", "d_z", "tau_max", "depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def enc_in(self) -> int:
        return self.d_x + self.d_v * self.k + self.k

    @property
    def dec_in(self) -> int:
        return 1 + self.d_v * self.k + self.k


@dataclass
class OutcomeSet:
    """Head evaluations at the no-treatment baseline, each single arm, and a
    requested treatment combination. All from the same outcome head."""

    a: tuple
    y0: float
    arms: list[float]
    combined: float


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)] for every tensor."""
    p: dict[str, np.ndarray] = {}
    for side, d_in0 in (("enc", config.enc_in), ("dec", config.dec_in)):
        for layer in range(config.depth):
            d_in = d_in0 if layer == 0 else config.d_r
            prefix = f"{side}.l{layer}"
            for gate in ("r", "z", "n"):
                p[f"{prefix}.W_{gate}"] = _uniform(rng, d_in, (d_in, config.d_r))
                p[f"{prefix}.U_{gate}"] = _uniform(rng, config.d_r, (config.d_r, config.d_r))
                p[f"{prefix}.b_{gate}"] = _uniform(rng, config.d_r, (config.d_r,))
    d_ya = config.d_r + config.k
    p["yhead.W1"] = _uniform(rng, d_ya, (d_ya, config.d_r))
    p["yhead.b1"] = _uniform(rng, d_ya, (config.d_r,))
    p["yhead.W2"] = _uniform(rng, config.d_r, (config.d_r, 1))
    p["yhead.b2"] = _uniform(rng, config.d_r, (1,))
    for k in range(config.k):
        p[f"ahead.{k}.W"] = _uniform(rng, config.d_r, (config.d_r, 2))
        p[f"ahead.{k}.b"] = _uniform(rng, config.d_r, (2,))
    p["zhead.W"] = _uniform(rng, d_ya, (d_ya, config.k * config.d_z))
    p["zhead.b"] = _uniform(rng, d_ya, (config.k * config.d_z,))
    return p


PARAM_GROUPS = {
    "theta_r": ("enc.", "dec."),
    "theta_a": ("ahead.",),
    "theta_y": ("yhead.",),
    "theta_z": ("zhead.",),
}


def param_group(name: str) -> str:
    for group, prefixes in PARAM_GROUPS.items():
        if name.startswith(prefixes):
            return group
    raise KeyError(name)


class Network:
    """Graph builders over a tape plus single-sample convenience wrappers."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.params = params

    # -- graph builders (batched) -------------------------------------------

    def param_nodes(self, tape: Tape) -> dict[str, Node]:
        return {name: tape.leaf(arr, name=name) for name, arr in sorted(self.params.items())}

    def _gru_step(self, p: dict[str, Node], prefix: str, x: Node, h: Node) -> Node:
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p[f"{prefix}.W_r"]), ad.matmul(h, p[f"{prefix}.U_r"])), p[f"{prefix}.b_r"]))
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, p[f"{prefix}.W_z"]), ad.matmul(h, p[f"{prefix}.U_z"])), p[f"{prefix}.b_z"]))
        n = ad.tanh(ad.add(ad.add(ad.matmul(x, p[f"{prefix}.W_n"]), ad.mul(r, ad.matmul(h, p[f"{prefix}.U_n"]))), p[f"{prefix}.b_n"]))
        return ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))

    def _recurrent(self, tape: Tape, p: dict[str, Node], side: str, inputs: list[Node],
                   init_states: list[Node] | None = None) -> tuple[list[Node], list[list[Node]]]:
        """Run the stacked GRU; returns top-layer states per step and the full
        per-step, per-layer state lists."""
        batch = inputs[0].value.shape[0]
        states = init_states
        if states is None:
            states = [tape.constant(np.zeros((batch, self.config.d_r))) for _ in range(self.config.depth)]
        states = list(states)
        top = []
        all_states = []
        for x in inputs:
            layer_in = x
            for layer in range(self.config.depth):
                states[layer] = self._gru_step(p, f"{side}.l{layer}", layer_in, states[layer])
                layer_in = states[layer]
            top.append(states[-1])
            all_states.append(list(states))
        return top, all_states

    def encoder_inputs(self, tape: Tape, x: np.ndarray, v: np.ndarray, a: np.ndarray) -> list[Node]:
        """Per-step encoder inputs (x_t, flat v_t, a_{t-1}); a_0 is the zero vector."""
        b, t_len = x.shape[0], x.shape[1]
        vflat = v.transpose(0, 1, 3, 2).reshape(b, t_len, self.config.k * self.config.d_v)
        nodes = []
        for t in range(t_len):
            a_prev = a[:, t - 1].astype(np.float64) if t > 0 else np.zeros((b, self.config.k))
            nodes.append(tape.constant(np.concatenate([x[:, t], vflat[:, t], a_prev], axis=1)))
        return nodes

    def encoder_reps(self, tape: Tape, p: dict[str, Node], x: np.ndarray, v: np.ndarray,
                     a: np.ndarray) -> tuple[list[Node], list[list[Node]]]:
        """Balanced representation at every step plus per-step layer states."""
        inputs = self.encoder_inputs(tape, x, v, a)
        return self._recurrent(tape, p, "enc", inputs)

    def head_outcome(self, p: dict[str, Node], rep: Node, a: Node) -> Node:
        h = ad.tanh(ad.add(ad.matmul(ad.concat([rep, a], axis=1), p["yhead.W1"]), p["yhead.b1"]))
        return ad.add(ad.matmul(h, p["yhead.W2"]), p["yhead.b2"])

    def head_treatments(self, p: dict[str, Node], rep: Node, grl_lambda: float | None = None) -> list[Node]:
        """Per-treatment two-way softmax heads; optionally behind gradient reversal."""
        if grl_lambda is not None:
            rep = ad.gradient_reversal(rep, grl_lambda)
        return [ad.softmax(ad.add(ad.matmul(rep, p[f"ahead.{k}.W"]), p[f"ahead.{k}.b"]), axis=1)
                for k in range(self.config.k)]

    def head_medium(self, p: dict[str, Node], rep: Node, a: Node) -> Node:
        """Medium representation: one d_z block per treatment, (B, k*d_z)."""
        return ad.tanh(ad.add(ad.matmul(ad.concat([rep, a], axis=1), p["zhead.W"]), p["zhead.b"]))

    def medium_block(self, z: Node, k: int) -> Node:
        return ad.take_cols(z, k * self.config.d_z, (k + 1) * self.config.d_z)

    def decode_graph(self, tape: Tape, p: dict[str, Node], layer_states: list[Node],
                     plan_a: np.ndarray, plan_v: np.ndarray) -> list[Node]:
        """Autoregressive rollout. Step j emits the outcome from the current
        state before consuming (own prediction, plan step j) as GRU input, so
        horizon 1 is exactly the encoder-side one-step prediction."""
        b, horizon = plan_a.shape[0], plan_a.shape[1]
        if horizon > self.config.tau_max:
            raise ValueError(f"horizon {horizon} exceeds tau_max {self.config.tau_max}")
        vflat = plan_v.transpose(0, 1, 3, 2).reshape(b, horizon, self.config.k * self.config.d_v)
        states = list(layer_states)
        outputs = []
        for j in range(horizon):
            a_j = tape.constant(plan_a[:, j].astype(np.float64))
            y_j = self.head_outcome(p, states[-1], a_j)
            outputs.append(y_j)
            if j + 1 < horizon:
                step_in = ad.concat([y_j, tape.constant(vflat[:, j]), a_j], axis=1)
                layer_in = step_in
                for layer in range(self.config.depth):
                    states[layer] = self._gru_step(p, f"dec.l{layer}", layer_in, states[layer])
                    layer_in = states[layer]
        return outputs

    # -- single-sample wrappers ---------------------------------------------

    def _history_batch(self, history: History) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = history.t
        x = history.covariates[None, :, :]
        v = history.features[None, :, :, :]
        a = np.zeros((1, t, self.config.k))
        a[0, : t - 1] = history.treatments
        # row t-1 (the current treatment) is never read: encoder inputs use a_{s-1}
        return x, v, a

    def encode_full(self, history: History) -> tuple[np.ndarray, list[np.ndarray]]:
        tape = Tape()
        p = self.param_nodes(tape)
        x, v, a = self._history_batch(history)
        reps, all_states = self.encoder_reps(tape, p, x, v, a)
        return reps[-1].value[0].copy(), [s.value.copy() for s in all_states[-1]]

    def encode(self, history: History) -> np.ndarray:
        """Balanced representation of the history (the current treatment is not an input)."""
        return self.encode_full(history)[0]

    def predict_treatments(self, rep: np.ndarray) -> np.ndarray:
        tape = Tape()
        p = self.param_nodes(tape)
        heads = self.head_treatments(p, tape.constant(rep[None, :]))
        return np.stack([h.value[0] for h in heads])

    def predict_outcome(self, rep: np.ndarray, a: np.ndarray) -> float:
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (self.config.k,) or not np.all((a == 0) | (a == 1)):
            raise ValueError(f"treatment vector must be {self.config.k} bits, got {a}")
        tape = Tape()
        p = self.param_nodes(tape)
        out = self.head_outcome(p, tape.constant(rep[None, :]), tape.constant(a[None, :]))
        return float(out.value[0, 0])

    def outcome_set(self, rep: np.ndarray, a: np.ndarray) -> OutcomeSet:
        """Exactly k+2 head evaluations: baseline, each single arm, and ``a``."""
        a = np.asarray(a, dtype=np.float64)
        y0 = self.predict_outcome(rep, np.zeros(self.config.k))
        arms = [self.predict_outcome(rep, np.eye(self.config.k)[k]) for k in range(self.config.k)]
        combined = self.predict_outcome(rep, a)
        return OutcomeSet(a=tuple(int(b) for b in a), y0=y0, arms=arms, combined=combined)

    def decode(self, layer_states: list[np.ndarray], plan_a: np.ndarray, plan_v: np.ndarray) -> np.ndarray:
        """Forecast over the plan horizon from encoder layer states."""
        plan_a = np.asarray(plan_a, dtype=np.float64)
        plan_v = np.asarray(plan_v, dtype=np.float64)
        tape = Tape()
        p = self.param_nodes(tape)
        states = [tape.constant(s) for s in layer_states]
        outs = self.decode_graph(tape, p, states, plan_a[None, :, :], plan_v[None, :, :, :])
        return np.array([o.value[0, 0] for o in outs])

    def decode_history(self, history: History, plan_a: np.ndarray, plan_v: np.ndarray) -> np.ndarray:
        _, states = self.encode_full(history)
        return self.decode(states, plan_a, plan_v)

    def medium_rep(self, rep: np.ndarray, a: np.ndarray) -> np.ndarray:
        tape = Tape()
        p = self.param_nodes(tape)
        z = self.head_medium(p, tape.constant(rep[None, :]), tape.constant(np.asarray(a, dtype=np.float64)[None, :]))
        return z.value[0].reshape(self.config.k, self.config.d_z)


def anchor(a: np.ndarray, z: np.ndarray, y_factual: float) -> np.ndarray:
    """Contrastive reference per treatment: O_k = a_k * Z_k * Y, zero when a_k = 0."""
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] * z * y_factual


def density_ratio(z_k: np.ndarray, y_hat: float, o_k: np.ndarray) -> float:
    """L1 distance between the scaled prediction and the anchor, floored at 1e-9."""
    return max(float(np.sum(np.abs(z_k * y_hat - o_k))), DENSITY_FLOOR)


# ---------------------------------------------------------------------------
# checkpointing

def save_checkpoint(directory, config: ModelConfig, params: dict[str, np.ndarray],
                    norm_stats: NormStats, train_config: dict, dataset_fingerprint: str) -> None:
    os.makedirs(directory, exist_ok=True)
    names = sorted(params)
    manifest = {
        "schema_version": 1,
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": asdict(config),
        "train_config": train_config,
        "norm_stats": norm_stats.to_dict(),
        "dataset_fingerprint": dataset_fingerprint,
        "blob_dtype": "<f8",
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = b"".join(np.ascontiguousarray(params[n], dtype="<f8").tobytes() for n in names)
    manifest["blob_bytes"] = len(blob)
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        fh.write(blob)


@dataclass
class CheckpointBundle:
    config: ModelConfig
    params: dict[str, np.ndarray]
    norm_stats: NormStats
    train_config: dict
    dataset_fingerprint: str
    fingerprint: str = field(default="")

    def network(self) -> Network:
        return Network(self.config, self.params)


def load_checkpoint(directory) -> CheckpointBundle:
    manifest_path = os.path.join(directory, "manifest.json")
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read manifest at {manifest_path}: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format {manifest.get('format_version')!r} not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})")
    with open(os.path.join(directory, "params.bin"), "rb") as fh:
        blob = fh.read()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob length {len(blob)} disagrees with manifest {manifest['blob_bytes']}")
    expected = sum(int(np.prod(e["shape"])) for e in manifest["params"]) * 8
    if len(blob) != expected:
        raise CheckpointError(f"blob length {len(blob)} disagrees with declared shapes ({expected})")
    params = {}
    offset = 0
    for entry in manifest["params"]:
        size = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=offset).reshape(entry["shape"]).copy()
        params[entry["name"]] = arr
        offset += size * 8
    config = ModelConfig(**manifest["model_config"])
    stats = NormStats.from_dict(manifest["norm_stats"])
    fp = hashlib.sha256(blob + json.dumps(manifest["model_config"], sort_keys=True).encode()).hexdigest()
    return CheckpointBundle(
        config=config, params=params, norm_stats=stats,
        train_config=manifest["train_config"],
        dataset_fingerprint=manifest["dataset_fingerprint"],
        fingerprint=fp,
    )
