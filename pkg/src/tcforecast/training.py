"""Losses, gradient-reversal wiring, schedules, optimizer, and the train loop.

The reported objective is ``L_y - lambda1 * L_a + lambda2 * L_d``. The minus
sign is realized through the gradient-reversal layer: the backprop graph uses
``L_y + lambda1 * L_a + lambda2 * L_d`` with the classifier heads fed through
a unit-strength reversal, so the heads receive ``+lambda1 * grad(L_a)`` (they
minimize classification error) while the representation receives
``-lambda1 * grad(L_a)`` and adversarially maximizes it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape
from .corruption import corrupt_trajectory
from .data import Dataset, Trajectory
from .model import ModelConfig, Network, init_params


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, detail: str):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 64
    learning_rate: float = 5e-3
    lambda1_init: float = 0.1
    lambda2_init: float = 0.1
    schedule_rate: float = 0.05
    lambda1_cap: float = 1.0
    lambda2_cap: float = 1.0
    seed: int = 0
    deterministic: bool = True
    use_corruption: bool = True
    invert_ratio: bool = True
    decoder_windows: int = 2
    corrupt_positions: int = 1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.lambda1_init < 0 or self.lambda2_init < 0 or self.schedule_rate < 0:
            raise ValueError("lambda inits and schedule rate must be nonnegative")


@dataclass
class LossBreakdown:
    l_y: float
    l_a: float
    l_d: float
    total: float


def lambda_schedule(config: TrainConfig, epoch: int) -> tuple[float, float]:
    """Exponentially increasing, capped: min(init * exp(rate * epoch), cap)."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    growth = math.exp(config.schedule_rate * epoch)
    return (min(config.lambda1_init * growth, config.lambda1_cap),
            min(config.lambda2_init * growth, config.lambda2_cap))


# ---------------------------------------------------------------------------
# loss functions (graph builders)

def _treatment_nll(tape: Tape, heads: list[Node], targets: np.ndarray) -> Node:
    """Per-sample negative log-likelihood summed over the K two-way heads, (B,1)."""
    total = None
    for k, probs in enumerate(heads):
        onehot = np.zeros((targets.shape[0], 2))
        onehot[np.arange(targets.shape[0]), targets[:, k].astype(int)] = 1.0
        picked = ad.reduce_sum(ad.mul(probs, tape.constant(onehot)), axis=1, keepdims=True)
        nll = ad.neg(ad.log(picked))
        total = nll if total is None else ad.add(total, nll)
    return total


def loss_treatment(tape: Tape, heads: list[Node], targets: np.ndarray) -> Node:
    """Classification loss for one timestep, averaged over the batch."""
    return ad.mean(_treatment_nll(tape, heads, targets))


def loss_outcome(pred: Node, target: Node) -> Node:
    """Mean squared error."""
    return ad.mean(ad.square(ad.sub(pred, target)))


def _infonce_step(tape: Tape, net: Network, p: dict[str, Node], rep_f: Node, rep_c: Node,
                  a_t: np.ndarray, flip_mask: np.ndarray, y_next: np.ndarray,
                  invert_ratio: bool) -> Node:
    """Per-sample contrastive term for one timestep, (B,1).

    Sums over arm indices 0..K; the k=0 no-treatment arm has a zero anchor and
    zero medium block, so its log-ratio term is identically zero and only the
    k=1..K arms contribute.
    """
    k = net.config.k
    b = a_t.shape[0]
    a_node = tape.constant(a_t.astype(np.float64))
    a_corr = np.abs(a_t - flip_mask).astype(np.float64)
    z_f = net.head_medium(p, rep_f, a_node)
    z_c = net.head_medium(p, rep_c, tape.constant(a_corr))
    y_node = tape.constant(y_next.reshape(b, 1))
    sign = 1.0 if invert_ratio else -1.0
    total = None
    for arm in range(k):
        e_arm = np.zeros((b, k))
        e_arm[:, arm] = 1.0
        e_corr = np.abs(e_arm - flip_mask)
        zk_f = net.medium_block(z_f, arm)
        zk_c = net.medium_block(z_c, arm)
        anchor_k = ad.mul(ad.mul(tape.constant(a_t[:, arm: arm + 1].astype(np.float64)), zk_f), y_node)
        yhat_f = net.head_outcome(p, rep_f, tape.constant(e_arm))
        yhat_c = net.head_outcome(p, rep_c, tape.constant(e_corr))
        f_f = ad.clamp_min(ad.reduce_sum(ad.absolute(ad.sub(ad.mul(zk_f, yhat_f), anchor_k)),
                                         axis=1, keepdims=True), ad.EPS_FLOOR)
        f_c = ad.clamp_min(ad.reduce_sum(ad.absolute(ad.sub(ad.mul(zk_c, yhat_c), anchor_k)),
                                         axis=1, keepdims=True), ad.EPS_FLOOR)
        term = ad.scale(ad.sub(ad.log(f_f), ad.log(f_c)), sign)
        total = term if total is None else ad.add(total, term)
    return total


def loss_infonce(tape: Tape, anchors: list[Node], z_f_blocks: list[Node], z_c_blocks: list[Node],
                 yhat_f: list[Node], yhat_c: list[Node], invert_ratio: bool = True
                 ) -> tuple[Node, list[Node]]:
    """Standalone contrastive loss from prebuilt pieces; returns the scalar
    loss and the K+1 per-arm terms (arm 0 is the identically-zero baseline)."""
    sign = 1.0 if invert_ratio else -1.0
    terms = [tape.constant(0.0)]
    total = None
    for zk_f, zk_c, yf, yc, o_k in zip(z_f_blocks, z_c_blocks, yhat_f, yhat_c, anchors):
        f_f = ad.clamp_min(ad.reduce_sum(ad.absolute(ad.sub(ad.mul(zk_f, yf), o_k)),
                                         axis=1, keepdims=True), ad.EPS_FLOOR)
        f_c = ad.clamp_min(ad.reduce_sum(ad.absolute(ad.sub(ad.mul(zk_c, yc), o_k)),
                                         axis=1, keepdims=True), ad.EPS_FLOOR)
        term = ad.mean(ad.scale(ad.sub(ad.log(f_f), ad.log(f_c)), sign))
        terms.append(term)
        total = term if total is None else ad.add(total, term)
    if total is None:
        total = tape.constant(0.0)
    return total, terms


# ---------------------------------------------------------------------------
# full-batch objective

def batch_arrays(trajectories: list[Trajectory]) -> dict[str, np.ndarray]:
    xs, vs, As, ys = zip(*(traj.arrays() for traj in trajectories))
    return {"x": np.stack(xs), "v": np.stack(vs), "a": np.stack(As), "y": np.stack(ys)}


def flip_masks_from_records(records, t_len: int, k: int) -> np.ndarray:
    """(B, T, K) 0/1 array marking corrupted positions per step."""
    masks = np.zeros((len(records), t_len, k))
    for b, recs in enumerate(records):
        for rec in recs:
            masks[b, rec.t - 1, rec.position] = 1.0
    return masks


def total_loss(net: Network, fbatch: dict, cbatch: dict | None, flip_masks: np.ndarray | None,
               lambda1: float, lambda2: float, invert_ratio: bool = True,
               windows: list[tuple[int, int]] | None = None,
               tape: Tape | None = None
               ) -> tuple[Node, LossBreakdown, Tape, dict[str, Node]]:
    """Build the full objective graph for one batch.

    Returns the node to backpropagate, the reported breakdown (Eq-style
    ``total = L_y - lambda1 * L_a + lambda2 * L_d``), the tape, and the
    parameter leaf nodes.
    """
    tape = tape or Tape()
    p = net.param_nodes(tape)
    x, v, a, y = fbatch["x"], fbatch["v"], fbatch["a"], fbatch["y"]
    t_len = x.shape[1]
    reps_f, states_f = net.encoder_reps(tape, p, x, v, a)
    use_cf = cbatch is not None
    if use_cf:
        reps_c, _ = net.encoder_reps(tape, p, cbatch["x"], cbatch["v"], cbatch["a"])

    sq_parts: list[Node] = []
    ce_parts: list[Node] = []
    nce_parts: list[Node] = []
    for t in range(1, t_len + 1):
        rep = reps_f[t - 1]
        ce_parts.append(_treatment_nll(tape, net.head_treatments(p, rep, grl_lambda=1.0), a[:, t - 1]))
        if use_cf:
            ce_parts.append(_treatment_nll(
                tape, net.head_treatments(p, reps_c[t - 1], grl_lambda=1.0), cbatch["a"][:, t - 1]))
        if t <= t_len - 1:
            pred = net.head_outcome(p, rep, tape.constant(a[:, t - 1].astype(np.float64)))
            target = tape.constant(y[:, t].reshape(-1, 1))
            sq_parts.append(ad.square(ad.sub(pred, target)))
            if use_cf:
                nce_parts.append(_infonce_step(
                    tape, net, p, rep, reps_c[t - 1], a[:, t - 1], flip_masks[:, t - 1],
                    y[:, t], invert_ratio))

    for t0, horizon in windows or []:
        plan_a = a[:, t0 - 1: t0 - 1 + horizon]
        plan_v = v[:, t0 - 1: t0 - 1 + horizon]
        preds = net.decode_graph(tape, p, states_f[t0 - 1], plan_a, plan_v)
        for j, pred in enumerate(preds):
            target = tape.constant(y[:, t0 + j].reshape(-1, 1))
            sq_parts.append(ad.square(ad.sub(pred, target)))

    l_y = ad.mean(ad.concat(sq_parts, axis=0))
    l_a = ad.mean(ad.concat(ce_parts, axis=0))
    l_d = ad.mean(ad.concat(nce_parts, axis=0)) if nce_parts else tape.constant(0.0)

    backprop = ad.add(ad.add(l_y, ad.scale(l_a, lambda1)), ad.scale(l_d, lambda2))
    breakdown = LossBreakdown(
        l_y=float(l_y.value), l_a=float(l_a.value), l_d=float(l_d.value),
        total=float(l_y.value) - lambda1 * float(l_a.value) + lambda2 * float(l_d.value),
    )
    return backprop, breakdown, tape, p


# ---------------------------------------------------------------------------
# optimizer

class Adam:
    """Per-parameter adaptive step from first/second moment estimates."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            self.params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# training loop

def _length_groups(indices: list[int], dataset: Dataset) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i in indices:
        groups.setdefault(dataset.trajectories[i].length, []).append(i)
    return groups


def validation_rmse(net: Network, dataset: Dataset) -> float:
    """One-step-ahead RMSE over a (normalized) dataset, forward only."""
    errors = []
    for group in _length_groups(list(range(len(dataset))), dataset).values():
        arrs = batch_arrays([dataset.trajectories[i] for i in group])
        tape = Tape()
        p = net.param_nodes(tape)
        reps, _ = net.encoder_reps(tape, p, arrs["x"], arrs["v"], arrs["a"])
        for t in range(1, arrs["x"].shape[1]):
            pred = net.head_outcome(p, reps[t - 1], tape.constant(arrs["a"][:, t - 1].astype(np.float64)))
            errors.append(pred.value[:, 0] - arrs["y"][:, t])
    if not errors:
        return float("nan")
    stacked = np.concatenate(errors)
    return float(np.sqrt(np.mean(stacked ** 2)))


def train(dataset: Dataset, model_config: ModelConfig, train_config: TrainConfig,
          valid: Dataset | None = None) -> tuple[dict[str, np.ndarray], list[dict]]:
    """Train on a normalized dataset; returns final params and per-epoch log.

    All randomness descends from ``train_config.seed`` through a fixed
    SeedSequence spawn order (init, shuffling, corruption, decoder windows),
    so runs are bit-reproducible for a fixed seed.
    """
    root = np.random.SeedSequence(train_config.seed)
    ss_init, ss_order, ss_corrupt, ss_windows = root.spawn(4)
    params = init_params(model_config, np.random.default_rng(ss_init))
    net = Network(model_config, params)
    opt = Adam(params, lr=train_config.learning_rate)
    order_rng = np.random.default_rng(ss_order)
    corrupt_seeds = ss_corrupt.spawn(train_config.epochs)
    window_seeds = ss_windows.spawn(train_config.epochs)

    log: list[dict] = []
    for epoch in range(train_config.epochs):
        lam1, lam2 = lambda_schedule(train_config, epoch)
        corrupt_rng = np.random.default_rng(corrupt_seeds[epoch])
        window_rng = np.random.default_rng(window_seeds[epoch])
        perm = order_rng.permutation(len(dataset))
        groups = _length_groups([int(i) for i in perm], dataset)
        sums = np.zeros(4)
        batches = 0
        for t_len in sorted(groups):
            idxs = groups[t_len]
            for start in range(0, len(idxs), train_config.batch_size):
                chunk = idxs[start: start + train_config.batch_size]
                trajs = [dataset.trajectories[i] for i in chunk]
                fbatch = batch_arrays(trajs)
                cbatch = None
                flip = None
                if train_config.use_corruption:
                    corrupted, recs = zip(*(corrupt_trajectory(tr, corrupt_rng,
                                                               n_positions=train_config.corrupt_positions)
                                            for tr in trajs))
                    cbatch = batch_arrays(list(corrupted))
                    flip = flip_masks_from_records(list(recs), t_len, model_config.k)
                windows = []
                max_h = min(model_config.tau_max, t_len - 1)
                for _ in range(train_config.decoder_windows):
                    h = int(window_rng.integers(1, max_h + 1))
                    t0 = int(window_rng.integers(1, t_len - h + 1))
                    windows.append((t0, h))
                backprop, breakdown, tape, pnodes = total_loss(
                    net, fbatch, cbatch, flip, lam1, lam2,
                    invert_ratio=train_config.invert_ratio, windows=windows)
                if not np.isfinite(breakdown.total):
                    raise TrainingDiverged(epoch, batches, repr(breakdown))
                names = sorted(pnodes)
                grads = tape.gradients(backprop, [pnodes[n] for n in names])
                grad_map = dict(zip(names, grads))
                for name, g in grad_map.items():
                    if not np.all(np.isfinite(g)):
                        raise TrainingDiverged(epoch, batches, f"non-finite gradient for {name}")
                opt.step(grad_map)
                sums += [breakdown.l_y, breakdown.l_a, breakdown.l_d, breakdown.total]
                batches += 1
        entry = {
            "epoch": epoch,
            "L_y": sums[0] / batches,
            "L_a": sums[1] / batches,
            "L_d": sums[2] / batches,
            "total": sums[3] / batches,
            "val_rmse": validation_rmse(net, valid) if valid is not None and len(valid) else None,
            "lambda1": lam1,
            "lambda2": lam2,
        }
        log.append(entry)
    return params, log


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
