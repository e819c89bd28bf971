"""Matplotlib figure rendering for training logs and evaluation reports."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import Dataset
from .effects import Forecaster, MetricsReport
from .groundtruth import GroundTruthTable, all_masks, mask_bits


def _styled(ax, xlabel: str, ylabel: str, title: str = ""):
    ax.grid(True, alpha=0.3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)


def loss_curves_figure(log: list[dict], path) -> str:
    epochs = [e["epoch"] for e in log]
    fig, axes = plt.subplots(2, 2, figsize=(10, 7))
    axes[0, 0].plot(epochs, [e["L_y"] for e in log], label="outcome")
    axes[0, 0].plot(epochs, [e["total"] for e in log], label="total", linestyle="--")
    _styled(axes[0, 0], "epoch", "loss", "outcome / total")
    axes[0, 0].legend()
    axes[0, 1].plot(epochs, [e["L_a"] for e in log], color="tab:orange")
    _styled(axes[0, 1], "epoch", "loss", "treatment classification")
    axes[1, 0].plot(epochs, [e["L_d"] for e in log], color="tab:green")
    _styled(axes[1, 0], "epoch", "loss", "contrastive")
    val = [e["val_rmse"] for e in log]
    if any(v is not None for v in val):
        axes[1, 1].plot(epochs, val, color="tab:red", label="val RMSE")
    ax2 = axes[1, 1].twinx()
    ax2.plot(epochs, [e["lambda1"] for e in log], color="gray", alpha=0.6, label="lambda1")
    ax2.plot(epochs, [e["lambda2"] for e in log], color="black", alpha=0.6, label="lambda2")
    ax2.set_ylabel("lambda")
    _styled(axes[1, 1], "epoch", "val RMSE", "validation / schedule")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def metrics_figure(report: MetricsReport, path) -> str:
    taus = [h.tau for h in report.horizons]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    width = 0.35
    xs = np.arange(len(taus))
    axes[0].bar(xs - width / 2, [h.rmse_pct for h in report.horizons], width, label="factual RMSE%")
    if report.horizons[0].cf_rmse_pct is not None:
        axes[0].bar(xs + width / 2, [h.cf_rmse_pct for h in report.horizons], width,
                    label="counterfactual RMSE%")
    axes[0].set_xticks(xs, [str(t) for t in taus])
    _styled(axes[0], "horizon", "% of max outcome", "forecast error")
    axes[0].legend()
    if report.horizons[0].tr_acc is not None:
        axes[1].plot(taus, [h.tr_acc for h in report.horizons], "o-", label="treatment type")
        axes[1].plot(taus, [h.trt_acc for h in report.horizons], "s-", label="type + timing")
        axes[1].set_ylim(0, 1)
        axes[1].legend()
    _styled(axes[1], "horizon", "accuracy", "recommendation vs oracle")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def forecast_examples_figure(forecaster: Forecaster, test: Dataset,
                             ground_truth: GroundTruthTable | None, path,
                             n_entities: int = 4, horizon: int | None = None) -> str:
    horizon = horizon or forecaster.tau_max
    chosen = [traj for traj in test if traj.length - horizon >= 1][:n_entities]
    if not chosen:
        raise ValueError("no test entity long enough for the requested horizon")
    fig, axes = plt.subplots(len(chosen), 1, figsize=(9, 2.6 * len(chosen)), squeeze=False)
    for ax_row, traj in zip(axes, chosen):
        ax = ax_row[0]
        _, v, a, y = traj.arrays()
        t_base = traj.length - horizon
        _, states = forecaster.encode_states(traj, t_base)
        ts_hist = np.arange(1, t_base + 1)
        ax.plot(ts_hist, y[:t_base], "k-", label="observed")
        ts_fut = np.arange(t_base + 1, t_base + horizon + 1)
        plan_a = a[t_base - 1: t_base - 1 + horizon]
        plan_v = v[t_base - 1: t_base - 1 + horizon]
        ax.plot(ts_fut, forecaster.decode_raw(states, plan_a, plan_v), "b.-", label="factual plan")
        ax.plot(ts_fut, y[t_base: t_base + horizon], "k.", alpha=0.5)
        if ground_truth is not None:
            for mask in all_masks(forecaster.k):
                rows = np.tile(mask_bits(mask), (horizon, 1))
                v_rows = ground_truth.plan_features(traj.entity_id, t_base, rows)
                ax.plot(ts_fut, forecaster.decode_raw(states, rows, v_rows), "--", alpha=0.7,
                        label=f"plan {mask}")
        _styled(ax, "step", "outcome", traj.entity_id)
        ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def render_evaluation(report: MetricsReport, forecaster: Forecaster, test: Dataset,
                      ground_truth: GroundTruthTable | None, out_dir) -> list[str]:
    """Write the figure set for an evaluation run; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [metrics_figure(report, os.path.join(out_dir, "metrics_by_horizon.png"))]
    try:
        paths.append(forecast_examples_figure(
            forecaster, test, ground_truth, os.path.join(out_dir, "forecast_examples.png")))
    except ValueError:
        pass
    return paths
