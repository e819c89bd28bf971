"""Command-line entry points: simulate, train, evaluate, forecast, recommend, serve.

All randomness descends from the single ``--seed`` flag: the dataset split
uses the seed directly and training derives its streams from the same value
through a fixed SeedSequence spawn order. ``TCF_LOG`` sets log verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict

from . import data as dm
from . import reports
from .effects import Forecaster, evaluate, effect_dump, recommend_treatment
from .groundtruth import load_ground_truth, save_ground_truth, sidecar_paths
from .model import (CheckpointError, ModelConfig, load_checkpoint, save_checkpoint)
from .service import build_forecast_response, create_app
from .synthetic import SyntheticConfig, simulate_synthetic
from .training import TrainConfig, train
from .tumour import TumourParams, simulate_tumour

log = logging.getLogger("tcforecast")


def _setup_logging() -> None:
    level = os.environ.get("TCF_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")


DEFAULT_CONFIG = {
    "schema_version": 1,
    "model": {"d_r": 64, "d_z": 8, "tau_max": 5, "depth": 1},
    "train": asdict(TrainConfig()),
    "split": {"fractions": [0.7, 0.15, 0.15], "seed": 0},
}


def _load_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path:
        with open(path) as fh:
            user = json.load(fh)
        for section in ("model", "train", "split"):
            cfg[section].update(user.get(section, {}))
    return cfg


def _write_json(obj: dict, path: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if path:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    if args.model == "tumour":
        params = {}
        if args.config:
            with open(args.config) as fh:
                params = json.load(fh)
        params.update({"patients": args.patients, "steps": args.steps, "seed": args.seed,
                       "gamma_c": args.gamma_c, "gamma_r": args.gamma_r})
        dataset, table = simulate_tumour(TumourParams(**params))
    elif args.model == "synthetic":
        params = {}
        if args.config:
            with open(args.config) as fh:
                params = json.load(fh)
        params.update({"patients": args.patients, "steps": args.steps, "seed": args.seed})
        dataset, table = simulate_synthetic(SyntheticConfig(**params))
    else:
        raise SystemExit(f"unknown simulator {args.model!r}")
    dm.save_dataset(dataset, args.out)
    gt_path, states_path = sidecar_paths(args.out)
    save_ground_truth(table, gt_path, states_path)
    log.info("wrote %s (%d trajectories) + %s + %s", args.out, len(dataset), gt_path, states_path)
    print(json.dumps({"dataset": args.out, "ground_truth": gt_path, "states": states_path,
                      "trajectories": len(dataset)}))
    return 0


def cmd_train(args) -> int:
    if args.emit_default_config:
        _write_json(DEFAULT_CONFIG, args.out if args.out and args.out.endswith(".json") else None)
        return 0
    if not args.data or not args.out:
        raise SystemExit("train requires --data and --out")
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg["split"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    if args.deterministic:
        cfg["train"]["deterministic"] = True
    raw = dm.load_dataset(args.data)
    fingerprint = dm.dataset_fingerprint(args.data)
    train_raw, valid_raw, _ = dm.split(raw, tuple(cfg["split"]["fractions"]), cfg["split"]["seed"])
    stats = dm.fit_stats(train_raw)
    train_ds = dm.normalize(train_raw, stats)
    valid_ds = dm.normalize(valid_raw, stats) if len(valid_raw) else None
    model_config = ModelConfig(d_x=raw.d_x, d_v=raw.d_v, k=raw.k, **cfg["model"])
    train_config = TrainConfig(**cfg["train"])
    log.info("training on %d trajectories (%d held out)", len(train_ds),
             len(valid_raw) if valid_ds else 0)
    params, train_log = train(train_ds, model_config, train_config, valid=valid_ds)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(args.out, model_config, params, stats, asdict(train_config), fingerprint)
    with open(os.path.join(args.out, "train_log.jsonl"), "w") as fh:
        for entry in train_log:
            fh.write(json.dumps(entry) + "\n")
    fig_dir = os.path.join(args.out, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    reports.loss_curves_figure(train_log, os.path.join(fig_dir, "loss_curves.png"))
    print(json.dumps({"checkpoint": args.out, "epochs": len(train_log),
                      "final": train_log[-1] if train_log else None}))
    return 0


def _load_bundle_and_data(args):
    bundle = load_checkpoint(args.ckpt)
    dataset = dm.load_dataset(args.data)
    return bundle, dataset


def cmd_evaluate(args) -> int:
    bundle, dataset = _load_bundle_and_data(args)
    cfg = _load_config(args.config)
    _, _, test_raw = dm.split(dataset, tuple(cfg["split"]["fractions"]), cfg["split"]["seed"])
    if not len(test_raw):
        test_raw = dataset
    gt_path, states_path = sidecar_paths(args.data)
    ground_truth = None
    if os.path.exists(gt_path) and os.path.exists(states_path):
        ground_truth = load_ground_truth(gt_path, states_path)
    forecaster = Forecaster(bundle)
    taus = list(range(1, args.tau + 1))
    report = evaluate(forecaster, test_raw, ground_truth, taus)
    out_dir = args.out or "."
    os.makedirs(out_dir, exist_ok=True)
    _write_json(report.to_dict(), os.path.join(out_dir, "metrics.json"))
    with open(os.path.join(out_dir, "metrics.txt"), "w") as fh:
        fh.write(report.to_table() + "\n")
    with open(os.path.join(out_dir, "metrics.csv"), "w") as fh:
        fh.write(report.to_csv() + "\n")
    effect_dump(forecaster, test_raw, ground_truth, os.path.join(out_dir, "effects.jsonl"))
    reports.render_evaluation(report, forecaster, test_raw, ground_truth,
                              os.path.join(out_dir, "figures"))
    print(report.to_table())
    return 0


def _parse_plan(arg: str | None) -> list[dict]:
    if not arg:
        return []
    if os.path.exists(arg):
        with open(arg) as fh:
            return json.load(fh)
    return json.loads(arg)


def cmd_forecast(args) -> int:
    bundle, dataset = _load_bundle_and_data(args)
    if args.tau > bundle.config.tau_max:
        print(f"error: --tau {args.tau} exceeds checkpoint tau_max {bundle.config.tau_max}",
              file=sys.stderr)
        return 2
    try:
        traj = dataset.by_id(args.entity)
    except KeyError:
        print(f"error: unknown entity {args.entity!r}", file=sys.stderr)
        return 2
    forecaster = Forecaster(bundle)
    response = build_forecast_response(forecaster, traj, _parse_plan(args.plan),
                                       args.tau, bundle.fingerprint)
    print(json.dumps(response, indent=2))
    return 0


def cmd_recommend(args) -> int:
    bundle, dataset = _load_bundle_and_data(args)
    if args.tau > bundle.config.tau_max:
        print(f"error: --tau {args.tau} exceeds checkpoint tau_max {bundle.config.tau_max}",
              file=sys.stderr)
        return 2
    try:
        traj = dataset.by_id(args.entity)
    except KeyError:
        print(f"error: unknown entity {args.entity!r}", file=sys.stderr)
        return 2
    forecaster = Forecaster(bundle)
    ranked = recommend_treatment(forecaster, traj, traj.length, args.tau,
                                 objective=args.objective)
    print(json.dumps({
        "schema_version": 1,
        "model_fingerprint": bundle.fingerprint,
        "objective": args.objective,
        "ranked": [{"plan": {"a": list(p.bits), "offset": p.offset}, "score": p.score}
                   for p in ranked],
    }, indent=2))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    bundle, dataset = _load_bundle_and_data(args)
    app = create_app(bundle, dataset)
    uvicorn.run(app, host="127.0.0.1", port=args.port, log_level="warning")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tcf", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a dataset with ground-truth counterfactuals")
    p.add_argument("--model", choices=["tumour", "synthetic"], default="tumour")
    p.add_argument("--patients", type=int, default=500)
    p.add_argument("--steps", type=int, default=30)
    p.add_argument("--gamma-c", type=float, default=5.0, dest="gamma_c")
    p.add_argument("--gamma-r", type=float, default=5.0, dest="gamma_r")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train a model and write a checkpoint bundle")
    p.add_argument("--data")
    p.add_argument("--config", default=None)
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.add_argument("--emit-default-config", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics report with figures")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tau", type=int, default=3)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("forecast", help="forecast an entity under a plan (JSON to stdout)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--entity", required=True)
    p.add_argument("--tau", type=int, default=1)
    p.add_argument("--plan", default=None, help="JSON list of plan items, inline or a file path")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("recommend", help="rank candidate treatment plans (JSON to stdout)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--entity", required=True)
    p.add_argument("--tau", type=int, default=3)
    p.add_argument("--objective", choices=["min", "max"], default="min")
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("serve", help="start the HTTP inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (dm.DatasetError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
