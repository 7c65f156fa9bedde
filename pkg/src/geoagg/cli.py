"""Command-line front end: generate, train, predict, explain, bench, reproduce.

Every command is a pure function of its flags and input files; all randomness
comes from explicit seeds (flag, then the ``GA_SEED`` environment variable,
then the config value or documented default, in that order).  Model files
embed both the architecture and the training configuration, so ``predict``,
``explain`` and ``bench`` re-derive the exact train/test split from the model
file and the dataset alone.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .autodiff import ContractError
from .datasets import CsvFormatError, generate_gwr, generate_sl, load_csv, save_csv
from .explain import (
    RowBatch,
    geoshapley_explain,
    local_coefficients,
    make_shap_predictor,
    write_explanations_csv,
)
from .model import ModelConfig, load_params, save_params
from .pipeline import (
    TrainConfig,
    benchmark_inference,
    predict_ensemble,
    split_dataset,
    train,
    write_bench_csv,
    write_loss_csv,
    write_predictions_csv,
)
from .spatial import ContextPool, QueryPool, SequenceLookupError

__all__ = ["main", "DEFAULT_CONFIG", "load_config"]

DEFAULT_CONFIG = {
    "model": asdict(ModelConfig()),
    "train": asdict(TrainConfig()),
    "data": {"n": 2500, "gwr_seed": 42, "sl_seed": 7, "rho": 0.6},
    "predict": {"members": 8, "expansion": 1.25, "seed": 100},
    "explain": {"background": 30, "instances": 50, "seed": 200},
    "bench": {"lengths": [16, 32, 64, 128], "members": 8},
}


def _merge_strict(defaults: dict, user: dict, path: str = "") -> dict:
    merged = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}{key}"
        if key not in defaults:
            raise ContractError(f"unknown config key '{here}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ContractError(f"config key '{here}' must be an object")
            merged[key] = _merge_strict(defaults[key], value, here + ".")
        else:
            merged[key] = value
    return merged


def load_config(path=None) -> dict:
    """Defaults overlaid with a JSON config file; unknown keys are rejected."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    user = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(user, dict):
        raise ContractError("config file must hold a JSON object")
    return _merge_strict(DEFAULT_CONFIG, user)


def _resolve_seed(flag_value, config_value):
    """Precedence: command-line flag, then GA_SEED, then config/default."""
    if flag_value is not None:
        return int(flag_value)
    env = os.environ.get("GA_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ContractError(f"GA_SEED must be an integer, got {env!r}") from None
    return int(config_value)


def _load_model(path):
    params, config, train_dict = load_params(path)
    tc = TrainConfig(**train_dict) if train_dict else TrainConfig()
    return params, config, tc


def _split_pools(data_path, tc: TrainConfig):
    ds = load_csv(data_path)
    train_ds, test_ds = split_dataset(ds, tc.split, tc.seed)
    return train_ds, test_ds


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _cmd_gen(args) -> int:
    seed = _resolve_seed(args.seed, 42)
    if args.dataset == "gwr-r":
        ds = generate_gwr(args.n, seed)
    else:
        rho = 0.6 if args.rho is None else args.rho
        ds = generate_sl(args.n, seed, rho)
    save_csv(ds, args.out)
    print(f"wrote {ds.n} rows to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    model_cfg = ModelConfig(**cfg["model"])
    tc = TrainConfig(**cfg["train"])
    ds = load_csv(args.data)
    train_ds, _ = split_dataset(ds, tc.split, tc.seed)
    params, history = train(train_ds, model_cfg, tc)
    save_params(args.model_out, params, model_cfg, asdict(tc))
    loss_path = Path(args.model_out).with_suffix(".loss.csv")
    write_loss_csv(loss_path, history)
    final = history[-1] if history else float("nan")
    print(f"trained {tc.epochs} epochs on {train_ds.n} points "
          f"(final mse {final:.6g}); model -> {args.model_out}, losses -> {loss_path}")
    return 0


def _cmd_predict(args) -> int:
    params, model_cfg, tc = _load_model(args.model)
    train_ds, test_ds = _split_pools(args.data, tc)
    seed = _resolve_seed(args.seed, DEFAULT_CONFIG["predict"]["seed"])
    pred = predict_ensemble(
        params, model_cfg,
        QueryPool(test_ds.points), ContextPool(train_ds.points),
        members=args.members, expansion=args.expansion, seed=seed,
    )
    write_predictions_csv(args.out, pred)
    print(f"wrote {len(pred.ids)} predictions ({args.members} members) to {args.out}")
    return 0


def _cmd_explain(args) -> int:
    params, model_cfg, tc = _load_model(args.model)
    train_ds, test_ds = _split_pools(args.data, tc)
    seed = _resolve_seed(args.seed, DEFAULT_CONFIG["explain"]["seed"])
    result, beta = _run_explain(params, model_cfg, train_ds, test_ds,
                                n_background=args.background, seed=seed,
                                n_instances=None)
    write_explanations_csv(args.out, result, beta)
    print(f"wrote explanations for {len(result.ids)} rows to {args.out}")
    return 0


def _run_explain(params, model_cfg, train_ds, test_ds, n_background, seed,
                 n_instances=None):
    rng = np.random.default_rng([4, seed])
    bg_idx = rng.choice(train_ds.n, size=min(n_background, train_ds.n), replace=False)
    background = RowBatch.from_records([train_ds.points[i] for i in sorted(bg_idx)])

    inst_records = test_ds.points
    if n_instances is not None and n_instances < len(inst_records):
        pick = rng.choice(len(inst_records), size=n_instances, replace=False)
        inst_records = [inst_records[i] for i in sorted(pick)]
    instances = RowBatch.from_records(inst_records)

    predictor = make_shap_predictor(
        params, model_cfg, ContextPool(train_ds.points), QueryPool(inst_records),
        seed=seed,
    )
    result = geoshapley_explain(predictor, instances, background)
    beta = local_coefficients(result, instances, background)
    return result, beta


def _cmd_bench(args) -> int:
    if args.threads != 1:
        raise ContractError("only --threads 1 (serial benchmarking) is supported")
    params, model_cfg, tc = _load_model(args.model)
    train_ds, test_ds = _split_pools(args.data, tc)
    lengths = [int(tok) for tok in args.lengths.split(",")]
    context = ContextPool(train_ds.points)
    queries = QueryPool(test_ds.points)
    records = []
    for mode in ("on_the_fly", "precomputed"):
        records.extend(benchmark_inference(
            params, model_cfg, queries, context, lengths,
            members=args.members, cache_mode=mode,
            expansion=tc.expansion_factor,
        ))
    write_bench_csv(args.out, records)
    print(f"wrote {len(records)} timing rows to {args.out}")
    return 0


def _cmd_reproduce(args) -> int:
    cfg = load_config(args.config)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    model_cfg = ModelConfig(**cfg["model"])
    tc = TrainConfig(**cfg["train"])
    tc.seed = _resolve_seed(None, tc.seed)
    data_cfg = cfg["data"]

    runs = {
        "gwr": generate_gwr(data_cfg["n"], _resolve_seed(None, data_cfg["gwr_seed"])),
        "sl": generate_sl(data_cfg["n"], _resolve_seed(None, data_cfg["sl_seed"]),
                          data_cfg["rho"]),
    }
    for tag, ds in runs.items():
        data_path = outdir / f"{tag}_r.csv"
        save_csv(ds, data_path)
        train_ds, test_ds = split_dataset(ds, tc.split, tc.seed)
        params, history = train(train_ds, model_cfg, tc)
        save_params(outdir / f"model_{tag}.json", params, model_cfg, asdict(tc))
        write_loss_csv(outdir / f"loss_{tag}.csv", history)

        pred = predict_ensemble(
            params, model_cfg, QueryPool(test_ds.points), ContextPool(train_ds.points),
            members=cfg["predict"]["members"], expansion=cfg["predict"]["expansion"],
            seed=_resolve_seed(None, cfg["predict"]["seed"]),
        )
        write_predictions_csv(outdir / f"predictions_{tag}.csv", pred)
        print(f"[{tag}] trained and predicted {len(pred.ids)} rows")

        if tag == "gwr":
            result, beta = _run_explain(
                params, model_cfg, train_ds, test_ds,
                n_background=cfg["explain"]["background"],
                seed=_resolve_seed(None, cfg["explain"]["seed"]),
                n_instances=cfg["explain"]["instances"],
            )
            write_explanations_csv(outdir / "explanations_gwr.csv", result, beta)
            print(f"[gwr] explained {len(result.ids)} rows")
        else:
            context = ContextPool(train_ds.points)
            queries = QueryPool(test_ds.points)
            records = []
            for mode in ("on_the_fly", "precomputed"):
                records.extend(benchmark_inference(
                    params, model_cfg, queries, context, cfg["bench"]["lengths"],
                    members=cfg["bench"]["members"], cache_mode=mode,
                    expansion=tc.expansion_factor,
                ))
            write_bench_csv(outdir / "bench_sl.csv", records)
            print("[sl] benchmark written")
    print(f"reproduction artifacts in {outdir}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoagg",
        description="Geospatial tabular regression: generate, train, predict, "
                    "explain, benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset CSV")
    p.add_argument("--dataset", required=True, choices=["gwr-r", "sl-r"])
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--rho", type=float, default=None,
                   help="spatial-lag strength (sl-r only, default 0.6)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a model on the train split of a CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="run-config JSON (defaults used if omitted)")
    p.add_argument("--model-out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="ensemble predictions on the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--members", type=int, default=8)
    p.add_argument("--expansion", type=float, default=1.25)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("explain", help="location-aware Shapley explanations of the test split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--background", type=int, default=30)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_explain)

    p = sub.add_parser("bench", help="inference timing in both cache modes")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lengths", default="16,32,64,128",
                   help="comma-separated ascending sequence lengths")
    p.add_argument("--members", type=int, default=8)
    p.add_argument("--threads", type=int, default=1,
                   help="benchmark worker count (only 1 is supported)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("reproduce",
                       help="chain gen, train, predict, explain, bench with config defaults")
    p.add_argument("--config", default=None)
    p.add_argument("--outdir", required=True)
    p.set_defaults(func=_cmd_reproduce)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ContractError, CsvFormatError, SequenceLookupError,
            FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"geoagg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
