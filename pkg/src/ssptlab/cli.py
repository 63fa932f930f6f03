"""Command-line front end: ingest, pretrain, finetune, backtest, simulate,
gridsearch, report.

Configs are flat UTF-8 ``key = value`` text with ``#`` comments; repeating
a key forms a list. ``--set key=value`` overrides, ``--seed`` overrides the
seed, and the fully resolved config is echoed to the output directory
before any work starts. Exit codes: 0 success, 1 usage error, 2 data or
validation error.
"""

from __future__ import annotations

import argparse
import itertools
import sys
import time
from pathlib import Path

import numpy as np

from .backtest import (BacktestConfig, BacktestError, BacktestReport,
                       market_baseline, run_backtest, split_day_returns)
from .finetune import (FinetuneConfig, FreezeStrategy, _day_batches,
                       fresh_model, predict_days, prepare_for_finetuning,
                       run_finetuning)
from .marketdata import (DataError, DatasetConfig, build_windows, hash_inputs,
                         load_dataset, load_price_csv, load_sector_csv,
                         save_dataset, write_manifest)
from .model import load_checkpoint, save_checkpoint
from .pretrain import PretrainConfig, run_pretraining
from .simlab import ScenarioConfig, run_scenario, sigma_sweep, write_scenario_csv


class UsageError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, list[str]]:
    """Flat key = value lines; repeated keys accumulate into lists."""
    out: dict[str, list[str]] = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {ln}: expected 'key = value'")
        key, _, value = line.partition("=")
        out.setdefault(key.strip(), []).append(value.strip())
    return out


class Config:
    """Raw key/value store with typed accessors and unknown-key rejection."""

    def __init__(self, raw: dict[str, list[str]]):
        self.raw = raw
        self.used: set[str] = set()

    def _get(self, key: str, default):
        self.used.add(key)
        if key not in self.raw:
            if default is _REQUIRED:
                raise UsageError(f"missing required config key '{key}'")
            return None
        return self.raw[key]

    def str(self, key, default=None) -> str | None:
        v = self._get(key, default)
        if v is None:
            return default
        if len(v) > 1:
            raise UsageError(f"key '{key}' given {len(v)} times, expected once")
        return v[0]

    def int(self, key, default=None):
        v = self.str(key, None)
        return default if v is None else int(v)

    def float(self, key, default=None):
        v = self.str(key, None)
        return default if v is None else float(v)

    def bool(self, key, default=None):
        v = self.str(key, None)
        if v is None:
            return default
        if v.lower() not in ("true", "false"):
            raise UsageError(f"key '{key}' must be true/false, got '{v}'")
        return v.lower() == "true"

    def float_list(self, key, default) -> list[float]:
        v = self._get(key, None)
        return default if v is None else [float(x) for x in v]

    def str_list(self, key, default) -> list[str]:
        v = self._get(key, None)
        return default if v is None else list(v)

    def reject_unknown(self) -> None:
        unknown = set(self.raw) - self.used
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")


class _Required:
    pass


_REQUIRED = _Required()


def _echo_resolved(out_dir: Path, values: dict) -> None:
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    (out_dir / "resolved.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sidecar_log(out_dir: Path, message: str) -> None:
    # The only place wall-clock time is allowed to appear.
    with open(out_dir / "run.log", "a", encoding="utf-8") as f:
        f.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


def cmd_ingest(cfg: Config, out_dir: Path, seed: int) -> None:
    data_dir = Path(cfg.str("data_dir", _REQUIRED))
    sector_file = Path(cfg.str("sector_file", _REQUIRED))
    dcfg = DatasetConfig(
        lookback=cfg.int("lookback", 16),
        train_range=(cfg.str("train_start", _REQUIRED),
                     cfg.str("train_end", _REQUIRED)),
        valid_range=(cfg.str("valid_start", _REQUIRED),
                     cfg.str("valid_end", _REQUIRED)),
        test_range=(cfg.str("test_start", _REQUIRED),
                    cfg.str("test_end", _REQUIRED)),
    )
    cfg.reject_unknown()
    _echo_resolved(out_dir, {
        "command": "ingest", "data_dir": data_dir, "sector_file": sector_file,
        "lookback": dcfg.lookback, "train": dcfg.train_range,
        "valid": dcfg.valid_range, "test": dcfg.test_range, "seed": seed,
    })
    files = sorted(data_dir.glob("*.csv"))
    if not files:
        raise DataError(f"no .csv price files in {data_dir}")
    universe = [load_price_csv(p) for p in files]
    sectors = load_sector_csv(sector_file)
    digest = hash_inputs(list(files) + [sector_file])
    dataset = build_windows(universe, dcfg, sectors, content_hash=digest)
    save_dataset(dataset, out_dir / "dataset.npz")
    write_manifest(dataset, out_dir / "manifest.txt")
    print(f"ingested {dataset.n_stocks} stocks, "
          f"{len(dataset.windows)} samples -> {out_dir / 'dataset.npz'}")


def cmd_pretrain(cfg: Config, out_dir: Path, seed: int) -> None:
    dataset_path = Path(cfg.str("dataset", _REQUIRED))
    pcfg = PretrainConfig(
        alpha=cfg.float("alpha", 1.0),
        beta=cfg.float("beta", 0.0),
        gamma=cfg.float("gamma", 0.0),
        lr=cfg.float("lr", 1e-3),
        mask_rate=cfg.float("mask_rate", 0.3),
        epochs=cfg.int("epochs", 100),
        seed=seed,
        feature_mode=cfg.str("feature_mode", "all"),
        batch_size=cfg.int("batch_size", 256),
        map_style=cfg.str("map_style", "map"),
        dropout=cfg.float("dropout", 0.0),
    )
    cfg.reject_unknown()
    _echo_resolved(out_dir, {"command": "pretrain",
                             "dataset": dataset_path, **pcfg.__dict__})
    dataset = load_dataset(dataset_path)
    run = run_pretraining(dataset, pcfg)
    run.write_log(out_dir / "trainrun.csv")
    save_checkpoint(out_dir / "checkpoint.sspt", run.best_params,
                    digest=dataset.content_hash, log=run.log)
    print(f"pretrain done: best epoch {run.best_epoch}, "
          f"metric {run.best_value:.6g}")


def _load_finetune_model(cfg: Config, dataset, fcfg: FinetuneConfig,
                         checkpoint: str | None):
    if checkpoint:
        path = Path(checkpoint)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        params, _, _, _ = load_checkpoint(path)
        return prepare_for_finetuning(params, seed=fcfg.seed)
    return fresh_model(dataset, fcfg)


def cmd_finetune(cfg: Config, out_dir: Path, seed: int) -> None:
    dataset_path = Path(cfg.str("dataset", _REQUIRED))
    checkpoint = cfg.str("checkpoint", None)
    fcfg = FinetuneConfig(
        epsilon=cfg.float("epsilon", 5.0),
        lr=cfg.float("lr", 1e-4),
        strategy=FreezeStrategy(cfg.str("strategy", "none")),
        epochs=cfg.int("epochs", 100),
        seed=seed,
        feature_mode=cfg.str("feature_mode", "all"),
        k=cfg.int("k", 5),
    )
    cfg.reject_unknown()
    _echo_resolved(out_dir, {
        "command": "finetune", "dataset": dataset_path,
        "checkpoint": checkpoint or "", **{k: str(v)
                                          for k, v in fcfg.__dict__.items()},
    })
    dataset = load_dataset(dataset_path)
    params = _load_finetune_model(cfg, dataset, fcfg, checkpoint)
    run = run_finetuning(dataset, fcfg, params)
    run.write_log(out_dir / "trainrun.csv")
    save_checkpoint(out_dir / "checkpoint.sspt", run.best_params,
                    digest=dataset.content_hash, log=run.log)
    print(f"finetune done: tunable params {run.config['tunable_param_count']}, "
          f"best epoch {run.best_epoch}, valid sharpe {run.best_value:.4f}")


def _predictions_from_csv(path: Path, dataset, split: str):
    """Rows `date,ticker,prediction` -> one vector per split day."""
    table: dict[tuple[str, str], float] = {}
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.lower() == "date,ticker,prediction":
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise DataError(f"{path}:{ln}: expected 'date,ticker,prediction'")
        table[(parts[0].strip(), parts[1].strip())] = float(parts[2])
    _, labels = split_day_returns(dataset, split)
    preds = []
    for date in labels:
        row = []
        for ticker in dataset.tickers:
            key = (date, ticker)
            if key not in table:
                raise DataError(f"{path}: missing prediction for {ticker} on {date}")
            row.append(table[key])
        preds.append(np.array(row))
    return preds


def cmd_backtest(cfg: Config, out_dir: Path, seed: int) -> None:
    dataset_path = Path(cfg.str("dataset", _REQUIRED))
    checkpoint = cfg.str("checkpoint", None)
    predictions_csv = cfg.str("predictions", None)
    split = cfg.str("split", "test")
    bcfg = BacktestConfig(
        k=cfg.int("k", 5),
        risk_free=cfg.float("risk_free", 0.0),
        annualize=cfg.bool("annualize", True),
    )
    feature_mode = cfg.str("feature_mode", "all")
    cfg.reject_unknown()
    if (checkpoint is None) == (predictions_csv is None):
        raise UsageError("backtest needs exactly one of checkpoint/predictions")
    _echo_resolved(out_dir, {
        "command": "backtest", "dataset": dataset_path, "split": split,
        "checkpoint": checkpoint or "", "predictions": predictions_csv or "",
        "k": bcfg.k, "risk_free": bcfg.risk_free, "annualize": bcfg.annualize,
        "feature_mode": feature_mode, "seed": seed,
    })
    dataset = load_dataset(dataset_path)
    rets, labels = split_day_returns(dataset, split)
    if predictions_csv:
        preds = _predictions_from_csv(Path(predictions_csv), dataset, split)
    else:
        path = Path(checkpoint)
        if not path.exists():
            raise DataError(f"checkpoint not found: {path}")
        params, _, _, _ = load_checkpoint(path)
        preds = predict_days(params, _day_batches(dataset, split, feature_mode))
    report = run_backtest(preds, rets, bcfg, labels)
    baseline = market_baseline(dataset, split, bcfg)
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out_dir / "baseline.json").write_text(baseline.to_json(), encoding="utf-8")
    report.write_csv(out_dir / "daily.csv")
    print(f"backtest ({split}): irr_sum {report.irr_sum:.4f}, "
          f"irr_mean {report.irr_mean:.4f}, sharpe {report.sharpe:.4f} "
          f"(market sharpe {baseline.sharpe:.4f})")


def cmd_simulate(cfg: Config, out_dir: Path, seed: int) -> None:
    task = cfg.str("sim_task", "scenario")
    base = ScenarioConfig(
        n_series=cfg.int("n_series", 10),
        mode=cfg.str("mode", "differing-params"),
        slice_len=cfg.int("slice_len", 16),
        repetitions=cfg.int("repetitions", 5),
        steps=cfg.int("steps", 1260),
        epochs=cfg.int("epochs", 80),
        lr=cfg.float("lr", 1e-3),
        dropout=cfg.float("dropout", 0.2),
        seed=seed,
    )
    widths = cfg.float_list("width", [0.05, 0.1, 0.2, 0.4])
    sigma_min = cfg.float("sigma_min", 0.1)
    mu = cfg.float("mu", 0.1)
    cfg.reject_unknown()
    _echo_resolved(out_dir, {
        "command": "simulate", "sim_task": task, **base.__dict__,
        "widths": widths, "sigma_min": sigma_min, "mu_fixed": mu,
    })
    rows = []
    if task == "scenario":
        result = run_scenario(base)
        for rep, acc in enumerate(result.accuracies):
            rows.append((base.mode, base.n_series, 0.0, rep, acc))
        print(f"scenario {base.mode} N={base.n_series}: "
              f"mean accuracy {result.mean_accuracy:.4f}")
    elif task == "sigma-sweep":
        results = sigma_sweep(widths, sigma_min=sigma_min, mu=mu,
                              n_series=base.n_series, base=base)
        for width, result in results.items():
            for rep, acc in enumerate(result.accuracies):
                rows.append(("sigma-sweep", base.n_series, width, rep, acc))
            print(f"width {width:g}: mean accuracy {result.mean_accuracy:.4f}")
    else:
        raise UsageError(f"unknown sim_task '{task}'")
    write_scenario_csv(out_dir / "scenario.csv", rows)


def cmd_gridsearch(cfg: Config, out_dir: Path, seed: int) -> None:
    """Cartesian product over finetune hyper-parameter lists; the winner by
    validation Sharpe gets the single test-split evaluation."""
    dataset_path = Path(cfg.str("dataset", _REQUIRED))
    checkpoint = cfg.str("checkpoint", None)
    lrs = cfg.float_list("lr", [1e-4])
    epsilons = cfg.float_list("epsilon", [5.0])
    strategies = cfg.str_list("strategy", ["none"])
    epochs = cfg.int("epochs", 100)
    feature_mode = cfg.str("feature_mode", "all")
    k = cfg.int("k", 5)
    cfg.reject_unknown()
    _echo_resolved(out_dir, {
        "command": "gridsearch", "dataset": dataset_path,
        "checkpoint": checkpoint or "", "lr": lrs, "epsilon": epsilons,
        "strategy": strategies, "epochs": epochs,
        "feature_mode": feature_mode, "k": k, "seed": seed,
    })
    dataset = load_dataset(dataset_path)
    rows = []
    best = None
    for lr, eps, strat in itertools.product(lrs, epsilons, strategies):
        fcfg = FinetuneConfig(epsilon=eps, lr=lr, strategy=FreezeStrategy(strat),
                              epochs=epochs, seed=seed,
                              feature_mode=feature_mode, k=k)
        params = _load_finetune_model(cfg, dataset, fcfg, checkpoint)
        run = run_finetuning(dataset, fcfg, params)
        rows.append((lr, eps, strat, run.best_epoch, run.best_value))
        if best is None or run.best_value > best[0]:
            best = (run.best_value, fcfg, run)
    with open(out_dir / "grid.csv", "w", encoding="utf-8") as f:
        f.write("lr,epsilon,strategy,best_epoch,valid_sharpe\n")
        for lr, eps, strat, be, sr in rows:
            f.write(f"{lr!r},{eps!r},{strat},{be},{sr!r}\n")
    _, best_cfg, best_run = best
    preds = predict_days(best_run.best_params,
                         _day_batches(dataset, "test", feature_mode))
    rets, labels = split_day_returns(dataset, "test")
    report = run_backtest(preds, rets, BacktestConfig(k=k), labels)
    (out_dir / "best_report.json").write_text(report.to_json(), encoding="utf-8")
    save_checkpoint(out_dir / "best_checkpoint.sspt", best_run.best_params,
                    digest=dataset.content_hash, log=best_run.log)
    print(f"gridsearch: best lr={best_cfg.lr:g} epsilon={best_cfg.epsilon:g} "
          f"strategy={best_cfg.strategy.value} valid sharpe {best_run.best_value:.4f}; "
          f"test sharpe {report.sharpe:.4f}")


def cmd_report(cfg: Config, out_dir: Path, seed: int) -> None:
    report_path = Path(cfg.str("report", _REQUIRED))
    cfg.reject_unknown()
    if not report_path.exists():
        raise DataError(f"report not found: {report_path}")
    _echo_resolved(out_dir, {"command": "report", "report": report_path,
                             "seed": seed})
    report = BacktestReport.from_json(report_path.read_text(encoding="utf-8"))
    report.write_csv(out_dir / "daily.csv")
    print(f"days {report.days}, k {report.k}, irr_sum {report.irr_sum:.4f}, "
          f"irr_mean {report.irr_mean:.4f}, sharpe {report.sharpe:.4f}")


COMMANDS = {
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "backtest": cmd_backtest,
    "simulate": cmd_simulate,
    "gridsearch": cmd_gridsearch,
    "report": cmd_report,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ssptlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        raw: dict[str, list[str]] = {}
        if args.config is not None:
            if not args.config.exists():
                raise UsageError(f"config file not found: {args.config}")
            raw = parse_config_text(args.config.read_text(encoding="utf-8"))
        overridden: set[str] = set()
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set expects KEY=VALUE, got '{item}'")
            key, _, value = item.partition("=")
            key = key.strip()
            # The first --set for a key replaces the config-file value;
            # repeating --set key=... accumulates a list, like repeated
            # config lines (used for gridsearch axes).
            if key in overridden:
                raw[key].append(value.strip())
            else:
                raw[key] = [value.strip()]
                overridden.add(key)
        cfg = Config(raw)
        seed = args.seed if args.seed is not None else cfg.int("seed", 0)
        cfg.used.add("seed")
        out_dir = args.out
        out_dir.mkdir(parents=True, exist_ok=True)
        _sidecar_log(out_dir, f"start {args.command}")
        COMMANDS[args.command](cfg, out_dir, seed)
        _sidecar_log(out_dir, f"done {args.command}")
        return 0
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, BacktestError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
