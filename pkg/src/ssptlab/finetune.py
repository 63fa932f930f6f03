"""Stock-selection fine-tuning: combined regression/ranking loss and the
four parameter-freezing strategies.

One trading day is one batch (all N stocks). The ranking term is the exact
pairwise hinge over all N^2 ordered pairs, evaluated vectorized.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .backtest import BacktestConfig, BacktestError, run_backtest, sharpe
from .marketdata import Dataset
from .model import ModelConfig, SsptParams, forward, init_params, swap_head
from .optim import Adam
from .pretrain import (PretrainConfig, TrainRun, TrainingDiverged,
                       _select_features, feature_columns, with_indicator)


class FreezeStrategy(str, Enum):
    NONE = "none"
    EMBEDDING = "embedding"
    EMBEDDING_ATTENTION = "embedding-attention"
    FULL_EXTRACTOR = "full-extractor"

    def frozen_groups(self) -> list[str]:
        return {
            FreezeStrategy.NONE: [],
            FreezeStrategy.EMBEDDING: ["embedding"],
            FreezeStrategy.EMBEDDING_ATTENTION:
                ["embedding", "attention-1", "attention-2"],
            FreezeStrategy.FULL_EXTRACTOR:
                ["embedding", "attention-1", "ffn-1", "attention-2", "ffn-2"],
        }[self]


@dataclass
class FinetuneConfig:
    epsilon: float = 5.0
    lr: float = 1e-4
    strategy: FreezeStrategy = FreezeStrategy.NONE
    epochs: int = 100
    seed: int = 0
    feature_mode: str = "all"
    k: int = 5  # top-k for the validation backtest

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if isinstance(self.strategy, str):
            self.strategy = FreezeStrategy(self.strategy)


def regression_term(pred: Tensor, true: np.ndarray) -> Tensor:
    true = np.asarray(true, dtype=pred.dtype)
    if pred.shape != true.shape:
        raise ad.ShapeError(
            f"selection loss length mismatch: {pred.shape} vs {true.shape}"
        )
    return ad.tsum(ad.square(pred - Tensor(true)))


def ranking_term(pred: Tensor, true: np.ndarray) -> Tensor:
    """Sum over all ordered pairs of max(0, -(p_i - p_j)(r_i - r_j)).

    Self-pairs contribute exactly 0 and are not excluded. Depends only on
    pairwise prediction differences, so it is invariant to adding a common
    constant to every prediction.
    """
    true = np.asarray(true, dtype=pred.dtype)
    n = pred.shape[0]
    p_col = ad.reshape(pred, (n, 1))
    p_row = ad.reshape(pred, (1, n))
    dp = p_col - p_row
    dr = true[:, None] - true[None, :]
    return ad.tsum(ad.max_with_zero(ad.neg(dp * Tensor(dr))))


def selection_loss(pred: Tensor, true: np.ndarray, epsilon: float) -> Tensor:
    return regression_term(pred, true) + ranking_term(pred, true) * float(epsilon)


def partition_params(params: SsptParams, strategy: FreezeStrategy
                     ) -> tuple[list[str], list[str]]:
    """(frozen group names, tunable group names); the head is always tunable."""
    if "head-select" not in params.groups:
        raise ad.ShapeError("partition requires the 'select' head to be present")
    frozen = strategy.frozen_groups()
    for g in frozen:
        if g not in params.groups:
            raise ad.ShapeError(f"unknown parameter group '{g}'")
    tunable = [g for g in params.groups if g not in frozen]
    return frozen, tunable


def prepare_for_finetuning(params: SsptParams, seed: int) -> SsptParams:
    """Swap whatever pre-training heads exist for a fresh 'select' head."""
    heads = params.head_names()
    if not heads:
        raise ad.ShapeError("model has no head to swap")
    out = swap_head(params, heads[0], "select", 1, seed)
    for name in heads[1:]:
        del out.groups[f"head-{name}"]
    return out


def fresh_model(dataset: Dataset, cfg: FinetuneConfig) -> SsptParams:
    """Random-init model with a select head (the w/o-pre-training control)."""
    n_feat = len(feature_columns(cfg.feature_mode))
    mcfg = ModelConfig(input_dim=n_feat + 1, seq_len=dataset.config.lookback)
    return init_params(mcfg, {"select": 1}, seed=cfg.seed)


def _day_batches(dataset: Dataset, split: str, feature_mode: str):
    """Chronologically ordered (windows, returns) per trading day."""
    idx = dataset.split_indices(split)
    batches = []
    for g in dataset.days_of(idx):
        order = np.argsort(dataset.stock_index[g])
        g = g[order]
        windows = with_indicator(
            _select_features(dataset.windows[g], feature_mode)
        )
        batches.append((windows, dataset.returns[g]))
    return batches


def predict_days(params: SsptParams, batches) -> list[np.ndarray]:
    return [forward(params, w, "select").data.copy() for w, _ in batches]


def validation_sharpe(params: SsptParams, batches, k: int) -> float:
    """Sharpe of a top-k backtest; degenerate return series scores -inf."""
    preds = predict_days(params, batches)
    rets = [r for _, r in batches]
    try:
        report = run_backtest(preds, rets, BacktestConfig(k=k))
    except BacktestError:
        return float("-inf")
    return report.sharpe


def run_finetuning(dataset: Dataset, cfg: FinetuneConfig,
                   params: SsptParams) -> TrainRun:
    """Fine-tune with one optimizer step per trading day, chronological.

    ``params`` must already carry the 'select' head (see
    ``prepare_for_finetuning`` / ``fresh_model``). Validation selects the
    best epoch by backtest Sharpe ratio.
    """
    frozen, tunable = partition_params(params, cfg.strategy)
    train_batches = _day_batches(dataset, "train", cfg.feature_mode)
    valid_batches = _day_batches(dataset, "valid", cfg.feature_mode)
    opt = Adam(params.group_tensors(tunable), lr=cfg.lr)

    run = TrainRun(config={
        "kind": "finetune", **{k: str(v) if isinstance(v, Enum) else v
                               for k, v in cfg.__dict__.items()},
        "frozen_groups": ",".join(frozen),
        "tunable_param_count": params.n_params(tunable),
    })
    best = None
    for epoch in range(1, cfg.epochs + 1):
        epoch_loss = 0.0
        for step, (windows, rets) in enumerate(train_batches):
            try:
                pred = forward(params, windows, "select")
                loss = selection_loss(pred, rets, cfg.epsilon)
                opt.zero_grad()
                loss.backward()
                opt.step()
                epoch_loss += loss.item()
            except ad.NonFiniteError as e:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, day {step}: {e}"
                ) from e
        run.log.append((epoch, "train", "selection_loss",
                        epoch_loss / max(1, len(train_batches))))
        val_sr = validation_sharpe(params, valid_batches, cfg.k)
        run.log.append((epoch, "valid", "sharpe", val_sr))
        if best is None or val_sr > best:
            best = val_sr
            run.best_epoch = epoch
            run.best_value = val_sr
            run.best_params = params.copy()
    return run
