"""Pre-training tasks: stock-code / sector classification and window-mean
prediction from partially masked inputs, individually or jointly weighted.

Masking replaces every feature at a chosen time step with 0 and raises the
mask-indicator channel (the last input feature, 0 everywhere else), so the
trunk input width stays dataset-features + 1 across all tasks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .marketdata import Dataset, FEATURE_NAMES
from .model import ModelConfig, SsptParams, forward, init_params
from .optim import Adam

CLOSE_COL = FEATURE_NAMES.index("close")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    alpha: float = 1.0    # stock-code classification weight
    beta: float = 0.0     # sector classification weight
    gamma: float = 0.0    # window-mean prediction weight
    lr: float = 1e-3
    mask_rate: float = 0.3
    epochs: int = 100
    seed: int = 0
    feature_mode: str = "all"   # or "close-only"
    batch_size: int = 256
    map_style: str = "map"      # "mvp" reconstructs masked values instead
    pooling: str = "mean"
    activation: str = "relu"
    norm: str = "pre"
    dropout: float = 0.0        # applied during training batches only

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.gamma < 0:
            raise ValueError("loss coefficients must be >= 0")
        if not (0 <= self.dropout < 1):
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.alpha == 0 and self.beta == 0 and self.gamma == 0:
            raise ValueError("at least one task coefficient must be > 0")
        if not (0 < self.mask_rate <= 1):
            raise ValueError(f"mask rate must be in (0, 1], got {self.mask_rate}")

    @property
    def tasks(self) -> list[str]:
        out = []
        if self.alpha > 0:
            out.append("scc")
        if self.beta > 0:
            out.append("ssc")
        if self.gamma > 0:
            out.append("map")
        return out


@dataclass
class MaskPlan:
    """Per-sample masked time-step indices, round(rate*T) of them, min 1."""

    masked: np.ndarray  # (samples, n_masked) int
    rate: float

    @classmethod
    def sample(cls, n_samples: int, seq_len: int, rate: float, rng) -> "MaskPlan":
        k = max(1, int(round(rate * seq_len)))
        order = np.argsort(rng.random((n_samples, seq_len)), axis=1)
        return cls(masked=np.sort(order[:, :k], axis=1), rate=rate)

    def mask_matrix(self, seq_len: int) -> np.ndarray:
        m = np.zeros((self.masked.shape[0], seq_len), dtype=np.float32)
        np.put_along_axis(m, self.masked, 1.0, axis=1)
        return m


def with_indicator(windows: np.ndarray) -> np.ndarray:
    """Append an all-zero mask-indicator channel as the last feature."""
    pad = np.zeros(windows.shape[:2] + (1,), dtype=windows.dtype)
    return np.concatenate([windows, pad], axis=2)


def apply_mask(windows: np.ndarray, plan: MaskPlan) -> np.ndarray:
    """Zero all features at masked steps and set their indicator to 1.

    Input windows must NOT already carry the indicator channel.
    """
    seq_len = windows.shape[1]
    if plan.masked.max(initial=0) >= seq_len:
        raise ValueError("mask plan indices exceed window length")
    out = with_indicator(windows).copy()
    m = plan.mask_matrix(seq_len)  # (B, T)
    out[:, :, :-1] *= (1.0 - m)[:, :, None]
    out[:, :, -1] = m
    return out


def scc_loss(logits: Tensor, stock_index: np.ndarray) -> Tensor:
    return ad.cross_entropy(logits, stock_index)


def ssc_loss(logits: Tensor, sector_index: np.ndarray) -> Tensor:
    return ad.cross_entropy(logits, sector_index)


def map_target(windows: np.ndarray, close_col: int = CLOSE_COL) -> np.ndarray:
    """Mean of the window's normalized close prices (computed pre-masking)."""
    return windows[:, :, close_col].mean(axis=1)


def map_loss(predictions: Tensor, targets: np.ndarray) -> Tensor:
    targets = np.asarray(targets, dtype=predictions.dtype)
    if predictions.shape != targets.shape:
        raise ad.ShapeError(
            f"map_loss shape mismatch: {predictions.shape} vs {targets.shape}"
        )
    return ad.mean(ad.square(predictions - Tensor(targets)))


def mvp_loss(predictions: Tensor, true_close: np.ndarray,
             mask: np.ndarray) -> Tensor:
    """MSE over masked positions only.

    ``predictions`` is per-step head output (B, T); ``mask`` is the binary
    (B, T) matrix of masked steps.
    """
    mask = np.asarray(mask, dtype=predictions.dtype)
    true_close = np.asarray(true_close, dtype=predictions.dtype)
    diff = ad.square(predictions - Tensor(true_close)) * Tensor(mask)
    return ad.tsum(diff) * (1.0 / float(mask.sum()))


def combined_loss(losses: dict[str, Tensor], alpha: float, beta: float,
                  gamma: float) -> Tensor:
    if alpha == 0 and beta == 0 and gamma == 0:
        raise ValueError("combined loss needs at least one nonzero coefficient")
    total = None
    for coeff, key in ((alpha, "scc"), (beta, "ssc"), (gamma, "map")):
        if coeff == 0:
            continue
        term = losses[key] * float(coeff)
        total = term if total is None else total + term
    return total


@dataclass
class TrainRun:
    config: dict
    log: list[tuple[int, str, str, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_value: float = float("nan")
    best_params: SsptParams | None = None

    def metric(self, epoch: int, split: str, name: str) -> float:
        for e, s, m, v in self.log:
            if e == epoch and s == split and m == name:
                return v
        raise KeyError((epoch, split, name))

    def series(self, split: str, name: str) -> list[float]:
        return [v for _, s, m, v in self.log if s == split and m == name]

    def write_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,split,metric,value\n")
            for epoch, split, metric, value in self.log:
                f.write(f"{epoch},{split},{metric},{value!r}\n")


def feature_columns(mode: str) -> list[int]:
    if mode == "close-only":
        return [CLOSE_COL]
    if mode == "all":
        return list(range(len(FEATURE_NAMES)))
    raise ValueError(f"unknown feature mode '{mode}'")


def _select_features(windows: np.ndarray, mode: str) -> np.ndarray:
    cols = feature_columns(mode)
    return windows[:, :, cols]


def build_pretrain_model(dataset: Dataset, cfg: PretrainConfig) -> SsptParams:
    n_feat = len(feature_columns(cfg.feature_mode))
    mcfg = ModelConfig(
        input_dim=n_feat + 1, seq_len=dataset.config.lookback,
        pooling=cfg.pooling, activation=cfg.activation, norm=cfg.norm,
        dropout=cfg.dropout,
    )
    heads: dict[str, int] = {}
    if cfg.alpha > 0:
        heads["scc"] = dataset.n_stocks
    if cfg.beta > 0:
        heads["ssc"] = dataset.n_sectors
    if cfg.gamma > 0:
        heads["map"] = 1
    return init_params(mcfg, heads, seed=cfg.seed)


def _close_channel(dataset: Dataset, cfg: PretrainConfig) -> int:
    return feature_columns(cfg.feature_mode).index(CLOSE_COL)


def _batch_losses(params, cfg, windows, stock_idx, sector_idx, close_col,
                  mask_rng, dropout_rng=None):
    """Forward the trunk once and evaluate every active task on it."""
    losses: dict[str, Tensor] = {}
    use_mask = cfg.gamma > 0
    if use_mask:
        plan = MaskPlan.sample(len(windows), windows.shape[1], cfg.mask_rate,
                               mask_rng)
        target = map_target(windows, close_col)
        inputs = apply_mask(windows, plan)
    else:
        inputs = with_indicator(windows)

    if cfg.alpha > 0:
        losses["scc"] = scc_loss(
            forward(params, inputs, "scc", dropout_rng=dropout_rng), stock_idx)
    if cfg.beta > 0:
        losses["ssc"] = ssc_loss(
            forward(params, inputs, "ssc", dropout_rng=dropout_rng), sector_idx)
    if cfg.gamma > 0:
        if cfg.map_style == "mvp":
            preds = forward(params, inputs, "map", per_step=True,
                            dropout_rng=dropout_rng)
            losses["map"] = mvp_loss(
                preds, windows[:, :, close_col], plan.mask_matrix(windows.shape[1])
            )
        else:
            preds = forward(params, inputs, "map", dropout_rng=dropout_rng)
            losses["map"] = map_loss(preds, target)
    return losses


def _eval_epoch(params, cfg, windows, stock_idx, sector_idx, close_col,
                valid_mask_rng_seed, batch_size=1024):
    """Accuracy for classification heads, MSE for the prediction head.

    The masking plan for evaluation is drawn from a fixed seed so the MSE
    series is comparable across epochs.
    """
    out: dict[str, float] = {}
    n = len(windows)
    rng = np.random.default_rng(valid_mask_rng_seed)
    correct = {"scc": 0, "ssc": 0}
    sq_err_sum = 0.0
    mvp_num, mvp_den = 0.0, 0.0
    for start in range(0, n, batch_size):
        w = windows[start:start + batch_size]
        if cfg.gamma > 0:
            plan = MaskPlan.sample(len(w), w.shape[1], cfg.mask_rate, rng)
            inputs = apply_mask(w, plan)
        else:
            inputs = with_indicator(w)
        if cfg.alpha > 0:
            logits = forward(params, inputs, "scc").data
            pred = logits.argmax(axis=1)
            correct["scc"] += int((pred == stock_idx[start:start + len(w)]).sum())
        if cfg.beta > 0:
            logits = forward(params, inputs, "ssc").data
            pred = logits.argmax(axis=1)
            correct["ssc"] += int((pred == sector_idx[start:start + len(w)]).sum())
        if cfg.gamma > 0:
            if cfg.map_style == "mvp":
                preds = forward(params, inputs, "map", per_step=True).data
                m = plan.mask_matrix(w.shape[1])
                mvp_num += float((((preds - w[:, :, close_col]) ** 2) * m).sum())
                mvp_den += float(m.sum())
            else:
                preds = forward(params, inputs, "map").data
                target = map_target(w, close_col)
                sq_err_sum += float(((preds - target) ** 2).sum())
    if cfg.alpha > 0:
        out["scc_accuracy"] = correct["scc"] / n
    if cfg.beta > 0:
        out["ssc_accuracy"] = correct["ssc"] / n
    if cfg.gamma > 0:
        out["map_mse"] = mvp_num / mvp_den if cfg.map_style == "mvp" \
            else sq_err_sum / n
    return out


def _selection_metric(cfg: PretrainConfig, metrics: dict[str, float]):
    """(value, higher_is_better) in task-priority order."""
    if cfg.alpha > 0:
        return metrics["scc_accuracy"], True
    if cfg.beta > 0:
        return metrics["ssc_accuracy"], True
    return metrics["map_mse"], False


def run_pretraining(dataset: Dataset, cfg: PretrainConfig,
                    params: SsptParams | None = None) -> TrainRun:
    if params is None:
        params = build_pretrain_model(dataset, cfg)
    close_col = _close_channel(dataset, cfg)

    train_idx = dataset.split_indices("train")
    valid_idx = dataset.split_indices("valid")
    tr_windows = _select_features(dataset.windows[train_idx], cfg.feature_mode)
    va_windows = _select_features(dataset.windows[valid_idx], cfg.feature_mode)
    tr_stock = dataset.stock_index[train_idx]
    va_stock = dataset.stock_index[valid_idx]
    tr_sector = dataset.sector_of_stock[tr_stock]
    va_sector = dataset.sector_of_stock[va_stock]

    opt = Adam(params.tensors(), lr=cfg.lr)
    run = TrainRun(config={"kind": "pretrain", **cfg.__dict__})
    best = None
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(
            len(tr_windows)
        )
        mask_rng = np.random.default_rng([cfg.seed, epoch, 1])
        drop_rng = np.random.default_rng([cfg.seed, epoch, 2]) \
            if cfg.dropout > 0 else None
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start:start + cfg.batch_size]
            try:
                losses = _batch_losses(
                    params, cfg, tr_windows[sel], tr_stock[sel], tr_sector[sel],
                    close_col, mask_rng, dropout_rng=drop_rng,
                )
                total = combined_loss(losses, cfg.alpha, cfg.beta, cfg.gamma)
                opt.zero_grad()
                total.backward()
                opt.step()
            except ad.NonFiniteError as e:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {start // cfg.batch_size}: {e}"
                ) from e

        for split, w, si, se in (("train", tr_windows, tr_stock, tr_sector),
                                 ("valid", va_windows, va_stock, va_sector)):
            metrics = _eval_epoch(params, cfg, w, si, se, close_col,
                                  valid_mask_rng_seed=[cfg.seed, 2, 0])
            for name, value in metrics.items():
                run.log.append((epoch, split, name, value))
            if split == "valid":
                value, hib = _selection_metric(cfg, metrics)
                if best is None or (value > best if hib else value < best):
                    best = value
                    run.best_epoch = epoch
                    run.best_value = value
                    run.best_params = params.copy()
    return run
