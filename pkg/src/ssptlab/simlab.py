"""Geometric Brownian motion simulation and controlled classification
experiments on the generated series.

Normal draws use an explicit Box-Muller transform over a seeded PCG64
stream, so series reproduce bit-exactly across platforms regardless of the
numpy version's default normal sampler.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .marketdata import DataError, Dataset, DatasetConfig, Normalizer, PriceSeries
from .pretrain import PretrainConfig, run_pretraining


@dataclass
class GbmConfig:
    s0: float = 100.0
    mu: float = 0.05        # expected return per unit time
    sigma: float = 0.2      # volatility per sqrt(time)
    dt: float = 1.0 / 252.0
    steps: int = 1260
    seed: int = 0

    def __post_init__(self):
        if self.s0 <= 0:
            raise ValueError(f"initial price must be > 0, got {self.s0}")
        if self.sigma < 0:
            raise ValueError(f"volatility must be >= 0, got {self.sigma}")
        if self.dt <= 0:
            raise ValueError(f"time increment must be > 0, got {self.dt}")


def box_muller(rng, n: int) -> np.ndarray:
    """n standard-normal draws via the Box-Muller transform."""
    m = (n + 1) // 2
    u1 = 1.0 - rng.random(m)  # (0, 1]: keeps the log finite
    u2 = rng.random(m)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2.0 * np.pi * u2),
                        r * np.sin(2.0 * np.pi * u2)])
    return z[:n]


def gbm_series(cfg: GbmConfig, rng=None) -> np.ndarray:
    """Price path of length steps+1 starting at s0."""
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    z = box_muller(rng, cfg.steps)
    log_inc = (cfg.mu - cfg.sigma**2 / 2.0) * cfg.dt \
        + cfg.sigma * np.sqrt(cfg.dt) * z
    log_path = np.concatenate([[0.0], np.cumsum(log_inc)])
    return cfg.s0 * np.exp(log_path)


@dataclass
class ScenarioConfig:
    n_series: int = 10
    mode: str = "differing-params"   # or "identical-params"
    mu_range: tuple[float, float] = (0.0, 0.2)
    sigma_range: tuple[float, float] = (0.1, 0.3)
    slice_len: int = 16
    repetitions: int = 5
    s0: float = 100.0
    dt: float = 1.0 / 252.0
    steps: int = 1260
    holdout_fraction: float = 0.2
    epochs: int = 80
    lr: float = 1e-3
    batch_size: int = 64
    dropout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("identical-params", "differing-params"):
            raise ValueError(f"unknown scenario mode '{self.mode}'")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        for lo, hi in (self.mu_range, self.sigma_range):
            if lo > hi:
                raise ValueError(f"invalid parameter range ({lo}, {hi})")
        if self.slice_len > self.steps:
            raise DataError(
                f"slice length {self.slice_len} exceeds series length {self.steps}"
            )


def _slice_series(prices: np.ndarray, slice_len: int) -> np.ndarray:
    """Non-overlapping contiguous slices, earliest first; remainder dropped."""
    n = len(prices) // slice_len
    return prices[: n * slice_len].reshape(n, slice_len)


def _normalize_slices(slices: np.ndarray, train_mask: np.ndarray) -> np.ndarray:
    """Level-free, scale-preserving normalization of price slices.

    Each slice is first expressed relative to its own first price, which
    removes the series' absolute level (a classifier must not be able to
    identify a series by where its path happens to wander) while keeping
    the magnitude of within-slice fluctuations — the volatility signal.
    The relative slices are then min-max scaled with statistics fitted on
    the training slices only, mirroring the market-data pipeline; held-out
    values may fall outside [0, 1] and pass through unclamped.
    """
    rel = slices / slices[:, :1]
    lo = rel[train_mask].min()
    hi = rel[train_mask].max()
    if hi == lo:
        return np.zeros_like(rel)
    return (rel - lo) / (hi - lo)


def _scenario_dataset(cfg: ScenarioConfig, rep_seed: int) -> Dataset:
    """Simulate, slice, normalize, and pack into the shared Dataset shape.

    Slices are labeled with their source series; the chronologically last
    ``holdout_fraction`` of each series' slices form the validation split.
    """
    rng = np.random.default_rng(rep_seed)
    if cfg.mode == "identical-params":
        mu = rng.uniform(*cfg.mu_range)
        sigma = rng.uniform(*cfg.sigma_range)
        mus = np.full(cfg.n_series, mu)
        sigmas = np.full(cfg.n_series, sigma)
    else:
        mus = rng.uniform(*cfg.mu_range, size=cfg.n_series)
        sigmas = rng.uniform(*cfg.sigma_range, size=cfg.n_series)

    raw, labels, splits, days = [], [], [], []
    for i in range(cfg.n_series):
        prices = gbm_series(GbmConfig(
            s0=cfg.s0, mu=mus[i], sigma=sigmas[i], dt=cfg.dt, steps=cfg.steps,
        ), rng=rng)
        slices = _slice_series(prices, cfg.slice_len)
        n_eval = max(1, int(round(cfg.holdout_fraction * len(slices))))
        for j, s in enumerate(slices):
            raw.append(s)
            labels.append(i)
            splits.append(1 if j >= len(slices) - n_eval else 0)
            days.append(j)

    splits = np.array(splits)
    windows = _normalize_slices(np.stack(raw), splits == 0)

    n_slices = len(windows) // cfg.n_series
    # Pad feature axis to the 9-column layout the pipeline uses: the close
    # column carries the price, everything else is 0 (close-only mode reads
    # just that column).
    w = np.zeros((len(windows), cfg.slice_len, 9), dtype=np.float32)
    w[:, :, 3] = windows
    # Split membership is carried per sample; the date ranges are dummies.
    dcfg = DatasetConfig(lookback=cfg.slice_len, train_range=("a", "b"),
                         valid_range=("c", "d"), test_range=("e", "f"))
    return Dataset(
        windows=w,
        stock_index=np.array(labels),
        anchor_day=np.array(days),
        returns=np.zeros(len(windows)),
        split=np.array(splits),
        tickers=[f"SIM{i:04d}" for i in range(cfg.n_series)],
        dates=[f"slice-{j}" for j in range(n_slices)],
        sector_of_stock=np.zeros(cfg.n_series, dtype=int),
        sector_labels=["simulated"],
        normalizer=Normalizer(col_min=np.zeros(9), col_max=np.ones(9)),
        config=dcfg,
        content_hash="",
    )


def _classify_once(cfg: ScenarioConfig, rep_seed: int) -> float:
    """Train the stock-code classifier on one repetition's slices.

    Returns final-epoch held-out accuracy: selecting the best epoch on the
    held-out split would bias the identical-params case above the random
    baseline.
    """
    if cfg.n_series == 1:
        return 1.0
    dataset = _scenario_dataset(cfg, rep_seed)
    pcfg = PretrainConfig(
        alpha=1.0, beta=0.0, gamma=0.0, lr=cfg.lr, epochs=cfg.epochs,
        seed=rep_seed, feature_mode="close-only", batch_size=cfg.batch_size,
        dropout=cfg.dropout,
    )
    run = run_pretraining(dataset, pcfg)
    return run.series("valid", "scc_accuracy")[-1]


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    accuracies: list[float] = field(default_factory=list)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))


def run_scenario(cfg: ScenarioConfig) -> ScenarioResult:
    result = ScenarioResult(config=cfg)
    for rep in range(cfg.repetitions):
        result.accuracies.append(_classify_once(cfg, rep_seed=cfg.seed * 1000 + rep))
    return result


def sigma_sweep(widths: list[float], sigma_min: float = 0.1,
                mu: float = 0.1, n_series: int = 10,
                base: ScenarioConfig | None = None) -> dict[float, ScenarioResult]:
    """Differing-volatility scenarios with sigma drawn from widening ranges.

    mu and s0 are held identical across series; only sigma differs, drawn
    from (sigma_min, sigma_min + width).
    """
    if any(w <= 0 for w in widths) or list(widths) != sorted(widths):
        raise ValueError("widths must be positive and increasing")
    base = base or ScenarioConfig()
    out = {}
    for width in widths:
        cfg = ScenarioConfig(
            n_series=n_series, mode="differing-params",
            mu_range=(mu, mu), sigma_range=(sigma_min, sigma_min + width),
            slice_len=base.slice_len, repetitions=base.repetitions,
            s0=base.s0, dt=base.dt, steps=base.steps,
            holdout_fraction=base.holdout_fraction, epochs=base.epochs,
            lr=base.lr, batch_size=base.batch_size, dropout=base.dropout,
            seed=base.seed,
        )
        out[width] = run_scenario(cfg)
    return out


def write_scenario_csv(path, rows: list[tuple[str, int, float, int, float]]) -> None:
    """rows: (mode, n_series, width, repetition, accuracy)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("mode,N,width,rep,accuracy\n")
        for mode, n, width, rep, acc in rows:
            f.write(f"{mode},{n},{width!r},{rep},{acc!r}\n")


def make_synthetic_universe(n_series: int, steps: int, seed: int,
                            mu_range=(0.0, 0.2), sigma_range=(0.1, 0.3),
                            start_date=(2013, 1, 1)) -> list[PriceSeries]:
    """GBM universe expanded to the OHLCV file schema.

    Open/high/low mirror the close path and volume is constant; the
    normalizer flags those degenerate columns downstream.
    """
    import datetime as dt

    rng = np.random.default_rng(seed)
    mus = rng.uniform(*mu_range, size=n_series)
    sigmas = rng.uniform(*sigma_range, size=n_series)
    d0 = dt.date(*start_date)
    dates = [(d0 + dt.timedelta(days=i)).isoformat() for i in range(steps + 1)]
    out = []
    for i in range(n_series):
        close = gbm_series(GbmConfig(mu=mus[i], sigma=sigmas[i], steps=steps),
                           rng=rng)
        out.append(PriceSeries(
            ticker=f"SIM{i:04d}",
            dates=list(dates),
            open=close.copy(), high=close.copy(), low=close.copy(),
            close=close, volume=np.ones(steps + 1),
        ))
    return out
