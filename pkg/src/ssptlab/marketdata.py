"""Daily OHLCV ingestion, feature windows, labels, and chronological splits.

Feature order per day: open, high, low, close, volume, then 5/10/20/30-day
moving averages of the close (M=9). Min-max normalization statistics come
from the training split only. Labels are next-day return ratios computed on
raw close prices.
"""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MA_WINDOWS = (5, 10, 20, 30)
FEATURE_NAMES = ("open", "high", "low", "close", "volume",
                 "ma5", "ma10", "ma20", "ma30")
SPLIT_NAMES = ("train", "valid", "test")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class PriceSeries:
    ticker: str
    dates: list[str]
    open: np.ndarray
    high: np.ndarray
    low: np.ndarray
    close: np.ndarray
    volume: np.ndarray

    def validate(self, min_len: int = max(MA_WINDOWS) + 1) -> None:
        n = len(self.dates)
        for name in ("open", "high", "low", "close", "volume"):
            if len(getattr(self, name)) != n:
                raise DataError(f"{self.ticker}: column '{name}' length mismatch")
        if n < min_len:
            raise DataError(
                f"{self.ticker}: needs at least {min_len} rows, got {n}"
            )
        if any(a >= b for a, b in zip(self.dates, self.dates[1:])):
            raise DataError(f"{self.ticker}: dates not strictly increasing")
        for name in ("open", "high", "low", "close"):
            if np.any(getattr(self, name) <= 0):
                raise DataError(f"{self.ticker}: non-positive {name} price")
        if np.any(self.volume < 0):
            raise DataError(f"{self.ticker}: negative volume")


@dataclass
class SectorMap:
    by_ticker: dict[str, str]
    sector_index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sector_index:
            labels = sorted(set(self.by_ticker.values()))
            self.sector_index = {s: i for i, s in enumerate(labels)}

    @property
    def n_sectors(self) -> int:
        return len(self.sector_index)

    def index_of(self, ticker: str) -> int:
        if ticker not in self.by_ticker:
            raise DataError(f"ticker '{ticker}' has no sector assignment")
        return self.sector_index[self.by_ticker[ticker]]


@dataclass
class DatasetConfig:
    lookback: int = 16
    train_range: tuple[str, str] = ("", "")
    valid_range: tuple[str, str] = ("", "")
    test_range: tuple[str, str] = ("", "")

    def __post_init__(self):
        if self.lookback < 2:
            raise DataError(f"lookback must be >= 2, got {self.lookback}")
        ranges = [self.train_range, self.valid_range, self.test_range]
        for lo, hi in ranges:
            if lo > hi:
                raise DataError(f"split range {lo}..{hi} is reversed")
        for (_, a_hi), (b_lo, _) in zip(ranges, ranges[1:]):
            if a_hi >= b_lo:
                raise DataError("splits must be chronological and disjoint")

    def split_of(self, date: str) -> int:
        for i, (lo, hi) in enumerate(
            (self.train_range, self.valid_range, self.test_range)
        ):
            if lo <= date <= hi:
                return i
        return -1


@dataclass
class Normalizer:
    """Per-column (min, max) fitted on training rows only."""

    col_min: np.ndarray
    col_max: np.ndarray

    @property
    def degenerate(self) -> np.ndarray:
        return self.col_max == self.col_min

    def apply(self, x: np.ndarray) -> np.ndarray:
        span = self.col_max - self.col_min
        safe = np.where(span == 0, 1.0, span)
        out = (x - self.col_min) / safe
        return np.where(self.degenerate, 0.0, out)


@dataclass
class Dataset:
    """Normalized feature windows plus per-sample metadata.

    Sample order is day-major: all stocks of the earliest anchor day first.
    Windows are immutable once built.
    """

    windows: np.ndarray        # (samples, lookback, 9) float32
    stock_index: np.ndarray    # (samples,) int
    anchor_day: np.ndarray     # (samples,) global day index
    returns: np.ndarray        # (samples,) float64, next-day return ratio
    split: np.ndarray          # (samples,) 0=train 1=valid 2=test
    tickers: list[str]
    dates: list[str]
    sector_of_stock: np.ndarray  # (n_stocks,) sector class index
    sector_labels: list[str]
    normalizer: Normalizer
    config: DatasetConfig
    content_hash: str = ""

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    @property
    def n_features(self) -> int:
        return self.windows.shape[2]

    @property
    def n_sectors(self) -> int:
        return len(self.sector_labels)

    def split_indices(self, split: int | str) -> np.ndarray:
        if isinstance(split, str):
            split = SPLIT_NAMES.index(split)
        return np.nonzero(self.split == split)[0]

    def days_of(self, sample_idx: np.ndarray) -> list[np.ndarray]:
        """Group sample indices by anchor day, chronological order."""
        days = self.anchor_day[sample_idx]
        groups = []
        for d in np.unique(days):
            groups.append(sample_idx[days == d])
        return groups


def moving_average(series: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean; positions before a full window are NaN (unusable)."""
    series = np.asarray(series, dtype=np.float64)
    if window < 1:
        raise DataError(f"moving average window must be >= 1, got {window}")
    if len(series) < window:
        raise DataError(
            f"series of length {len(series)} shorter than MA window {window}"
        )
    out = np.full(len(series), np.nan)
    csum = np.concatenate([[0.0], np.cumsum(series)])
    out[window - 1:] = (csum[window:] - csum[:-window]) / window
    return out


def compute_return(p_t: float, p_next: float) -> float:
    if p_t <= 0:
        raise DataError(f"return requires positive price, got {p_t}")
    return (p_next - p_t) / p_t


def fit_normalizer(train_rows: np.ndarray) -> Normalizer:
    if train_rows.size == 0:
        raise DataError("cannot fit normalizer: train split is empty")
    return Normalizer(
        col_min=train_rows.min(axis=0), col_max=train_rows.max(axis=0)
    )


def apply_normalizer(x: np.ndarray, norm: Normalizer) -> np.ndarray:
    return norm.apply(x)


def _align_calendar(universe: list[PriceSeries]) -> tuple[list[str], list[PriceSeries]]:
    """Keep only days present for every stock; reindex all series to them."""
    common = set(universe[0].dates)
    for s in universe[1:]:
        common &= set(s.dates)
    if not common:
        tickers = ", ".join(s.ticker for s in universe[:5])
        raise DataError(f"no shared trading days across universe ({tickers}, ...)")
    dates = sorted(common)
    aligned = []
    for s in universe:
        pos = {d: i for i, d in enumerate(s.dates)}
        idx = np.array([pos[d] for d in dates])
        aligned.append(PriceSeries(
            ticker=s.ticker,
            dates=dates,
            open=s.open[idx], high=s.high[idx], low=s.low[idx],
            close=s.close[idx], volume=s.volume[idx],
        ))
    return dates, aligned


def build_windows(universe: list[PriceSeries], cfg: DatasetConfig,
                  sectors: SectorMap, content_hash: str = "") -> Dataset:
    """Build one sample per (stock, anchor day) with a full feature window.

    An anchor day t is usable when the window start t-lookback+1 falls after
    a full 30-day MA warm-up (window start index >= 30), the whole window
    plus the label day t+1 lie inside one split, and a next day exists.
    """
    if not universe:
        raise DataError("empty universe")
    for s in universe:
        s.validate()
        sectors.index_of(s.ticker)  # raises on missing sector
    universe = sorted(universe, key=lambda s: s.ticker)
    dates, aligned = _align_calendar(universe)
    n_days = len(dates)
    n_stocks = len(aligned)
    lb = cfg.lookback
    warmup = max(MA_WINDOWS)

    # (stocks, days, 9) raw feature cube; NaN where MAs are undefined.
    feats = np.full((n_stocks, n_days, len(FEATURE_NAMES)), np.nan)
    for i, s in enumerate(aligned):
        feats[i, :, 0] = s.open
        feats[i, :, 1] = s.high
        feats[i, :, 2] = s.low
        feats[i, :, 3] = s.close
        feats[i, :, 4] = s.volume
        for j, w in enumerate(MA_WINDOWS):
            feats[i, :, 5 + j] = moving_average(s.close, w)

    split_of_day = np.array([cfg.split_of(d) for d in dates])

    # Normalizer: all (stock, day) rows with day in train range, past warm-up.
    train_days = np.nonzero(
        (split_of_day == 0) & (np.arange(n_days) >= warmup)
    )[0]
    if train_days.size == 0:
        raise DataError("no usable training days after MA warm-up")
    train_rows = feats[:, train_days, :].reshape(-1, len(FEATURE_NAMES))
    norm = fit_normalizer(train_rows)
    normed = norm.apply(feats)

    close = feats[:, :, 3]

    rows_w, rows_stock, rows_day, rows_ret, rows_split = [], [], [], [], []
    for t in range(warmup + lb - 1, n_days - 1):
        sp = split_of_day[t]
        if sp < 0:
            continue
        start = t - lb + 1
        if split_of_day[start] != sp or split_of_day[t + 1] != sp:
            continue
        win = normed[:, start:t + 1, :].astype(np.float32)
        ret = (close[:, t + 1] - close[:, t]) / close[:, t]
        for i in range(n_stocks):
            rows_w.append(win[i])
            rows_stock.append(i)
            rows_day.append(t)
            rows_ret.append(ret[i])
            rows_split.append(sp)

    if not rows_w:
        raise DataError(
            "no usable samples: series too short for MA warm-up + lookback"
        )

    tickers = [s.ticker for s in aligned]
    sector_of_stock = np.array([sectors.index_of(t) for t in tickers])
    sector_labels = sorted(sectors.sector_index, key=sectors.sector_index.get)
    return Dataset(
        windows=np.stack(rows_w),
        stock_index=np.array(rows_stock),
        anchor_day=np.array(rows_day),
        returns=np.array(rows_ret),
        split=np.array(rows_split),
        tickers=tickers,
        dates=dates,
        sector_of_stock=sector_of_stock,
        sector_labels=sector_labels,
        normalizer=norm,
        config=cfg,
        content_hash=content_hash,
    )


def load_price_csv(path: Path) -> PriceSeries:
    """Parse one `date,open,high,low,close,volume` file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != "date,open,high,low,close,volume":
        raise DataError(f"{path}: expected header 'date,open,high,low,close,volume'")
    dates, cols = [], [[], [], [], [], []]
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 6:
            raise DataError(f"{path}:{ln}: expected 6 fields, got {len(parts)}")
        dates.append(parts[0].strip())
        try:
            for c, v in zip(cols, parts[1:]):
                c.append(float(v))
        except ValueError as e:
            raise DataError(f"{path}:{ln}: {e}") from None
    series = PriceSeries(
        ticker=path.stem,
        dates=dates,
        open=np.array(cols[0]), high=np.array(cols[1]), low=np.array(cols[2]),
        close=np.array(cols[3]), volume=np.array(cols[4]),
    )
    series.validate()
    return series


def load_sector_csv(path: Path) -> SectorMap:
    path = Path(path)
    by_ticker = {}
    for ln, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.lower() == "ticker,sector":
            continue
        parts = line.split(",")
        if len(parts) != 2:
            raise DataError(f"{path}:{ln}: expected 'ticker,sector'")
        ticker, sector = parts[0].strip(), parts[1].strip()
        if ticker in by_ticker:
            raise DataError(f"{path}:{ln}: duplicate ticker '{ticker}'")
        by_ticker[ticker] = sector
    if not by_ticker:
        raise DataError(f"{path}: empty sector file")
    return SectorMap(by_ticker)


def hash_inputs(paths: list[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(Path(p) for p in paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def write_manifest(dataset: Dataset, path: Path) -> None:
    """Key=value manifest recording shapes, splits, and normalizer stats."""
    lines = [
        f"n_stocks = {dataset.n_stocks}",
        f"n_features = {dataset.n_features}",
        f"n_sectors = {dataset.n_sectors}",
        f"lookback = {dataset.config.lookback}",
        f"train = {dataset.config.train_range[0]}..{dataset.config.train_range[1]}",
        f"valid = {dataset.config.valid_range[0]}..{dataset.config.valid_range[1]}",
        f"test = {dataset.config.test_range[0]}..{dataset.config.test_range[1]}",
    ]
    for i in range(3):
        lines.append(f"samples_{SPLIT_NAMES[i]} = {int((dataset.split == i).sum())}")
    for j, name in enumerate(FEATURE_NAMES):
        lines.append(f"min_{name} = {float(dataset.normalizer.col_min[j])!r}")
        lines.append(f"max_{name} = {float(dataset.normalizer.col_max[j])!r}")
    lines.append(f"content_hash = {dataset.content_hash}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def save_dataset(dataset: Dataset, path: Path) -> None:
    meta = {
        "tickers": dataset.tickers,
        "dates": dataset.dates,
        "sector_labels": dataset.sector_labels,
        "config": {
            "lookback": dataset.config.lookback,
            "train_range": list(dataset.config.train_range),
            "valid_range": list(dataset.config.valid_range),
            "test_range": list(dataset.config.test_range),
        },
        "content_hash": dataset.content_hash,
    }
    buf = io.BytesIO()
    np.savez(
        buf,
        windows=dataset.windows,
        stock_index=dataset.stock_index,
        anchor_day=dataset.anchor_day,
        returns=dataset.returns,
        split=dataset.split,
        sector_of_stock=dataset.sector_of_stock,
        col_min=dataset.normalizer.col_min,
        col_max=dataset.normalizer.col_max,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
    )
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path: Path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        cfg = DatasetConfig(
            lookback=meta["config"]["lookback"],
            train_range=tuple(meta["config"]["train_range"]),
            valid_range=tuple(meta["config"]["valid_range"]),
            test_range=tuple(meta["config"]["test_range"]),
        )
        return Dataset(
            windows=z["windows"],
            stock_index=z["stock_index"],
            anchor_day=z["anchor_day"],
            returns=z["returns"],
            split=z["split"],
            tickers=meta["tickers"],
            dates=meta["dates"],
            sector_of_stock=z["sector_of_stock"],
            sector_labels=meta["sector_labels"],
            normalizer=Normalizer(col_min=z["col_min"], col_max=z["col_max"]),
            config=cfg,
            content_hash=meta["content_hash"],
        )
