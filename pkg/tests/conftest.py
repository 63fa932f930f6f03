"""Shared fixtures: tiny synthetic universes and datasets for fast tests."""

from __future__ import annotations

import numpy as np
import pytest

from ssptlab.marketdata import (
    DatasetConfig,
    PriceSeries,
    SectorMap,
    build_windows,
)
from ssptlab.simlab import make_synthetic_universe


def _dates(n: int, start: str = "2013-01-01") -> list[str]:
    from datetime import date, timedelta

    y, m, d = map(int, start.split("-"))
    base = date(y, m, d)
    return [(base + timedelta(days=i)).isoformat() for i in range(n)]


def make_universe(n_stocks: int, n_days: int, seed: int = 0,
                  start: str = "2013-01-01") -> list[PriceSeries]:
    """Random-walk OHLCV universe on a shared synthetic calendar."""
    rng = np.random.default_rng(seed)
    days = _dates(n_days, start)
    out = []
    for s in range(n_stocks):
        close = 50.0 * np.exp(np.cumsum(rng.normal(0, 0.02, size=n_days)))
        spread = np.abs(rng.normal(0, 0.005, size=n_days))
        out.append(PriceSeries(
            ticker=f"S{s:02d}",
            dates=list(days),
            open=close * (1 + rng.normal(0, 0.003, size=n_days)),
            high=close * (1 + spread),
            low=close * (1 - spread),
            close=close,
            volume=rng.integers(1_000, 9_999, size=n_days).astype(np.float64),
        ))
    return out


def make_sectors(universe) -> SectorMap:
    return SectorMap(by_ticker={
        p.ticker: ("tech" if i % 2 == 0 else "energy")
        for i, p in enumerate(universe)
    })


@pytest.fixture(scope="session")
def tiny_dataset():
    """5 stocks, 120 aligned days, all three splits populated."""
    universe = make_universe(5, 120, seed=11)
    days = universe[0].dates
    cfg = DatasetConfig(
        lookback=16,
        train_range=(days[0], days[79]),
        valid_range=(days[80], days[99]),
        test_range=(days[100], days[119]),
    )
    return build_windows(universe, cfg, make_sectors(universe))


@pytest.fixture(scope="session")
def gbm_universe():
    """10 GBM series over ~1 year, used by training smoke tests."""
    return make_synthetic_universe(n_series=10, steps=260, seed=5)
