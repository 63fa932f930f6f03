"""Daily top-k buy-hold-sell evaluation: cumulative IRR and Sharpe ratio.

Cumulative IRR is reported two ways: the plain sum of selected returns per
day (the headline number) and the 1/k-scaled portfolio-return sum. The
Sharpe ratio always uses the 1/k-scaled daily portfolio return series.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .marketdata import Dataset

TRADING_DAYS_PER_YEAR = 252


class BacktestError(ValueError):
    pass


@dataclass
class BacktestConfig:
    k: int = 5
    risk_free: float = 0.0     # daily ratio
    annualize: bool = True


@dataclass
class BacktestReport:
    k: int
    selections: list[list[int]]          # per-day selected stock indices
    day_returns: np.ndarray              # per-day mean return of selection
    irr_sum: float                       # sum over days of summed returns
    irr_mean: float                      # sum over days of mean returns
    sharpe: float
    annualized: bool
    day_labels: list[str] = field(default_factory=list)

    @property
    def days(self) -> int:
        return len(self.selections)

    def to_json(self) -> str:
        return json.dumps({
            "days": self.days,
            "k": self.k,
            "irr_sum": self.irr_sum,
            "irr_mean": self.irr_mean,
            "sharpe": self.sharpe,
            "annualized": self.annualized,
            "day_labels": self.day_labels,
            "selections": [list(map(int, s)) for s in self.selections],
            "day_returns": [float(r) for r in self.day_returns],
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BacktestReport":
        d = json.loads(text)
        return cls(
            k=d["k"], selections=d["selections"],
            day_returns=np.array(d["day_returns"]),
            irr_sum=d["irr_sum"], irr_mean=d["irr_mean"], sharpe=d["sharpe"],
            annualized=d["annualized"], day_labels=d.get("day_labels", []),
        )

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write("day,portfolio_return,cumulative_irr\n")
            cum = 0.0
            for i, r in enumerate(self.day_returns):
                cum += float(r) * self.k
                label = self.day_labels[i] if self.day_labels else str(i)
                f.write(f"{label},{float(r)!r},{cum!r}\n")


def select_topk(predictions: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest predictions; ties go to the lower index."""
    predictions = np.asarray(predictions)
    n = len(predictions)
    if k > n or k < 1:
        raise BacktestError(f"k={k} out of range for {n} stocks")
    order = np.lexsort((np.arange(n), -predictions))
    return np.sort(order[:k])


def day_return(selected: np.ndarray, true_returns: np.ndarray, k: int) -> float:
    """Equal-weight portfolio return: mean of the selected stocks' returns."""
    return float(np.sum(true_returns[selected]) / k)


def sharpe(day_returns: np.ndarray, risk_free: float = 0.0,
           annualize: bool = True) -> float:
    day_returns = np.asarray(day_returns, dtype=np.float64)
    if len(day_returns) < 2:
        raise BacktestError("sharpe requires at least 2 days")
    std = day_returns.std(ddof=1)
    if std == 0:
        raise BacktestError("degenerate return series (zero std)")
    s = (day_returns.mean() - risk_free) / std
    if annualize:
        s *= np.sqrt(TRADING_DAYS_PER_YEAR)
    return float(s)


def run_backtest(day_predictions: list[np.ndarray],
                 day_true_returns: list[np.ndarray],
                 cfg: BacktestConfig,
                 day_labels: list[str] | None = None) -> BacktestReport:
    """Evaluate one prediction vector per day against realized returns."""
    if len(day_predictions) != len(day_true_returns):
        raise BacktestError("prediction/return day counts differ")
    selections, means, irr_sum = [], [], 0.0
    for preds, rets in zip(day_predictions, day_true_returns):
        if len(preds) != len(rets):
            raise BacktestError("prediction/return lengths differ within a day")
        sel = select_topk(preds, cfg.k)
        selections.append(list(map(int, sel)))
        irr_sum += float(rets[sel].sum())
        means.append(day_return(sel, rets, cfg.k))
    day_rets = np.array(means)
    return BacktestReport(
        k=cfg.k,
        selections=selections,
        day_returns=day_rets,
        irr_sum=irr_sum,
        irr_mean=float(day_rets.sum()),
        sharpe=sharpe(day_rets, cfg.risk_free, cfg.annualize),
        annualized=cfg.annualize,
        day_labels=list(day_labels or []),
    )


def split_day_returns(dataset: Dataset, split) -> tuple[list[np.ndarray], list[str]]:
    """Per-day true-return vectors (all N stocks) for a split."""
    idx = dataset.split_indices(split)
    groups = dataset.days_of(idx)
    day_rets, labels = [], []
    for g in groups:
        order = np.argsort(dataset.stock_index[g])
        day_rets.append(dataset.returns[g[order]])
        labels.append(dataset.dates[int(dataset.anchor_day[g[0]])])
    return day_rets, labels


def market_baseline(dataset: Dataset, split, cfg: BacktestConfig | None = None
                    ) -> BacktestReport:
    """Equal-weight everything: select all N stocks every day."""
    day_rets, labels = split_day_returns(dataset, split)
    n = dataset.n_stocks
    base_cfg = cfg or BacktestConfig()
    full = BacktestConfig(k=n, risk_free=base_cfg.risk_free,
                          annualize=base_cfg.annualize)
    preds = [np.zeros(n) for _ in day_rets]
    return run_backtest(preds, day_rets, full, labels)
