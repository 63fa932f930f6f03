"""Backtest checks: selection, metrics, invariances, report I/O."""

import math

import numpy as np
import pytest

from ssptlab.backtest import (
    BacktestConfig,
    BacktestError,
    BacktestReport,
    day_return,
    market_baseline,
    run_backtest,
    select_topk,
    sharpe,
    split_day_returns,
)
from oracles import oracle_backtest


def test_select_topk_basic_and_ties():
    assert select_topk(np.array([0.3, 0.1, 0.2]), 1).tolist() == [0]
    assert select_topk(np.array([0.1, 0.5, 0.5]), 1).tolist() == [1]
    assert select_topk(np.array([0.2, 0.2, 0.2]), 2).tolist() == [0, 1]
    assert select_topk(np.array([0.1, 0.9, 0.5, 0.5]), 3).tolist() == [1, 2, 3]
    with pytest.raises(BacktestError):
        select_topk(np.array([0.1, 0.2]), 3)
    with pytest.raises(BacktestError):
        select_topk(np.array([0.1, 0.2]), 0)


def test_day_return_is_equal_weight_mean():
    rets = np.array([0.1, -0.05, 0.2, 0.0])
    sel = np.array([0, 2])
    assert abs(day_return(sel, rets, 2) - 0.15) < 1e-12


def test_sharpe_reference_value():
    # mean 0.01, sample std sqrt(2)*0.01 -> SR = 1/sqrt(2)
    s = sharpe(np.array([0.02, 0.00]), annualize=False)
    assert abs(s - 1 / math.sqrt(2)) < 1e-12
    s_ann = sharpe(np.array([0.02, 0.00]), annualize=True)
    assert abs(s_ann - math.sqrt(252) / math.sqrt(2)) < 1e-9
    # risk-free adjustment shifts the mean only
    s_rf = sharpe(np.array([0.02, 0.00]), risk_free=0.01, annualize=False)
    assert abs(s_rf) < 1e-12


def test_sharpe_errors():
    with pytest.raises(BacktestError):
        sharpe(np.array([0.01]))
    with pytest.raises(BacktestError):
        sharpe(np.array([0.01, 0.01, 0.01]))


def test_run_backtest_matches_oracle_random():
    rng = np.random.default_rng(0)
    for k in (1, 2, 3):
        preds = [rng.normal(size=6) for _ in range(8)]
        rets = [rng.normal(scale=0.02, size=6) for _ in range(8)]
        rep = run_backtest(preds, rets, BacktestConfig(k=k, annualize=False))
        want = oracle_backtest([p.tolist() for p in preds],
                               [r.tolist() for r in rets], k)
        assert rep.selections == want["selections"]
        assert abs(rep.irr_sum - want["irr_sum"]) < 1e-12
        assert abs(rep.irr_mean - want["irr_mean"]) < 1e-12
        assert abs(rep.sharpe - want["sharpe_raw"]) < 1e-12


def test_monotone_transform_of_predictions_is_invariant():
    rng = np.random.default_rng(1)
    preds = [rng.normal(size=5) for _ in range(6)]
    rets = [rng.normal(scale=0.02, size=5) for _ in range(6)]
    cfg = BacktestConfig(k=2, annualize=False)
    a = run_backtest(preds, rets, cfg)
    b = run_backtest([np.tanh(p) * 3 + 1 for p in preds], rets, cfg)
    assert a.selections == b.selections
    assert abs(a.sharpe - b.sharpe) < 1e-12


def test_perfect_foresight_is_an_upper_bound_on_irr():
    rng = np.random.default_rng(2)
    rets = [rng.normal(scale=0.03, size=7) for _ in range(10)]
    cfg = BacktestConfig(k=2, annualize=False)
    oracle_rep = run_backtest([r.copy() for r in rets], rets, cfg)
    for trial in range(20):
        guess = [np.random.default_rng([3, trial]).normal(size=7)
                 for _ in range(10)]
        rep = run_backtest(guess, rets, cfg)
        assert rep.irr_sum <= oracle_rep.irr_sum + 1e-12


def test_mismatched_inputs_rejected():
    with pytest.raises(BacktestError):
        run_backtest([np.ones(3)], [np.ones(3), np.ones(3)],
                     BacktestConfig(k=1))
    with pytest.raises(BacktestError):
        run_backtest([np.ones(3)], [np.ones(4)], BacktestConfig(k=1))


def test_report_json_roundtrip_and_csv(tmp_path):
    rng = np.random.default_rng(4)
    preds = [rng.normal(size=4) for _ in range(5)]
    rets = [rng.normal(scale=0.02, size=4) for _ in range(5)]
    rep = run_backtest(preds, rets, BacktestConfig(k=2),
                       day_labels=[f"d{i}" for i in range(5)])
    rep2 = BacktestReport.from_json(rep.to_json())
    assert rep2.to_json() == rep.to_json()

    csv_path = tmp_path / "daily.csv"
    rep.write_csv(csv_path)
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "day,portfolio_return,cumulative_irr"
    assert len(lines) == 6
    last_cum = float(lines[-1].split(",")[2])
    assert abs(last_cum - rep.irr_sum) < 1e-9


def test_market_baseline_selects_everything(tiny_dataset):
    rep = market_baseline(tiny_dataset, "test")
    assert rep.k == tiny_dataset.n_stocks
    day_rets, labels = split_day_returns(tiny_dataset, "test")
    assert rep.days == len(day_rets)
    assert rep.day_labels == labels
    for sel, rets in zip(rep.selections, day_rets):
        assert sel == list(range(tiny_dataset.n_stocks))
    want = np.mean([r.mean() for r in day_rets])
    assert abs(rep.day_returns.mean() - want) < 1e-12
