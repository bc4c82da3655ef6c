import logging
import math

import numpy as np
import pytest

from conftest import quick_config
from mcout.analysis import (
    STAT_COLUMNS, TRACE_COLUMNS, aggregate, analyze_latents, read_csv, trace_rows, write_csv,
)
from mcout.model import VisionLanguageModel
from mcout.reasoning import IterationRecord, ReasoningTrace


def hand_trace():
    trace = ReasoningTrace(initial_h_l=np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]))
    trace.records.append(IterationRecord(
        k=1, h_l=np.array([[0.0, 0.0, 3.0, 4.0], [-1.0, 1.0, -1.0, 1.0]]),
        h_t=np.array([[1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]]), aux_loss=0.25))
    return trace


def test_hand_two_sample_trace():
    rows = trace_rows(hand_trace(), [10, 11])
    assert [(r["sample_id"], r["k"]) for r in rows] == [(10, 0), (10, 1), (11, 0), (11, 1)]
    r = rows[1]
    assert r["hl_mean"] == pytest.approx(1.75, abs=1e-9)
    assert r["hl_std"] == pytest.approx(math.sqrt((1.75**2 * 2 + 1.25**2 + 2.25**2) / 4), abs=1e-9)
    assert r["hl_norm"] == pytest.approx(5.0, abs=1e-9)
    assert r["ht_mean"] == pytest.approx(2.5, abs=1e-9)
    assert r["aux_loss"] == 0.25
    assert rows[0]["ht_mean"] is None


def test_hand_aggregate():
    t = hand_trace()
    stats = aggregate({0: {"hl": t.initial_h_l}, 1: {"hl": t.records[0].h_l, "ht": t.records[0].h_t}},
                      {1: [0.25, 0.75]})
    k0, k1 = stats
    assert k0["n_samples"] == 2
    assert k0["hl_mean"] == pytest.approx(4.5, abs=1e-9)
    assert k0["hl_std"] == pytest.approx(math.sqrt(5.25), abs=1e-9)
    assert k0["hl_norm"] == pytest.approx((math.sqrt(30) + math.sqrt(174)) / 2, abs=1e-9)
    assert k1["hl_norm"] == pytest.approx(3.5, abs=1e-9)
    assert k1["ht_std"] == pytest.approx(math.sqrt(5.25), abs=1e-9)
    assert k1["aux_loss"] == 0.5
    assert k0["ht_mean"] is None and k1["ht_pre_mean"] is None


def test_constant_trace_has_zero_std():
    c = np.full((3, 6), 0.7)
    stats = aggregate({0: {"hl": c}, 1: {"hl": c, "ht": c, "ht_pre": c}})
    for row in stats:
        for g in ("hl", "ht", "ht_pre"):
            if row[f"{g}_std"] is not None:
                assert row[f"{g}_std"] == 0.0


@pytest.fixture(scope="module")
def small_model():
    cfg = quick_config()
    return VisionLanguageModel(cfg.model_config(), seed=2), cfg


def test_base_thought_stats_match_prior_hidden(small_model, count_samples):
    model, cfg = small_model
    stats, rows = analyze_latents(model, count_samples, 5, "base", cfg, n_samples=6)
    assert [r["k"] for r in stats] == list(range(6))
    for prev, cur in zip(stats, stats[1:]):
        for s in ("mean", "std", "norm"):
            assert cur[f"ht_{s}"] == prev[f"hl_{s}"]
    assert len(rows) == 6 * 6


def test_multi_rows_recompute(small_model, count_samples, tmp_path):
    model, cfg = small_model
    stats, rows = analyze_latents(model, count_samples, 5, "multi", cfg, n_samples=8)
    by_k = {}
    for r in rows:
        by_k.setdefault(r["k"], []).append(r)
    for row in stats[1:]:
        per = by_k[row["k"]]
        assert row["ht_mean"] == pytest.approx(np.mean([r["ht_mean"] for r in per]), abs=1e-9)
        assert row["ht_norm"] == pytest.approx(np.mean([r["ht_norm"] for r in per]), abs=1e-9)
        assert row["ht_norm"] == pytest.approx(4.0, rel=1e-3)  # sqrt(D) at init, D = 16
        assert row["aux_loss"] == pytest.approx(np.mean([r["aux_loss"] for r in per]), abs=1e-9)
    path = tmp_path / "stats.csv"
    write_csv(path, stats, STAT_COLUMNS)
    back = read_csv(path)
    assert list(back[0]) == STAT_COLUMNS
    assert float(back[2]["hl_std"]) == stats[2]["hl_std"]
    assert back[0]["ht_mean"] == ""


def test_zero_thoughts_warns(small_model, count_samples, caplog):
    model, cfg = small_model
    with caplog.at_level(logging.WARNING):
        assert analyze_latents(model, count_samples, 0, "base", cfg) == ([], [])
    assert "N_t = 0" in caplog.text


def test_trace_csv_columns(small_model, count_samples, tmp_path):
    model, cfg = small_model
    _, rows = analyze_latents(model, count_samples, 2, "multi", cfg, n_samples=3)
    write_csv(tmp_path / "t.csv", rows, TRACE_COLUMNS)
    back = read_csv(tmp_path / "t.csv")
    assert len(back) == 9 and list(back[0]) == TRACE_COLUMNS
    assert back[1]["sample_id"] == str(count_samples[0].id)
