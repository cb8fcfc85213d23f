import csv
import json
import math
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from gridscreen.cpf import transfer_schedule
from gridscreen.dataset import DecodedSample, Normalizer
from gridscreen.evaluation import (EvalConfig, EvalReport, EvalRow, LengthMismatch, emit_report, eval_bases,
                                   evaluate, mae_profiles, score_candidates, threshold_rank)
from gridscreen.oracle import OutageId, enumerate_n1, rank_all, rank_of
from gridscreen.unet import Checkpoint, UNetConfig, init_params

NORM = Normalizer((0, 0, 0, 0, 0, 0), (100, 100, 1, 200, 200, 1))


def perfect_candidates(case, bases, scale=2.5):
    out = []
    for b in bases:
        table = rank_all(b, transfer_schedule(b, scale))
        o = table.rows[0].outage
        sched = transfer_schedule(b, scale)
        lam = table.rows[0].max_lambda
        out.append(DecodedSample(b.pd + lam * sched.dp * case.base_mva, b.qd + lam * sched.dq * case.base_mva,
                                 o, ()))
    return out


def uniform_candidates(seed):
    def fn(case, bases):
        rng = np.random.default_rng(seed)
        feasible = enumerate_n1(case)
        return [DecodedSample(b.pd, b.qd, feasible[rng.integers(len(feasible))], ()) for b in bases]
    return fn


def dummy_ckpt(case):
    cfg = UNetConfig.for_buses(case.n_bus, base_width=8, depth=1, time_embed_dim=16)
    meta = {"T": 10, "beta_start": 1e-4, "beta_end": 0.02, "normalizer": {"mins": list(NORM.mins),
                                                                           "maxs": list(NORM.maxs)}}
    return Checkpoint(init_params(cfg, 0), cfg, meta)


@pytest.mark.parametrize("m,expect", [(11, 6), (1, 1), (20, 10), (19, 10), (38, 19)])
def test_threshold_rank(m, expect):
    assert threshold_rank(m) == expect


def test_threshold_rank_rejects_empty():
    with pytest.raises(ValueError):
        threshold_rank(0)


def test_mae_profiles_basic():
    p, q = np.array([10.0, 20.0, 0.0]), np.array([5.0, 8.0, 0.0])
    assert mae_profiles((p, q), (p, q), NORM) == (0.0, 0.0)
    # +0.01 in normalized units on every load bus
    mp, mq = mae_profiles((p + 2.0, q + 2.0), (p, q), NORM, load_buses=[0, 1])
    assert mp == pytest.approx(0.01, abs=1e-15) and mq == pytest.approx(0.01, abs=1e-15)
    a = mae_profiles((p + 3, q - 1), (p, q), NORM)
    b = mae_profiles((p - 3, q + 1), (p, q), NORM)
    assert a == pytest.approx(b)
    with pytest.raises(LengthMismatch):
        mae_profiles((p, q), (p[:2], q[:2]), NORM)


def test_perfect_stub_scores_one(case6):
    cfg = EvalConfig(n_eval_samples=8)
    rep = evaluate(dummy_ckpt(case6), case6, cfg, normalizer=NORM, candidate_fn=perfect_candidates)
    assert rep.score == 1.0 and rep.exclusions == 0
    assert all(r.rank == 1 for r in rep.rows)
    assert rep.mae_p == pytest.approx(0.0, abs=1e-12) and rep.mae_q == pytest.approx(0.0, abs=1e-12)


def test_uniform_stub_matches_binomial(case6):
    n = 100
    rep = evaluate(dummy_ckpt(case6), case6, EvalConfig(n_eval_samples=n), normalizer=NORM,
                   candidate_fn=uniform_candidates(0))
    p = threshold_rank(11) / 11
    assert abs(rep.score - p) <= 3 * math.sqrt(p * (1 - p) / n)
    assert sum(c for _, c in rep.histogram) == n


def test_recorded_rank_matches_independent_oracle(case6):
    cfg = EvalConfig(n_eval_samples=4, seed=3)
    rep = evaluate(dummy_ckpt(case6), case6, cfg, normalizer=NORM, candidate_fn=uniform_candidates(1))
    for (seed, base), row in zip(eval_bases(case6, cfg), rep.rows):
        assert row.seed == seed
        table = rank_all(base, transfer_schedule(base, cfg.target_scale))
        assert row.rank == rank_of(row.branch_index, table)
        assert row.below_threshold == (row.rank <= threshold_rank(table.m))


def test_failures_are_excluded(case14):
    cfg = EvalConfig(n_eval_samples=3)
    bases = eval_bases(case14, cfg)
    island = next(k for k in range(len(case14.branches)) if OutageId.of(case14, k) not in enumerate_n1(case14))
    good = enumerate_n1(case14)[0]
    cands = ["decode: broken", DecodedSample(bases[1][1].pd, bases[1][1].qd, OutageId.of(case14, island), ()),
             DecodedSample(bases[2][1].pd, bases[2][1].qd, good, ())]
    rep = score_candidates(case14, bases, cands, NORM, cfg)
    assert rep.exclusions == 2 and len(rep.included) == 1
    assert rep.rows[0].excluded.startswith("decode") and "not in ranking" in rep.rows[1].excluded
    assert rep.score in (0.0, 1.0)


def test_generated_samples_decode(case6):
    rep = evaluate(dummy_ckpt(case6), case6, EvalConfig(n_eval_samples=5))
    assert rep.exclusions == 0 and len(rep.rows) == 5
    again = evaluate(dummy_ckpt(case6), case6, EvalConfig(n_eval_samples=5))
    assert [(r.branch_index, r.mae_p) for r in rep.rows] == [(r.branch_index, r.mae_p) for r in again.rows]


def sample_report():
    rows = [EvalRow(0, 11, 2, 2, 4, 1, 11, True, 0.01, 0.02),
            EvalRow(1, 12, 5, 3, 6, 7, 11, False, 0.03, 0.01),
            EvalRow(2, 13, -1, 0, 0, None, 11, False, math.nan, math.nan, "decode: bad")]
    return EvalReport(rows=rows, config={"seed": 1})


def test_report_aggregates():
    rep = sample_report()
    assert rep.score == 0.5 and rep.exclusions == 1
    assert rep.histogram[0] == (1, 1) and rep.histogram[6] == (7, 1) and len(rep.histogram) == 11
    assert rep.fraction_in_top(3) == 0.5
    assert rep.mae_p == pytest.approx(0.02)


def test_emit_report_files(tmp_path):
    rep = sample_report()
    paths = emit_report(rep, tmp_path / "a")
    assert [p.name for p in paths] == ["report.csv", "histogram.csv", "summary.json", "rank_frequency.svg",
                                       "score.svg"]
    hist = list(csv.DictReader(open(paths[1])))
    assert sum(int(r["count"]) for r in hist) == len(rep.rows) - rep.exclusions
    summary = json.loads(paths[2].read_text())
    assert summary["score"] == 0.5 and summary["config"] == {"seed": 1} and summary["exclusions"] == 1
    for svg in paths[3:]:
        root = ET.fromstring(svg.read_text())
        assert root.get("width") == "800" and root.get("height") == "500"
    again = emit_report(rep, tmp_path / "b")
    assert all(p.read_bytes() == q.read_bytes() for p, q in zip(paths, again))


def test_emit_empty_report(tmp_path):
    paths = emit_report(EvalReport(), tmp_path)
    assert paths[0].read_text().count("\n") == 1
    assert paths[1].read_bytes() == b"rank,count\n"
    for svg in paths[3:]:
        ET.fromstring(svg.read_text())
