"""Score generated contingencies against the brute-force N-1 ranking."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .case_model import NetworkCase
from .cpf import CpfOptions, transfer_schedule
from .dataset import DecodedSample, Normalizer, attempt_seed, decode_generated, encode_base, perturb_loads
from .diffusion import make_schedule, sample, unet_eps_model
from .oracle import NotInTable, RankingTable, map_jobs, margin_of, rank_all, rank_of
from .unet import Checkpoint


class LengthMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    n_eval_samples: int = 100
    seed: int = 20250101
    target_scale: float = 2.5

    def __post_init__(self):
        if self.n_eval_samples < 1:
            raise ValueError("n_eval_samples must be at least 1")


@dataclass
class EvalRow:
    index: int
    seed: int
    branch_index: int
    outage_from: int
    outage_to: int
    rank: int | None
    m: int
    below_threshold: bool
    mae_p: float
    mae_q: float
    excluded: str = ""


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    @property
    def included(self) -> list[EvalRow]:
        return [r for r in self.rows if not r.excluded]

    @property
    def exclusions(self) -> int:
        return len(self.rows) - len(self.included)

    @property
    def score(self) -> float:
        inc = self.included
        return sum(r.below_threshold for r in inc) / len(inc) if inc else 0.0

    @property
    def histogram(self) -> list[tuple[int, int]]:
        inc = self.included
        top = max((r.m for r in inc), default=0)
        counts = {k: 0 for k in range(1, top + 1)}
        for r in inc:
            counts[r.rank] += 1
        return sorted(counts.items())

    @property
    def mae_p(self) -> float:
        inc = self.included
        return float(np.mean([r.mae_p for r in inc])) if inc else math.nan

    @property
    def mae_q(self) -> float:
        inc = self.included
        return float(np.mean([r.mae_q for r in inc])) if inc else math.nan

    def fraction_in_top(self, k: int) -> float:
        inc = self.included
        return sum(r.rank <= k for r in inc) / len(inc) if inc else 0.0

    def summary(self) -> dict:
        return {
            "score": self.score,
            "mae_p": self.mae_p,
            "mae_q": self.mae_q,
            "n_samples": len(self.rows),
            "exclusions": self.exclusions,
            "top3_fraction": self.fraction_in_top(3),
            "config": self.config,
        }


def threshold_rank(m: int) -> int:
    if m < 1:
        raise ValueError("need at least one contingency")
    return math.ceil(m / 2)


def mae_profiles(generated: tuple, actual: tuple, normalizer: Normalizer,
                 load_buses: Sequence[int] | None = None) -> tuple[float, float]:
    """Mean absolute error of critical P and Q profiles in normalized units."""
    gp, gq = (np.asarray(v, dtype=float) for v in generated)
    ap, aq = (np.asarray(v, dtype=float) for v in actual)
    if not (gp.shape == ap.shape and gq.shape == aq.shape and gp.shape == gq.shape):
        raise LengthMismatch("generated and actual profiles differ in length")
    idx = np.arange(len(gp)) if load_buses is None else np.asarray(load_buses)
    mae_p = np.mean(np.abs(normalizer.normalize(3, gp[idx]) - normalizer.normalize(3, ap[idx])))
    mae_q = np.mean(np.abs(normalizer.normalize(4, gq[idx]) - normalizer.normalize(4, aq[idx])))
    return float(mae_p), float(mae_q)


def eval_bases(case: NetworkCase, config: EvalConfig) -> list[tuple[int, NetworkCase]]:
    """Fresh perturbed base states, one per evaluation sample."""
    seeds = [attempt_seed(config.seed, i) for i in range(config.n_eval_samples)]
    return [(s, perturb_loads(case, np.random.default_rng(s))) for s in seeds]


def generate_candidates(ckpt: Checkpoint, case: NetworkCase, bases: list[NetworkCase], normalizer: Normalizer,
                        seed: int, batch_size: int = 100) -> list[DecodedSample | str]:
    """Sample the model once per base state and decode each result.

    Decoding failures are returned as strings describing the error.
    """
    meta = ckpt.meta
    sched = make_schedule(meta["T"], meta["beta_start"], meta["beta_end"])
    eps_model = unet_eps_model(ckpt.params, ckpt.config)
    conds = np.stack([encode_base(b.pd, b.qd, case, normalizer) for b in bases])
    gen = torch.Generator().manual_seed(seed)
    out = []
    for start in range(0, len(conds), batch_size):
        cond = torch.as_tensor(conds[start:start + batch_size], dtype=torch.float32)
        with torch.no_grad():
            y0 = sample(eps_model, sched, cond, gen, gain=meta.get("residual_gain")).double().numpy()
        for img in y0:
            try:
                out.append(decode_generated(img, case, normalizer))
            except ValueError as exc:
                out.append(f"decode: {exc}")
    return out


def _base_key(base: NetworkCase) -> str:
    return hashlib.sha256(base.pd.tobytes() + base.qd.tobytes()).hexdigest()


def _table_task(args) -> RankingTable:
    base, scale, opts = args
    return rank_all(base, transfer_schedule(base, scale), opts)


def score_candidates(case: NetworkCase, bases: list[tuple[int, NetworkCase]], candidates: list,
                     normalizer: Normalizer, config: EvalConfig, opts: CpfOptions = CpfOptions(),
                     jobs: int = 1, tables: dict | None = None) -> EvalReport:
    """Rank each candidate outage within the N-1 table of its own base state."""
    tables = {} if tables is None else tables
    todo = {}
    for _, b in bases:
        key = _base_key(b)
        if key not in tables:
            todo[key] = b
    keys = list(todo)
    for key, table in zip(keys, map_jobs(_table_task, [(todo[k], config.target_scale, opts) for k in keys], jobs)):
        tables[key] = table

    report = EvalReport(config=asdict(config))
    load_buses = case.load_buses
    for i, ((seed, base), cand) in enumerate(zip(bases, candidates)):
        table = tables[_base_key(base)]
        if isinstance(cand, str):
            report.rows.append(EvalRow(i, seed, -1, 0, 0, None, table.m, False, math.nan, math.nan, cand))
            continue
        o = cand.outage
        try:
            rank = rank_of(o, table)
            lam = margin_of(o, table)
        except NotInTable:
            report.rows.append(EvalRow(i, seed, o.branch_index, o.from_bus, o.to_bus, None, table.m, False,
                                       math.nan, math.nan, "outage not in ranking table"))
            continue
        sched = transfer_schedule(base, config.target_scale)
        actual_p = base.pd + lam * sched.dp * case.base_mva
        actual_q = base.qd + lam * sched.dq * case.base_mva
        mp, mq = mae_profiles((cand.crit_p, cand.crit_q), (actual_p, actual_q), normalizer, load_buses)
        report.rows.append(EvalRow(i, seed, o.branch_index, o.from_bus, o.to_bus, rank, table.m,
                                   rank <= threshold_rank(table.m), mp, mq))
    return report


def evaluate(ckpt: Checkpoint, case: NetworkCase, config: EvalConfig, normalizer: Normalizer | None = None,
             jobs: int = 1, candidate_fn: Callable | None = None) -> EvalReport:
    """Sample one candidate per fresh base state and score it against the oracle."""
    normalizer = Normalizer.from_dict(ckpt.meta["normalizer"]) if normalizer is None else normalizer
    bases = eval_bases(case, config)
    if candidate_fn is None:
        candidates = generate_candidates(ckpt, case, [b for _, b in bases], normalizer, config.seed)
    else:
        candidates = candidate_fn(case, [b for _, b in bases])
    return score_candidates(case, bases, candidates, normalizer, config, jobs=jobs)


# -- report files ----------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if v is None:
        return ""
    return str(v)


def _svg_bars(title: str, xlabel: str, ylabel: str, labels: list, values: list, hline: float | None = None) -> str:
    w, h = 800, 500
    left, right, top, bottom = 70, 20, 40, 60
    pw, ph = w - left - right, h - top - bottom
    vmax = max([*values, hline or 0, 1])
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<text x="{w / 2}" y="24" text-anchor="middle" font-size="16">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2}" y="{h - 15}" text-anchor="middle" font-size="13">{xlabel}</text>',
        f'<text x="18" y="{top + ph / 2}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 18 {top + ph / 2})">{ylabel}</text>',
    ]
    for frac in (0, 0.25, 0.5, 0.75, 1.0):
        y = top + ph * (1 - frac)
        parts.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end" font-size="11">{vmax * frac:.3g}</text>')
    n = max(len(values), 1)
    slot = pw / n
    step = max(1, n // 20)
    for k, (lab, v) in enumerate(zip(labels, values)):
        bh = ph * v / vmax
        x = left + k * slot
        parts.append(f'<rect x="{x + 0.1 * slot:.2f}" y="{top + ph - bh:.2f}" width="{0.8 * slot:.2f}" '
                     f'height="{bh:.2f}" fill="steelblue"/>')
        if k % step == 0:
            parts.append(f'<text x="{x + slot / 2:.2f}" y="{top + ph + 16}" text-anchor="middle" '
                         f'font-size="11">{lab}</text>')
    if hline is not None:
        y = top + ph * (1 - hline / vmax)
        parts.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="crimson" '
                     f'stroke-dasharray="6 4"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(report: EvalReport, out_dir: str | Path) -> list[Path]:
    """Write report.csv, histogram.csv, summary.json and two SVG charts."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["index", "seed", "branch_index", "outage_from", "outage_to", "rank", "m", "below_threshold",
            "mae_p", "mae_q", "excluded"]
    paths = [out / "report.csv", out / "histogram.csv", out / "summary.json",
             out / "rank_frequency.svg", out / "score.svg"]
    with open(paths[0], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(cols)
        for r in report.rows:
            writer.writerow([_fmt(getattr(r, c)) for c in cols])
    hist = report.histogram
    with open(paths[1], "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "count"])
        writer.writerows(hist)
    paths[2].write_text(json.dumps(report.summary(), indent=2, sort_keys=True) + "\n")
    paths[3].write_text(_svg_bars("Rank frequency of generated contingencies", "oracle rank", "count",
                                  [k for k, _ in hist], [c for _, c in hist]))
    inc = report.included
    thr = [threshold_rank(r.m) for r in inc]
    paths[4].write_text(_svg_bars(f"Generated contingency ranks (score {report.score:.2f})", "sample",
                                  "oracle rank", [r.index for r in inc], [r.rank for r in inc],
                                  hline=float(np.median(thr)) if thr else None))
    return paths
