"""Command-line entry point: inspection, power flow, CPF, ranking and the staged pipeline."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .case_model import CaseError, NetworkCase, apply_outage, is_connected, load_case, to_matpower
from .cpf import CpfError, CpfOptions, Scheme, run_cpf, transfer_schedule, write_trace_csv
from .dataset import (DecodedSample, Normalizer, TooFewConverged, encode_sample, generate_dataset, load_dataset,
                      save_dataset)
from .diffusion import NonFiniteLoss, TrainingConfig, make_schedule, train
from .evaluation import EvalConfig, emit_report, eval_bases, generate_candidates, score_candidates
from .oracle import OutageId, rank_all, write_ranking_csv
from .powerflow import SingularJacobian, solve_newton
from .unet import UNetConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("gridscreen")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
OUT_DIR_ENV = "GRIDSCREEN_OUT_DIR"


class InputError(Exception):
    pass


class NumericalFailure(Exception):
    pass


class StageFailed(Exception):
    def __init__(self, stage: str, code: int, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage, self.code = stage, code


# -- run configuration ---------------------------------------------------------------------

@dataclass(frozen=True)
class NetConfig:
    base_width: int = 32
    depth: int = 2
    time_embed_dim: int = 64
    norm_groups: int = 8


@dataclass(frozen=True)
class RunConfig:
    case_path: str = "case6ww"
    out_dir: str = "runs/default"
    target_scale: float = 2.5
    dataset_n: int = 5000
    master_seed: int = 0
    training: TrainingConfig = field(default_factory=TrainingConfig)
    net: NetConfig = field(default_factory=NetConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        nested = {"training": TrainingConfig, "net": NetConfig, "eval": EvalConfig}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        for key, typ in nested.items():
            sub = d.get(key, {})
            bad = set(sub) - {f.name for f in fields(typ)}
            if bad:
                raise InputError(f"unknown keys in {key}: {sorted(bad)}")
            d[key] = typ(**sub)
        cfg = cls(**d)
        if cfg.eval.target_scale != cfg.target_scale:
            # one load-growth target for the whole run
            cfg = replace(cfg, eval=replace(cfg.eval, target_scale=cfg.target_scale))
        return cfg


def read_config(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise InputError("config must be a JSON object")
    try:
        return RunConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid config: {exc}") from None


def resolve_out_dir(cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUT_DIR_ENV) or cfg.out_dir)


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(json.dumps(p, sort_keys=True).encode())
    return h.hexdigest()


def stage_hashes(cfg: RunConfig, case: NetworkCase) -> dict[str, str]:
    """Chained config hashes: changing an input invalidates its stage and everything downstream."""
    data = _digest("data", to_matpower(case), cfg.target_scale, cfg.dataset_n, cfg.master_seed)
    trained = _digest("train", data, asdict(cfg.training), asdict(cfg.net))
    sampled = _digest("sample", trained, asdict(cfg.eval))
    evaluated = _digest("eval", sampled)
    return {"gen-data": data, "train": trained, "sample": sampled, "eval": evaluated}


# -- pipeline stages -----------------------------------------------------------------------

STAGES = ("gen-data", "train", "sample", "eval")
STAGE_OUTPUTS = {
    "gen-data": ("dataset.jsonl", "dataset.normalizer.json"),
    "train": ("model.ckpt", "loss_history.csv", "schedule.csv"),
    "sample": ("samples.jsonl",),
    "eval": ("report.csv", "histogram.csv", "summary.json", "rank_frequency.svg", "score.svg"),
}


def _marker(out: Path, stage: str) -> Path:
    return out / f".{stage}.done"


def stage_is_current(out: Path, stage: str, digest: str) -> bool:
    m = _marker(out, stage)
    if not m.exists() or m.read_text().strip() != digest:
        return False
    return all((out / name).exists() for name in STAGE_OUTPUTS[stage])


def _stage_gen_data(cfg: RunConfig, case: NetworkCase, out: Path, jobs: int):
    samples = generate_dataset(case, cfg.dataset_n, cfg.target_scale, cfg.master_seed, jobs=jobs)
    save_dataset(samples, out / "dataset.jsonl", Normalizer.fit(samples))
    log.info("gen-data: kept %d samples", len(samples))


def unet_config_for(case: NetworkCase, net: NetConfig) -> UNetConfig:
    return UNetConfig.for_buses(case.n_bus, **asdict(net))


def _stage_train(cfg: RunConfig, case: NetworkCase, out: Path, jobs: int):
    samples, norm = load_dataset(out / "dataset.jsonl")
    if norm is None:
        raise InputError("dataset has no normalizer sidecar")
    images = np.stack([encode_sample(s, case, norm) for s in samples])
    tc, uc = cfg.training, unet_config_for(case, cfg.net)
    result = train(images, tc, uc, log_every=max(1, tc.epochs // 10), log=log.info)
    meta = {"T": tc.T, "beta_start": tc.beta_start, "beta_end": tc.beta_end, "normalizer": norm.to_dict(),
            "case": case.name, "n_bus": case.n_bus, "residual_gain": result.residual_gain}
    save_checkpoint(out / "model.ckpt", result.params, uc, meta)
    write_loss_history(result.loss_history, out / "loss_history.csv")
    write_schedule(make_schedule(tc.T, tc.beta_start, tc.beta_end), out / "schedule.csv")


def _stage_sample(cfg: RunConfig, case: NetworkCase, out: Path, jobs: int):
    ckpt = load_checkpoint(out / "model.ckpt")
    if ckpt.meta.get("n_bus") not in (None, case.n_bus):
        raise InputError(f"checkpoint is for {ckpt.meta['n_bus']} buses, case has {case.n_bus}")
    norm = Normalizer.from_dict(ckpt.meta["normalizer"])
    bases = eval_bases(case, cfg.eval)
    cands = generate_candidates(ckpt, case, [b for _, b in bases], norm, cfg.eval.seed)
    write_candidates(cands, [s for s, _ in bases], out / "samples.jsonl")


def _stage_eval(cfg: RunConfig, case: NetworkCase, out: Path, jobs: int):
    ckpt = load_checkpoint(out / "model.ckpt")
    norm = Normalizer.from_dict(ckpt.meta["normalizer"])
    bases = eval_bases(case, cfg.eval)
    cands = read_candidates(out / "samples.jsonl", case)
    if len(cands) != len(bases):
        raise InputError("samples.jsonl does not match the evaluation config")
    report = score_candidates(case, bases, cands, norm, cfg.eval, jobs=jobs)
    report.config = cfg.to_dict()
    emit_report(report, out)
    log.info("eval: score %.3f, mae_p %.4f, mae_q %.4f, exclusions %d",
             report.score, report.mae_p, report.mae_q, report.exclusions)


_RUNNERS = {"gen-data": _stage_gen_data, "train": _stage_train, "sample": _stage_sample, "eval": _stage_eval}


def run_stage(stage: str, cfg: RunConfig, case: NetworkCase, out: Path, jobs: int, digest: str):
    _marker(out, stage).unlink(missing_ok=True)
    try:
        _RUNNERS[stage](cfg, case, out, jobs)
    except Exception as exc:
        raise StageFailed(stage, exit_code_for(exc), exc) from exc
    _marker(out, stage).write_text(digest + "\n")


def run_pipeline(cfg: RunConfig, jobs: int = 1, only: str | None = None) -> dict[str, str]:
    """Run (or resume) the staged pipeline; returns a stage -> "ran"/"skipped" map.

    With ``only`` set, that single stage is rerun unconditionally and its
    upstream stages must already be current.
    """
    case = load_case(cfg.case_path)
    out = resolve_out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    hashes = stage_hashes(cfg, case)
    status = {}
    if only is not None:
        for up in STAGES[:STAGES.index(only)]:
            if not stage_is_current(out, up, hashes[up]):
                raise StageFailed(only, EXIT_INPUT, InputError(f"upstream stage {up} is missing or stale"))
        log.info("running stage %s", only)
        run_stage(only, cfg, case, out, jobs, hashes[only])
        return {only: "ran"}
    stale = False
    for stage in STAGES:
        if not stale and stage_is_current(out, stage, hashes[stage]):
            log.info("stage %s is up to date, skipping", stage)
            status[stage] = "skipped"
            continue
        stale = True
        log.info("running stage %s", stage)
        run_stage(stage, cfg, case, out, jobs, hashes[stage])
        status[stage] = "ran"
    return status


# -- small writers -------------------------------------------------------------------------

def write_loss_history(history, path: str | Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, repr(float(v))])


def write_schedule(sched, path: str | Path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "beta", "alpha", "alpha_bar", "sigma"])
        for t in range(1, sched.T + 1):
            w.writerow([t] + [repr(float(a[t - 1])) for a in (sched.beta, sched.alpha, sched.alpha_bar, sched.sigma)])


def write_candidates(cands, seeds, path: str | Path):
    with open(path, "w") as fh:
        for seed, c in zip(seeds, cands):
            if isinstance(c, str):
                row = {"seed": seed, "error": c}
            else:
                row = {"seed": seed, "branch_index": c.outage.branch_index, "from_bus": c.outage.from_bus,
                       "to_bus": c.outage.to_bus, "crit_p": c.crit_p.tolist(), "crit_q": c.crit_q.tolist(),
                       "thresholded_removals": [list(p) for p in c.thresholded_removals]}
            fh.write(json.dumps(row) + "\n")


def read_candidates(path: str | Path, case: NetworkCase) -> list:
    out = []
    for line in Path(path).read_text().splitlines():
        row = json.loads(line)
        if "error" in row:
            out.append(row["error"])
            continue
        out.append(DecodedSample(crit_p=np.array(row["crit_p"]), crit_q=np.array(row["crit_q"]),
                                 outage=OutageId(row["branch_index"], row["from_bus"], row["to_bus"]),
                                 thresholded_removals=tuple(tuple(p) for p in row["thresholded_removals"])))
    return out


# -- commands ------------------------------------------------------------------------------

def _load(path: str) -> NetworkCase:
    try:
        return load_case(path)
    except FileNotFoundError:
        raise InputError(f"case not found: {path}") from None


def cmd_case_info(args) -> int:
    case = _load(args.case)
    info = {
        "name": case.name,
        "buses": case.n_bus,
        "generators": len(case.gens),
        "branches": len(case.branches),
        "in_service_branches": case.n_in_service(),
        "slack_bus": case.buses[case.slack].id,
        "base_mva": case.base_mva,
        "connected": is_connected(case),
        "total_pd": float(case.pd.sum()),
        "total_qd": float(case.qd.sum()),
    }
    if args.json:
        print(json.dumps(info, indent=2))
    else:
        print(f"{info['name']}: {info['buses']} buses, {info['branches']} branches, {info['generators']} generators")
        print(f"slack bus {info['slack_bus']}, base {info['base_mva']} MVA, "
              f"{'connected' if info['connected'] else 'NOT connected'}")
        print(f"total load {info['total_pd']:.2f} MW, {info['total_qd']:.2f} MVAr")
    return EXIT_OK


def cmd_pf(args) -> int:
    case = _load(args.case)
    sol = solve_newton(case, tol=args.tol, max_iter=args.max_iter)
    if args.json:
        print(json.dumps({"converged": sol.converged, "iterations": sol.iterations,
                          "max_mismatch": sol.max_mismatch,
                          "buses": [{"id": b.id, "vm": float(vm), "va_deg": float(np.rad2deg(va))}
                                    for b, vm, va in zip(case.buses, sol.state.vm, sol.state.va)]}, indent=2))
    else:
        print(f"converged={sol.converged} iterations={sol.iterations} max_mismatch={sol.max_mismatch:.3e}")
        print("bus        vm     va_deg")
        for b, vm, va in zip(case.buses, sol.state.vm, sol.state.va):
            print(f"{b.id:>3} {vm:9.5f} {np.rad2deg(va):10.4f}")
    return EXIT_OK if sol.converged else EXIT_NUMERIC


def _outage_index(case: NetworkCase, text: str | None) -> int | None:
    if text is None:
        return None
    if "-" in text:
        a, b = (int(x) for x in text.split("-"))
        for k, br in enumerate(case.branches):
            if br.status and {br.from_bus, br.to_bus} == {a, b}:
                return k
        raise InputError(f"no in-service branch {text}")
    k = int(text)
    if not 0 <= k < len(case.branches):
        raise InputError(f"branch index {k} out of range")
    return k


def cmd_cpf(args) -> int:
    case = _load(args.case)
    schedule = transfer_schedule(case, args.target_scale)
    k = _outage_index(case, args.outage)
    studied = case if k is None else apply_outage(case, k)
    if not is_connected(studied):
        raise InputError("the outage islands the network")
    trace = run_cpf(studied, schedule, CpfOptions(scheme=Scheme(args.scheme)))
    if args.trace:
        write_trace_csv(trace, args.trace, studied)
    print(f"max_lambda={trace.max_lambda!r} terminated={trace.terminated.value} points={len(trace.points)}")
    return EXIT_OK


def cmd_rank(args) -> int:
    case = _load(args.case)
    if not solve_newton(case).converged:
        raise NumericalFailure("base case power flow diverged")
    table = rank_all(case, transfer_schedule(case, args.target_scale), jobs=args.jobs)
    if args.out:
        write_ranking_csv(table, args.out)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["outage_from", "outage_to", "max_lambda", "rank"])
        for row in table.rows:
            w.writerow([row.outage.from_bus, row.outage.to_bus, repr(row.max_lambda), row.rank])
    if table.failed:
        log.warning("%d outages did not reach a nose point and are not ranked", len(table.failed))
    return EXIT_OK


def _stage_cmd(stage: str):
    def run(args) -> int:
        run_pipeline(read_config(args.config), jobs=args.jobs, only=stage)
        return EXIT_OK
    return run


def cmd_pipeline(args) -> int:
    cfg = read_config(args.config)
    status = run_pipeline(cfg, jobs=args.jobs)
    out = resolve_out_dir(cfg)
    summary = json.loads((out / "summary.json").read_text())
    print(" ".join(f"{k}:{v}" for k, v in status.items()))
    print(f"score={summary['score']:.3f} mae_p={summary['mae_p']:.4f} mae_q={summary['mae_q']:.4f} "
          f"summary={out / 'summary.json'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gridscreen", description="Contingency screening with residual diffusion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("case-info", help="summarize a case file")
    s.add_argument("case", help="MATPOWER .m path or bundled name (case6ww, case14, case30)")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_case_info)

    s = sub.add_parser("pf", help="Newton power flow from flat start")
    s.add_argument("case")
    s.add_argument("--tol", type=float, default=1e-8)
    s.add_argument("--max-iter", type=int, default=30)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_pf)

    s = sub.add_parser("cpf", help="continuation power flow to the nose point")
    s.add_argument("case")
    s.add_argument("--outage", help="branch index or FROM-TO bus pair to remove first")
    s.add_argument("--target-scale", type=float, default=2.5)
    s.add_argument("--scheme", choices=[m.value for m in Scheme], default=Scheme.PSEUDO_ARC_LENGTH.value)
    s.add_argument("--trace", help="write the traced curve to this CSV")
    s.set_defaults(func=cmd_cpf)

    s = sub.add_parser("rank", help="brute-force N-1 ranking by collapse margin")
    s.add_argument("case")
    s.add_argument("--target-scale", type=float, default=2.5)
    s.add_argument("--out", help="CSV path (default: stdout)")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_rank)

    for stage in STAGES:
        s = sub.add_parser(stage, help=f"run only the {stage} stage of a configured run")
        s.add_argument("--config", required=True)
        s.add_argument("--jobs", type=int, default=1)
        s.set_defaults(func=_stage_cmd(stage))

    s = sub.add_parser("pipeline", help="gen-data, train, sample, eval with resumable stages")
    s.add_argument("--config", required=True, help="JSON run config; missing keys take defaults")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_pipeline)
    return p


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageFailed):
        return exc.code
    if isinstance(exc, (InputError, CaseError, json.JSONDecodeError)):
        return EXIT_INPUT
    if isinstance(exc, (CpfError, SingularJacobian, NonFiniteLoss, TooFewConverged, NumericalFailure,
                        FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (ValueError, KeyError, IndexError)):
        return EXIT_INPUT
    return 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except Exception as exc:
        code = exit_code_for(exc)
        if code == 1:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
