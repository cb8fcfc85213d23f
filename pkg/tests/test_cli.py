import json

import pytest

from gridscreen.case_model import load_case, to_matpower
from gridscreen.cli import RunConfig, main, read_config

TINY_RUN = {
    "case_path": "case6ww",
    "dataset_n": 60,
    "master_seed": 2,
    "training": {"T": 10, "epochs": 2, "batch_size": 4},
    "net": {"base_width": 8, "depth": 1, "time_embed_dim": 16, "norm_groups": 4},
    "eval": {"n_eval_samples": 3, "seed": 5},
}


def write_config(tmp_path, **over):
    cfg = {**TINY_RUN, "out_dir": str(tmp_path / "run"), **over}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_case_info(capsys):
    assert main(["case-info", "case30"]) == 0
    assert "30 buses, 41 branches" in capsys.readouterr().out
    assert main(["case-info", "case14", "--json"]) == 0
    info = json.loads(capsys.readouterr().out)
    assert info["buses"] == 14 and info["branches"] == 20 and info["connected"] is True


def test_case_info_malformed(tmp_path, capsys):
    bad = tmp_path / "bad.m"
    bad.write_text(to_matpower(load_case("case6ww")).replace("\t4\t1\t70", "\t4\tX\t70"))
    assert main(["case-info", str(bad)]) == 2
    assert "line" in capsys.readouterr().err
    assert main(["case-info", str(tmp_path / "missing.m")]) == 2


def test_pf_and_cpf(tmp_path, capsys):
    assert main(["pf", "case14", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)["converged"] is True
    trace = tmp_path / "trace.csv"
    assert main(["cpf", "case6ww", "--outage", "2-4", "--trace", str(trace)]) == 0
    assert "NoseDetected" in capsys.readouterr().out
    assert trace.read_text().startswith("step,lambda")
    assert main(["cpf", "case6ww", "--outage", "9-9"]) == 2


def test_rank_table(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["rank", "case6ww", "--out", str(a)]) == 0
    assert main(["rank", "case6ww", "--out", str(b), "--jobs", "2"]) == 0
    lines = a.read_text().splitlines()
    assert len(lines) == 12 and [int(r.split(",")[3]) for r in lines[1:]] == list(range(1, 12))
    assert a.read_bytes() == b.read_bytes()


def test_rank_diverging_base(tmp_path):
    case = load_case("case6ww")
    heavy = tmp_path / "heavy.m"
    heavy.write_text(to_matpower(case.with_loads(case.pd * 20, case.qd * 20)))
    assert main(["rank", str(heavy)]) == 3


def test_config_defaults_materialized(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"case_path": "case14"}))
    cfg = read_config(path)
    assert cfg.dataset_n == 5000 and cfg.training.T == 200 and cfg.eval.n_eval_samples == 100
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_bad_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"case_path": "case6ww", "bogus": 1}))
    assert main(["pipeline", "--config", str(path)]) == 2
    path.write_text("{not json")
    assert main(["pipeline", "--config", str(path)]) == 2
    path.write_text(json.dumps({"training": {"T": 3}}))
    assert main(["pipeline", "--config", str(path)]) == 2


def test_pipeline_resumes(tmp_path, capsys, monkeypatch):
    cfg = write_config(tmp_path)
    assert main(["pipeline", "--config", str(cfg)]) == 0
    out = tmp_path / "run"
    summary = json.loads((out / "summary.json").read_text())
    assert "score" in summary and summary["config"]["dataset_n"] == 60
    for name in ("dataset.jsonl", "model.ckpt", "loss_history.csv", "schedule.csv", "samples.jsonl",
                 "report.csv", "rank_frequency.svg"):
        assert (out / name).exists()
    first = (out / "summary.json").read_bytes()
    capsys.readouterr()

    assert main(["pipeline", "--config", str(cfg)]) == 0
    assert "gen-data:skipped train:skipped sample:skipped eval:skipped" in capsys.readouterr().out

    cfg = write_config(tmp_path, training={**TINY_RUN["training"], "epochs": 3})
    assert main(["pipeline", "--config", str(cfg)]) == 0
    assert "gen-data:skipped train:ran sample:ran eval:ran" in capsys.readouterr().out

    # environment override of the output directory only
    monkeypatch.setenv("GRIDSCREEN_OUT_DIR", str(tmp_path / "elsewhere"))
    cfg = write_config(tmp_path)
    assert main(["pipeline", "--config", str(cfg)]) == 0
    assert (tmp_path / "elsewhere" / "summary.json").read_bytes() == first


def test_single_stage_commands(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["train", "--config", str(cfg)]) == 2  # no dataset yet
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train", "--config", str(cfg)]) == 0
    assert main(["sample", "--config", str(cfg)]) == 0
    assert main(["eval", "--config", str(cfg)]) == 0
    assert (tmp_path / "run" / "summary.json").exists()


def test_stage_failure_names_stage(tmp_path, capsys):
    case = load_case("case6ww")
    heavy = tmp_path / "heavy.m"
    heavy.write_text(to_matpower(case.with_loads(case.pd * 20, case.qd * 20)))
    cfg = write_config(tmp_path, case_path=str(heavy), dataset_n=10)
    assert main(["pipeline", "--config", str(cfg)]) == 3
    assert "stage gen-data failed" in capsys.readouterr().err
