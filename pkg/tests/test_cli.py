import json

import pytest

from sftnkit import pipeline
from sftnkit.checkpoint import load_checkpoint
from sftnkit.cli import main
from sftnkit.config import ConfigValidationError, parse_config
from sftnkit.report import (COMPARISON_COLUMNS, SWEEP_COLUMNS, RunReport, SeedResult, compare_reports, read_csv,
                            write_csv)
from sftnkit.trainer import DivergenceError

BASE = {
    "teacher_arch": "teacher-S3", "student_arch": "student-S3", "teacher_mode": "sftn", "seeds": [1],
    "dataset": {"n": 60}, "teacher_sgd": {"epochs": 1, "batch_size": 30},
    "student_sgd": {"epochs": 1, "batch_size": 30},
}


def _write(tmp_path, name="cfg.json", **over):
    raw = {**BASE, **over}
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path, parse_config(raw)


def _only_dir(root):
    dirs = [d for d in root.iterdir() if d.is_dir()]
    assert len(dirs) == 1
    return dirs[0]


# -- config ---------------------------------------------------------------------------------

def test_unknown_key_reports_field_path():
    with pytest.raises(ConfigValidationError) as info:
        parse_config({**BASE, "loss": {"lambda_kl": 1.0, "lamda_ce": 2.0}})
    assert any(p.startswith("loss:") and "lamda_ce" in p for p in info.value.problems)


def test_bad_value_reports_nested_path():
    with pytest.raises(ConfigValidationError) as info:
        parse_config({**BASE, "teacher_sgd": {"lr": -1}})
    assert info.value.problems[0].startswith("teacher_sgd.lr:")


def test_empty_seeds_and_missing_fields_are_errors():
    with pytest.raises(ConfigValidationError, match="seeds"):
        parse_config({**BASE, "seeds": []})
    with pytest.raises(ConfigValidationError, match="teacher_mode"):
        parse_config({k: v for k, v in BASE.items() if k != "teacher_mode"})


def test_schedule_validation_surfaces_as_config_error():
    with pytest.raises(ConfigValidationError, match="teacher_sgd"):
        parse_config({**BASE, "teacher_sgd": {"epochs": 5, "milestones": [7]}})


def test_epochs_alone_rescales_default_milestones():
    cfg = parse_config({**BASE, "teacher_sgd": {"epochs": 10}})
    assert cfg.teacher_sgd.milestones == (6, 8, 9)


def test_standard_mode_warns_and_ignores_branch_terms():
    with pytest.warns(UserWarning, match="loss.lambda_kl"):
        cfg = parse_config({**BASE, "teacher_mode": "standard", "loss": {"lambda_kl": 6.0}})
    plain = parse_config({**BASE, "teacher_mode": "standard"})
    assert cfg.loss.lambda_kl == plain.loss.lambda_kl and cfg.hash() == plain.hash()


def test_config_hash_tracks_content_not_output_dir():
    a = parse_config(BASE)
    assert a.hash() == parse_config({**BASE, "output_dir": "/elsewhere"}).hash()
    assert a.hash() != parse_config({**BASE, "seeds": [2]}).hash()
    assert a.hash() != parse_config({**BASE, "loss": {"lambda_kl": 1.0}}).hash()


# -- train-teacher / distill ---------------------------------------------------------------------

def test_train_teacher_writes_trunk_checkpoint_and_sidecar(tmp_path):
    cfg_path, cfg = _write(tmp_path)
    assert main(["train-teacher", "--config", str(cfg_path), "--out", str(tmp_path / "runs")]) == 0
    run_dir = tmp_path / "runs" / cfg.hash()
    ckpt = run_dir / "teacher-sftn-seed1.ckpt"
    side = json.loads(ckpt.with_suffix(".json").read_text())
    assert side["trunk_only"] and side["config_hash"] == cfg.hash() and side["teacher_mode"] == "sftn"
    assert load_checkpoint(ckpt).name == "teacher-S3"
    report = json.loads((run_dir / "teacher_report.json").read_text())
    assert report["schema_version"] == 1 and report["dataset_hash"] and report["config_hash"] == cfg.hash()


@pytest.mark.parametrize("mode", ["standard", "sftn-ft"])
def test_train_teacher_other_modes(tmp_path, mode):
    cfg_path, cfg = _write(tmp_path, teacher_mode=mode, finetune={"epochs_branch_only": 1, "epochs_joint": 1})
    assert main(["train-teacher", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    assert (tmp_path / cfg.hash() / f"teacher-{mode}-seed1.ckpt").exists()


def test_two_runs_reproduce_checkpoint_and_report_hashes(tmp_path):
    cfg_path, cfg = _write(tmp_path)
    for out in ("a", "b"):
        assert main(["train-teacher", "--config", str(cfg_path), "--out", str(tmp_path / out), "--threads", "1"]) == 0
    a, b = (json.loads((tmp_path / o / cfg.hash() / "teacher_report.json").read_text()) for o in "ab")
    assert a["report_hash"] == b["report_hash"]
    assert a["results"][0]["teacher_hash"] == b["results"][0]["teacher_hash"]


def test_output_root_from_environment(tmp_path, monkeypatch):
    cfg_path, cfg = _write(tmp_path)
    monkeypatch.setenv("SFTN_OUT", str(tmp_path / "envroot"))
    assert main(["train-teacher", "--config", str(cfg_path)]) == 0
    assert (tmp_path / "envroot" / cfg.hash() / "teacher_report.json").exists()


def test_distill_three_seeds_with_aggregate_and_stable_teacher_hash(tmp_path):
    cfg_path, cfg = _write(tmp_path, seeds=[1, 2, 3])
    out = str(tmp_path / "runs")
    assert main(["train-teacher", "--config", str(cfg_path), "--out", out]) == 0
    assert main(["distill", "--config", str(cfg_path), "--out", out]) == 0
    run_dir = tmp_path / "runs" / cfg.hash()
    first = RunReport.load(run_dir / "distill_report.json")
    assert len(first.results) == 3
    assert first.aggregate()["student_acc"]["n"] == 3
    table = read_csv((run_dir / "distill_report.csv").read_text())
    assert [r["seed"] for r in table] == [1, 2, 3, "mean", "std"]
    assert main(["distill", "--config", str(cfg_path), "--out", out]) == 0
    again = RunReport.load(run_dir / "distill_report.json")
    assert [r.teacher_hash for r in again.results] == [r.teacher_hash for r in first.results]


def test_distill_fitnets_lists_hint_curve(tmp_path):
    cfg_path, cfg = _write(tmp_path, distill={"method": "FitNets"}, student_sgd={"epochs": 2, "batch_size": 30})
    out = str(tmp_path / "runs")
    assert main(["train-teacher", "--config", str(cfg_path), "--out", out]) == 0
    assert main(["distill", "--config", str(cfg_path), "--out", out]) == 0
    rep = RunReport.load(tmp_path / "runs" / cfg.hash() / "distill_report.json")
    hist = rep.results[0].student_history
    assert len(hist) == 2 and all("hint" in h for h in hist)


def test_distill_without_teacher_fails_cleanly(tmp_path, capsys):
    cfg_path, _ = _write(tmp_path)
    assert main(["distill", "--config", str(cfg_path), "--out", str(tmp_path)]) == 2
    assert "train-teacher" in capsys.readouterr().err


def test_distill_rejects_mismatched_teacher_checkpoint(tmp_path, capsys):
    cfg_path, cfg = _write(tmp_path, teacher_arch="student-S3")
    assert main(["train-teacher", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    ckpt = tmp_path / cfg.hash() / "teacher-sftn-seed1.ckpt"
    cfg2, _ = _write(tmp_path, "cfg2.json", teacher_checkpoint=str(ckpt))
    assert main(["distill", "--config", str(cfg2), "--out", str(tmp_path)]) == 2
    assert "mismatch" in capsys.readouterr().err


def test_invalid_config_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({**BASE, "extra": 1}))
    assert main(["train-teacher", "--config", str(path)]) == 2
    assert "extra" in capsys.readouterr().err


# -- sweep ----------------------------------------------------------------------------------------

def test_sweep_writes_one_row_per_value_and_seed(tmp_path):
    cfg_path, cfg = _write(tmp_path, seeds=[1, 2])
    assert main(["sweep", "--config", str(cfg_path), "--out", str(tmp_path), "--axis", "lambda_kl",
                 "--values", "1", "3"]) == 0
    rows = read_csv((tmp_path / cfg.hash() / "sweep-lambda_kl.csv").read_text())
    assert [(r["value"], r["seed"]) for r in rows] == [(1.0, 1), (1.0, 2), (3.0, 1), (3.0, 2)]
    assert list(rows[0]) == list(SWEEP_COLUMNS)


def test_sweep_grids_map_to_configurations():
    cfg = parse_config(BASE)
    taus = [pipeline.sweep_config(cfg, "tau_tilde", v).loss.tau_tilde for v in (1, 5, 10, 15, 20)]
    assert taus == [1, 5, 10, 15, 20]
    branches = [pipeline.sweep_config(cfg, "branches", v).loss.branches for v in ([1], [2], [1, 2])]
    assert branches == [(1,), (2,), (1, 2)]
    with pytest.raises(ValueError):
        pipeline.sweep_config(cfg, "tau_tilde", 0.0)


def test_sweep_empty_values_is_an_error(tmp_path):
    cfg_path, _ = _write(tmp_path)
    assert main(["sweep", "--config", str(cfg_path), "--out", str(tmp_path), "--axis", "lambda_kl"]) == 2


def test_aborted_sweep_point_keeps_completed_rows(tmp_path, monkeypatch):
    cfg_path, cfg = _write(tmp_path)
    real = pipeline.full_run

    def flaky(point, seed, train, test):
        if point.loss.lambda_kl == 6.0:
            raise DivergenceError(0, 0, float("nan"))
        return real(point, seed, train, test)

    monkeypatch.setattr(pipeline, "full_run", flaky)
    assert main(["sweep", "--config", str(cfg_path), "--out", str(tmp_path), "--axis", "lambda_kl",
                 "--values", "1", "6"]) == 1
    rows = read_csv((tmp_path / cfg.hash() / "sweep-lambda_kl.csv").read_text())
    assert [r["status"] for r in rows] == ["ok", "aborted"]
    assert rows[1]["teacher_acc"] is None


# -- report -------------------------------------------------------------------------------------------

def _report(mode, seeds, acc, method="KD", dataset="d0"):
    cfg = {**parse_config(BASE).to_dict(), "teacher_mode": mode}
    cfg["distill"]["method"] = method
    sim = {"mean_kl": 0.1, "cka": 0.9, "top1_agreement": 0.95, "teacher_entropy": 0.2, "student_entropy": 0.3,
           "kl_reduction": "mean-per-sample"}
    return RunReport("distill", cfg, "h-" + mode, dataset,
                     [SeedResult(s, 0.9, "t", student_acc=acc, student_hash="s", similarity=sim) for s in seeds])


def test_identical_arms_give_zero_delta():
    comp = compare_reports([_report("standard", [1, 2], 0.8125), _report("sftn", [1, 2], 0.8125)])
    assert [r["delta"] for r in comp.rows] == [0.0, 0.0] and not comp.unpaired
    assert len(comp.similarity) == 4


def test_missing_sftn_arm_leaves_delta_blank():
    comp = compare_reports([_report("standard", [1], 0.8), _report("sftn", [1], 0.9, dataset="other")])
    std_rows = [r for r in comp.rows if r["standard_student_acc"] is not None]
    assert std_rows and all(r["delta"] is None for r in comp.rows)
    assert len(comp.unpaired) == 2
    assert ",," in write_csv(std_rows, COMPARISON_COLUMNS).splitlines()[1]


def test_comparison_csv_roundtrips_bit_exactly():
    comp = compare_reports([_report("standard", [1, 2], 0.1 + 0.2), _report("sftn", [1, 2], 1 / 3)])
    text = write_csv(comp.rows, COMPARISON_COLUMNS)
    back = read_csv(text)
    assert back == comp.rows
    assert write_csv(back, COMPARISON_COLUMNS) == text


def test_report_command_end_to_end(tmp_path):
    dirs = []
    for mode in ("standard", "sftn"):
        cfg_path, cfg = _write(tmp_path, f"{mode}.json", teacher_mode=mode)
        out = str(tmp_path / "runs")
        assert main(["train-teacher", "--config", str(cfg_path), "--out", out]) == 0
        assert main(["distill", "--config", str(cfg_path), "--out", out]) == 0
        dirs.append(str(tmp_path / "runs" / cfg.hash()))
    assert dirs[0] != dirs[1]
    assert main(["report", *dirs, "--out", str(tmp_path / "cmp")]) == 0
    rows = read_csv((tmp_path / "cmp" / "comparison.csv").read_text())
    assert len(rows) == 1 and rows[0]["delta"] == rows[0]["sftn_student_acc"] - rows[0]["standard_student_acc"]


# -- eval / probe -------------------------------------------------------------------------------------

def test_eval_and_probe(tmp_path, capsys):
    cfg_path, cfg = _write(tmp_path)
    assert main(["train-teacher", "--config", str(cfg_path), "--out", str(tmp_path)]) == 0
    ckpt = str(tmp_path / cfg.hash() / "teacher-sftn-seed1.ckpt")
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg_path), "--checkpoint", ckpt]) == 0
    assert 0 <= json.loads(capsys.readouterr().out)["test_accuracy"] <= 1
    assert main(["probe", "--checkpoint", ckpt, "--n", "60", "--epochs", "2"]) == 0
    assert 0 <= json.loads(capsys.readouterr().out)["probe_accuracy"] <= 1
