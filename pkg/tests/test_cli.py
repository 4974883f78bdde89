"""Command-line behavior: artifacts, exit codes, overrides, and listings."""

import json

import numpy as np
import pytest

from bilevelopt import METHOD_NAMES, read_params
from bilevelopt.cli import entry


def _write_config(tmp_path, **updates):
    raw = {
        "data": {
            "num_classes": 8,
            "dim": 6,
            "way": 3,
            "shot": 1,
            "query": 4,
            "batch_size": 2,
        },
        "problem": {"kind": "mlp", "hidden": 4, "reg": "l2", "reg_coef": 0.05},
        "inner": {"steps": 2, "step_size": 0.05},
        "meta_opt": {"kind": "momentum", "lr": 0.01},
        "run": {"method": "MAML", "meta_iterations": 3, "eval_every": 2, "eval_tasks": 4},
    }
    for section, body in updates.items():
        raw.setdefault(section, {}).update(body)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(raw))
    return path


def test_run_writes_all_artifacts(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    code = entry(["run", "--config", str(cfg), "--out", str(out)])
    assert code == 0
    assert (out / "metrics.jsonl").is_file()
    assert (out / "config.resolved.json").is_file()
    assert (out / "final_params.bin").is_file()

    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 3
    records = [json.loads(line) for line in lines]
    assert [r["meta_iter"] for r in records] == [0, 1, 2]
    assert records[1]["eval_post_adapt_accuracy"] is not None
    assert records[0]["eval_post_adapt_accuracy"] is None

    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["run"]["method"] == "MAML"
    assert resolved["inner"]["steps"] == 2

    params = read_params(out / "final_params.bin")
    assert params.layout.names == ("init",)
    assert "finished 3 meta-iterations" in capsys.readouterr().out


def test_run_overrides_take_effect(tmp_path):
    cfg = _write_config(tmp_path)
    out = tmp_path / "out"
    code = entry(
        [
            "run",
            "--config", str(cfg),
            "--out", str(out),
            "--set", "inner.steps=4",
            "--set", "run.meta_iterations=1",
        ]
    )
    assert code == 0
    resolved = json.loads((out / "config.resolved.json").read_text())
    assert resolved["inner"]["steps"] == 4
    assert len((out / "metrics.jsonl").read_text().splitlines()) == 1


def test_run_threads_flag_overrides_config(tmp_path):
    cfg = _write_config(tmp_path)
    out1, out2 = tmp_path / "serial", tmp_path / "pooled"
    assert entry(["run", "--config", str(cfg), "--out", str(out1)]) == 0
    assert entry(
        ["run", "--config", str(cfg), "--out", str(out2), "--threads", "3"]
    ) == 0
    resolved = json.loads((out2 / "config.resolved.json").read_text())
    assert resolved["run"]["threads"] == 3
    m1 = [json.loads(r) for r in (out1 / "metrics.jsonl").read_text().splitlines()]
    m2 = [json.loads(r) for r in (out2 / "metrics.jsonl").read_text().splitlines()]
    for a, b in zip(m1, m2):
        assert abs(a["ul_loss"] - b["ul_loss"]) <= 1e-12


def test_missing_config_exits_2_and_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nowhere.json"
    code = entry(["run", "--config", str(missing), "--out", str(tmp_path / "o")])
    assert code == 2
    assert str(missing) in capsys.readouterr().err


def test_invalid_json_exits_2(tmp_path, capsys):
    cfg = tmp_path / "broken.json"
    cfg.write_text("{not json")
    code = entry(["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "invalid JSON" in capsys.readouterr().err


def test_bad_field_exits_2(tmp_path, capsys):
    cfg = _write_config(tmp_path, run={"method": "reptile"})
    code = entry(["run", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert code == 2
    assert "run.method" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_numeric_abort_exits_3(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(
        json.dumps(
            {
                "problem": {"kind": "quadratic"},
                "inner": {"steps": 60, "step_size": 1e6},
                "run": {"method": "RHG", "meta_iterations": 2},
            }
        )
    )
    out = tmp_path / "o"
    code = entry(["run", "--config", str(cfg_path), "--out", str(out)])
    assert code == 3
    assert "meta-iteration 0" in capsys.readouterr().err
    assert not (out / "metrics.jsonl").exists()


def test_verify_passes_and_writes_report(tmp_path, capsys):
    report = tmp_path / "report.jsonl"
    code = entry(["verify", "--profile", "exact", "--report", str(report)])
    assert code == 0
    out = capsys.readouterr().out
    assert "checks passed" in out
    assert "FAIL" not in out
    lines = report.read_text().splitlines()
    assert lines
    assert all(json.loads(line)["pass"] for line in lines)


def test_verify_failure_exits_1(monkeypatch, capsys):
    import bilevelopt.hypergrad as hg
    from bilevelopt import HyperGradResult

    true_reverse = hg.hypergrad_reverse

    def skewed(problem, paradigm, traj, x, task):
        res = true_reverse(problem, paradigm, traj, x, task)
        return HyperGradResult(grad_x=1.2 * res.grad_x, ul_value=res.ul_value)

    monkeypatch.setattr(hg, "hypergrad_reverse", skewed)
    code = entry(["verify", "--profile", "exact"])
    assert code == 1
    assert "FAIL" in capsys.readouterr().out


def test_verify_rejects_unknown_profile():
    with pytest.raises(SystemExit) as exc:
        entry(["verify", "--profile", "strict"])
    assert exc.value.code == 2


def test_list_methods_prints_the_whole_table(capsys):
    assert entry(["list-methods"]) == 0
    lines = [line for line in capsys.readouterr().out.splitlines() if line.strip()]
    assert len(lines) == 10
    names = [line.split()[0] for line in lines]
    assert names == list(METHOD_NAMES)
    for line in lines:
        assert ("meta_init" in line) != ("meta_feature" in line)


def test_list_methods_output_is_stable(capsys):
    entry(["list-methods"])
    first = capsys.readouterr().out
    entry(["list-methods"])
    second = capsys.readouterr().out
    assert first == second


def test_serial_runs_are_byte_identical(tmp_path):
    cfg = _write_config(tmp_path)
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert entry(["run", "--config", str(cfg), "--out", str(out1)]) == 0
    assert entry(["run", "--config", str(cfg), "--out", str(out2)]) == 0
    assert (out1 / "metrics.jsonl").read_bytes() == (out2 / "metrics.jsonl").read_bytes()
    assert (out1 / "final_params.bin").read_bytes() == (
        out2 / "final_params.bin"
    ).read_bytes()


def test_final_params_reflect_training(tmp_path):
    cfg = _write_config(tmp_path, run={"method": "Meta-SGD", "meta_iterations": 2})
    out = tmp_path / "out"
    assert entry(["run", "--config", str(cfg), "--out", str(out)]) == 0
    params = read_params(out / "final_params.bin")
    assert params.layout.names == ("init", "rates")
    assert np.all(np.isfinite(params.values))
