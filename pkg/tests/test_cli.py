import json
import shutil
import subprocess

import numpy as np
import pytest

from diffquot.cli import ConfigError, compile_expression, compile_fn, main, read_config


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def linear_exist_cfg():
    return json.loads(json.dumps(read_config("linear-exist")))


def test_builtin_forward_run(tmp_path):
    assert main(["run", "linear-exist", "--out", str(tmp_path)]) == 0
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["status"] == "pass"
    assert summary["pipelines"]["forward"]["residual"] <= 1e-8
    assert "delta" in summary["delta_values"]["forward"]
    header = (tmp_path / "forward_f.csv").read_text().splitlines()[0]
    assert header.startswith("t,x,f_1")
    header = (tmp_path / "forward_density.csv").read_text().splitlines()[0]
    assert header.startswith("t,w,A_1")


def test_outputs_are_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "linear-exist", "--out", str(a), "--seed", "3"]) == 0
    assert main(["run", "linear-exist", "--out", str(b), "--seed", "3"]) == 0
    for f in a.glob("*.csv"):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_missing_constant_names_the_field(tmp_path, capsys):
    cfg = linear_exist_cfg()
    del cfg["scenario"]["constants"]["eps1"]
    assert main(["run", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    assert "scenario.constants" in err and "eps1" in err


def test_missing_pipeline_input(tmp_path, capsys):
    cfg = linear_exist_cfg()
    del cfg["scenario"]["f_initial"]
    assert main(["run", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 1
    assert "scenario.f_initial" in capsys.readouterr().err


def test_borg_zero_potential(tmp_path):
    cfg = json.loads(json.dumps(read_config("borg")))
    cfg["scenario"]["potential"] = 0
    assert main(["run", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert summary["pipelines"]["mfunction"]["residual"] <= 1e-6


def test_failed_verdict_exit_code(tmp_path):
    cfg = linear_exist_cfg()
    cfg["scenario"]["f_initial"] = "1 + x"
    cfg["tolerances"]["residual"] = 1e-300
    cfg["tolerances"]["consistency"] = 1e-300
    code = main(["run", str(write(tmp_path, cfg)), "--out", str(tmp_path / "o")])
    assert code == 2
    assert json.loads((tmp_path / "o" / "summary.json").read_text())["status"] == "fail"


def test_list(capsys):
    assert main(["list"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 5
    names = [line.split()[0] for line in lines]
    assert "linear-exist" in names and "calderon-ti" in names


def test_console_script(tmp_path):
    exe = shutil.which("diffquot")
    if exe is None:
        pytest.skip("console script not on PATH")
    out = subprocess.run([exe, "list"], capture_output=True, text=True, check=True).stdout
    assert "borg" in out


def test_unknown_config(capsys):
    assert main(["run", "no-such-scenario", "--out", "unused"]) == 1
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("text", ["__import__('os')", "t.real", "[t]", "open('x')", "lambda t: t", "'a'"])
def test_expression_rejects_non_arithmetic(text):
    with pytest.raises(ConfigError):
        compile_expression(text, "t", "scenario.trace")


def test_expression_values():
    f = compile_expression("1 + 0.5*sin(t) + pi*(t > 1)", "t", "x")
    t = np.array([0.0, 2.0])
    assert np.allclose(f(t), [1.0, 1 + 0.5 * np.sin(2.0) + np.pi])
    with pytest.raises(ConfigError, match="unknown name 'w'"):
        compile_expression("w", "t", "scenario.trace")
    g = compile_fn([1, "x"], "x", "f")
    assert g(np.array([0.5, 2.0])).tolist() == [[1.0, 0.5], [1.0, 2.0]]
