import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from carlemanlab.cli import main
from carlemanlab.config import ConfigError, parse_config, parse_config_text
from carlemanlab.grid import Grid, ScalarField, write_snapshot

MINIMAL = """\
[experiment]
name = check-media

[media]
mu0 = 0.5
lambda0 = 0.5

[carleman]
rho = 0.1
"""


def media_config(tmp_path, n=12, extra=""):
    p = tmp_path / "cfg.ini"
    p.write_text(f"""\
[experiment]
name = check-media
seed = 3
out = {tmp_path / 'out'}

[grid]
n = {n}

[media]
mu0 = 0.9
lambda0 = 0.9
M0 = 60

[carleman]
x0 = -0.5, 0.5, 0.5
rho = 0.25
{extra}""")
    return p


def test_minimal_config_defaults():
    cfg = parse_config_text(MINIMAL, env={})
    assert cfg.experiment == "check-media" and cfg.seed == 0
    assert cfg.get("grid", "n") == (32, 32, 32)
    assert cfg.get("media", "M0") == 100.0
    assert cfg.get("carleman", "gamma") == 0.3
    assert cfg.get("carleman", "x0") == (-0.5, 0.5, 0.5)
    assert cfg.get("stability", "rows") == (2, 3, 4, 9, 10, 12)


def test_unknown_key_reports_line():
    text = MINIMAL.replace("rho = 0.1", "rho = 0.1\nrhoo = 2")
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text, "x.ini", env={})
    assert exc.value.line == 10
    assert "rhoo" in str(exc.value)


def test_unknown_key_allowed_when_permissive():
    text = MINIMAL + "[extras]\nfoo = 1\n"
    cfg = parse_config_text(text, strict=False, env={})
    assert "extras" not in cfg.sections


def test_bad_type_names_expected_type():
    with pytest.raises(ConfigError, match="expected number"):
        parse_config_text(MINIMAL.replace("rho = 0.1", "rho = lots"), env={})


def test_missing_required_key_and_block():
    with pytest.raises(ConfigError, match="mu0"):
        parse_config_text(MINIMAL.replace("mu0 = 0.5\n", ""), env={})
    with pytest.raises(ConfigError, match=r"\[carleman\]"):
        parse_config_text(MINIMAL.split("[carleman]")[0], env={})


def test_unknown_experiment():
    with pytest.raises(ConfigError, match="unknown experiment"):
        parse_config_text(MINIMAL.replace("check-media", "make-coffee"), env={})


def test_malformed_ini():
    with pytest.raises(ConfigError, match="malformed"):
        parse_config_text("no section header\n", env={})


def test_environment_override():
    cfg = parse_config_text(MINIMAL, env={"CARLAB_CARLEMAN__GAMMA": "0.7",
                                          "CARLAB_MEDIA_MU__VALUE": "2.0"})
    assert cfg.get("carleman", "gamma") == 0.7
    assert cfg.get("media.mu", "value") == 2.0


def test_hash_stable_and_sensitive():
    a = parse_config_text(MINIMAL, env={})
    b = parse_config_text(MINIMAL + "\n", env={})
    c = parse_config_text(MINIMAL.replace("0.1", "0.2"), env={})
    assert a.config_hash == b.config_hash != c.config_hash


def test_to_ini_roundtrip():
    a = parse_config_text(MINIMAL, env={})
    b = parse_config_text(a.to_ini(), env={})
    assert a.canonical() == b.canonical()


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config("/nonexistent/cfg.ini")


def test_cli_check_media_outputs(tmp_path):
    cfg = media_config(tmp_path)
    assert main(["check-media", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    for name in ("pseudoconvexity.csv", "media_report.json", "manifest.json",
                 "margin_slice.png", "margin_slice.dat"):
        assert (out / name).exists(), name
    first = (out / "pseudoconvexity.csv").read_text().splitlines()[0]
    assert first.startswith("# config_hash=") and "seed=3" in first
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"] == "passed" and man["partial"] is False
    assert {"numpy", "scipy", "matplotlib", "python"} <= set(man["versions"])
    rep = json.loads((out / "media_report.json").read_text())
    assert rep["varrho"] == pytest.approx(1.0)


def test_cli_seed_and_out_override(tmp_path):
    cfg = media_config(tmp_path)
    out = tmp_path / "other"
    assert main(["check-media", "--config", str(cfg), "--out", str(out), "--seed", "9"]) == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 9


def test_cli_config_error_exit_code(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text(MINIMAL.replace("rho = 0.1", "rho = 0.1\nbogus = 1"))
    assert main(["check-media", "--config", str(p)]) == 2


def test_cli_invariant_failure_exit_code(tmp_path):
    cfg = media_config(tmp_path, extra="[media.mu]\nprofile = affine-exp\na = 3.0, 0, 0\n")
    assert main(["check-media", "--config", str(cfg)]) == 1


def test_cli_infeasible_parameters_exit_code(tmp_path):
    cfg = media_config(tmp_path, extra="T = 1.0\n")
    cfg.write_text(cfg.read_text().replace("check-media", "verify-carleman"))
    code = main(["verify-carleman", "--config", str(cfg)])
    assert code == 1
    man = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert man["status"] == "infeasible_parameters"
    assert "observation time too short" in man["message"]


def test_cli_numerical_failure_exit_code(tmp_path):
    cfg = media_config(tmp_path, extra="[run]\nT = 0.2\nsafety = 2.0\n")
    code = main(["run-forward", "--config", str(cfg)])
    assert code == 3
    assert json.loads((tmp_path / "out" / "manifest.json").read_text())["partial"] is True


def test_cli_run_forward_small(tmp_path):
    cfg = media_config(tmp_path, extra="[run]\nT = 0.3\ntrace_stride = 2\n")
    assert main(["run-forward", "--config", str(cfg)]) == 0
    s = json.loads((tmp_path / "out" / "forward_summary.json").read_text())
    assert s["divergence_ok"] and s["boundary_ok"]
    assert (tmp_path / "out" / "traces.csv").exists()
    assert (tmp_path / "out" / "energy.png").stat().st_size > 0


def test_cli_snapshot_media(tmp_path):
    g = Grid.unit(12, collar_width=max(0.2, 4 / 12))
    write_snapshot(tmp_path / "mu.txt", ScalarField(g, "cell", np.full(g.shape("cell"), 1.0)))
    cfg = media_config(tmp_path, extra="[media.mu]\nprofile = snapshot\npath = mu.txt\n")
    assert main(["check-media", "--config", str(cfg)]) == 0
    cfg = media_config(tmp_path, n=16, extra="[media.mu]\nprofile = snapshot\npath = mu.txt\n")
    assert main(["check-media", "--config", str(cfg)]) == 2


def test_module_entry_point(tmp_path):
    cfg = media_config(tmp_path)
    r = subprocess.run([sys.executable, "-m", "carlemanlab", "check-media", "--config", str(cfg)],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
