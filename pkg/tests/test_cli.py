import json
import math
import shutil
import subprocess
from pathlib import Path

import pytest

from monge_bellman import cli

GOLDEN = Path(__file__).parent / "golden"


def run(tmp_path, *argv):
    out = tmp_path / "out"
    rc = cli.main([*argv, "--out", str(out)])
    path = out / "summary.json"
    return rc, (json.loads(path.read_text()) if path.exists() else None)


def close(a, b):
    if isinstance(a, float) or isinstance(b, float):
        return math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-10)
    return a == b


@pytest.mark.parametrize("golden, argv", [
    ("solve_real_radial_2d.json", ["solve", "--problem", "real_radial_2d", "--h", "0.0625"]),
    ("verify_identities_d2.json", ["verify-identities", "--d", "2", "--samples", "100", "--seed", "7"]),
])
def test_matches_golden(tmp_path, golden, argv):
    expected = json.loads((GOLDEN / golden).read_text())
    rc, got = run(tmp_path, *argv)
    assert rc == 0
    assert list(got) == list(expected)
    bad = {k: (got[k], expected[k]) for k in expected if not close(got[k], expected[k])}
    assert not bad


@pytest.mark.parametrize("command", sorted(cli.SUMMARY_KEYS))
def test_summary_keys_are_documented_in_readme(command):
    readme = (Path(__file__).parents[1] / "README.md").read_text()
    for key in cli.SUMMARY_KEYS[command]:
        assert f"`{key}`" in readme, (command, key)


def test_solve_radial_example(tmp_path):
    rc, s = run(tmp_path, "solve", "--problem", "real_radial_2d", "--h", "0.03125")
    assert rc == 0
    assert s["residual"] <= s["tol"]
    assert s["max_error"] <= 1e-10
    assert (tmp_path / "out" / "solution.csv").exists()


def test_solution_csv_has_17_digits(tmp_path):
    run(tmp_path, "solve", "--problem", "real_radial_2d", "--h", "0.125")
    rows = (tmp_path / "out" / "solution.csv").read_text().splitlines()
    for field in rows[1].split(","):
        assert field == format(float(field), ".17g")


def test_verify_identities_example(tmp_path):
    rc, s = run(tmp_path, "verify-identities", "--d", "3", "--samples", "1000", "--seed", "7")
    assert rc == 0
    for k in ("max_det_residual", "max_trace_residual", "max_frame_residual", "max_expm_residual"):
        assert s[k] <= 1e-10
    assert s["witness_violates_block_form"] is True


def test_rollout_example(tmp_path):
    rc, s = run(tmp_path, "rollout", "--problem", "real_radial_2d", "--at", "0,0", "--n-paths", "20000")
    assert rc == 0
    assert abs(s["estimate"]) <= 3 * s["std_error"] + 1e-2
    assert s["reference"] == 0.0
    assert s["config"]["n_paths"] == 20000


def test_rollout_grid_policy(tmp_path):
    rc, s = run(tmp_path, "rollout", "--problem", "real_radial_2d", "--at", "0.3,0", "--h", "0.125",
                "--policy", "grid", "--n-paths", "2000", "--dt", "0.01")
    assert rc == 0
    assert s["config"]["policy_source"]["type"] == "grid"


def test_estimate_bounds_writes_profile(tmp_path):
    rc, s = run(tmp_path, "estimate-bounds", "--problem", "real_radial_2d", "--h", "0.125")
    assert rc == 0
    assert s["hessian_bound"]["fitted_N"] <= 1.01
    header = (tmp_path / "out" / "shell_profile.csv").read_text().splitlines()[0]
    assert header == "estimate,psi_level,max_ratio"


def test_check_lemma_small(tmp_path):
    rc, s = run(tmp_path, "check-lemma", "--n-instances", "4", "--seed", "1")
    assert rc == 0 and s["report"]["passes"]


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "run.toml"
    cfg.write_text('problem = "real_radial_2d"\n[grid]\nh = 0.25\nW = 1\n[solver]\ntol = 1e-9\n')
    rc, s = run(tmp_path, "solve", "--config", str(cfg), "--h", "0.125")
    assert rc == 0
    assert s["h"] == 0.125 and s["W"] == 1 and s["tol"] == 1e-9


@pytest.mark.parametrize("text, line, fragment", [
    ('problem = "real_radial_2d"\n[grid]\nh = 0.5\n', 3, "h: must lie in (0, 1/4]"),
    ('problem = "real_radial_2d"\n[grid]\nW = 4\n', 3, "W: must be 1, 2 or 3"),
    ('problem = "real_radial_2d"\n[solver]\ntol = -1.0\n', 3, "tol: must be positive"),
    ('problem = "real_radial_2d"\n[grid]\nwidth = 2\n', 3, "unknown key 'width'"),
    ('problem = "nope"\n', 1, "unknown problem"),
    ('problem = "real_radial_2d"\n[grid]\nh = "fine"\n', 3, "expected float"),
    ('[inline]\ndomain = "torus"\n', 2, "domain: must be one of"),
    ('[inline]\ndomain = "unit_ball"\nsemi_axes = [1.0]\n', 3, "semi_axes"),
    ('problem = "real_radial_2d"\n[grid\n', 2, "invalid TOML"),
])
def test_config_errors_are_line_numbered(tmp_path, capsys, text, line, fragment):
    cfg = tmp_path / "bad.toml"
    cfg.write_text(text)
    rc, _ = run(tmp_path, "solve", "--config", str(cfg))
    err = capsys.readouterr().err
    assert rc == cli.EXIT_CONFIG
    assert f"line {line}:" in err and fragment in err


def test_missing_problem_is_config_error(tmp_path):
    assert run(tmp_path, "solve")[0] == cli.EXIT_CONFIG


def test_missing_config_file_is_io_error(tmp_path):
    assert run(tmp_path, "solve", "--config", str(tmp_path / "absent.toml"))[0] == cli.EXIT_IO


def test_unwritable_output_is_io_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc = cli.main(["verify-identities", "--d", "1", "--samples", "5", "--out", str(blocker / "sub")])
    assert rc == cli.EXIT_IO


def test_non_convergence_exit_code(tmp_path):
    rc, s = run(tmp_path, "solve", "--problem", "real_quartic_2d", "--h", "0.0625", "--max-iters", "1")
    assert rc == cli.EXIT_NOT_CONVERGED
    assert s["converged"] is False


def test_wrong_problem_kind(tmp_path):
    assert run(tmp_path, "solve", "--problem", "complex_radial_d1")[0] == cli.EXIT_CONFIG
    assert run(tmp_path, "solve-complex", "--problem", "real_radial_2d")[0] == cli.EXIT_CONFIG


@pytest.mark.parametrize("inline, command", [
    ('domain = "ellipsoid"\nsemi_axes = [1.0, 0.6]\nf = 2.0\ng = -1.0\n', "solve"),
    ('domain = "unit_ball"\ndim = 3\nf = 1.0\n', "solve"),
    ('domain = "complex_ball"\ndim = 1\nf = 1.0\ng = 0.5\n', "solve-complex"),
])
def test_inline_problem(tmp_path, inline, command):
    cfg = tmp_path / "inline.toml"
    cfg.write_text(f"[inline]\n{inline}[grid]\nh = 0.125\n")
    rc, s = run(tmp_path, command, "--config", str(cfg))
    assert rc == 0
    assert s["problem"].startswith("inline_")
    assert s["max_error"] <= 1e-10


def test_inline_and_name_conflict(tmp_path):
    cfg = tmp_path / "both.toml"
    cfg.write_text('[inline]\ndomain = "unit_ball"\n')
    assert run(tmp_path, "solve", "--config", str(cfg), "--problem", "real_radial_2d")[0] == cli.EXIT_CONFIG


def test_threads_do_not_change_summary(tmp_path):
    argv = ["rollout", "--problem", "real_radial_2d", "--at", "0.2,0.1", "--n-paths", "9000", "--dt", "0.01"]
    a = cli.main([*argv, "--out", str(tmp_path / "a"), "--threads", "1"])
    b = cli.main([*argv, "--out", str(tmp_path / "b"), "--threads", "4"])
    assert a == b == 0
    sa = json.loads((tmp_path / "a" / "summary.json").read_text())
    sb = json.loads((tmp_path / "b" / "summary.json").read_text())
    assert sa == sb


def test_list_problems(capsys):
    assert cli.main(["list-problems"]) == 0
    out = capsys.readouterr().out
    assert "gtw_degenerate" in out and "real_radial_2d" in out


@pytest.mark.skipif(shutil.which("monge-bellman") is None, reason="entry point not installed")
def test_entry_point(tmp_path):
    proc = subprocess.run(["monge-bellman", "list-problems"], capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and "complex_radial_d2" in proc.stdout


def readme_toml_blocks():
    text = (Path(__file__).parents[1] / "README.md").read_text()
    return [b.split("```", 1)[0] for b in text.split("```toml\n")[1:]]


@pytest.mark.parametrize("index", [0, 1])
def test_readme_config_examples_parse(tmp_path, index):
    cfg = tmp_path / "readme.toml"
    cfg.write_text(readme_toml_blocks()[index])
    flat, _ = cli.load_config_file(cfg)
    run_cfg = cli.RunConfig(subcommand="solve", **flat)
    run_cfg.validate()
