"""Command-line front end.

Settings come from defaults, then an optional TOML file (``--config``), then
command-line flags.  Every subcommand writes ``summary.json`` into the
output directory; ``solve`` and ``solve-complex`` also write
``solution.csv`` and ``estimate-bounds`` writes ``shell_profile.csv``.

Exit codes: 0 success, 1 a verification check failed, 2 invalid
configuration, 3 solver did not converge, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import re
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import problems as problem_lib
from . import solver
from .complex_reduction import (det_identity, expm_check, frame_identity_check, non_closure_witness,
                                phi_vec, random_cubic_domain, reduce_problem, trace_identity,
                                wirtinger_gradient)
from .controls import ControlMatrix, haar_frames
from .rollout import ConstantControl, GridPolicy, RolloutConfig, fit_bias_constant, simulate
from .verification import fit_gradient_bound, fit_hessian_bound, lemma_check, ma_residual

logger = logging.getLogger("monge_bellman")

EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_NOT_CONVERGED = 3
EXIT_IO = 4

SUMMARY_KEYS = {
    "solve": ["command", "problem", "h", "W", "n_nodes", "n_frames", "tol", "residual", "iterations",
              "converged", "max_error", "ma_residual", "max_second_difference"],
    "estimate-bounds": ["command", "problem", "h", "W", "n_nodes", "residual", "converged",
                        "gradient_bound", "hessian_bound"],
    "rollout": ["command", "problem", "at", "estimate", "std_error", "mean_exit_time",
                "exit_time_std_error", "censored_fraction", "n_paths", "bridge_exits",
                "fallback_lookups", "reference", "config"],
    "verify-identities": ["command", "d", "samples", "seed", "max_det_residual", "max_trace_residual",
                          "max_frame_residual", "max_skew_defect", "max_expm_residual",
                          "witness_violates_block_form"],
    "check-lemma": ["command", "seed", "report"],
}
SUMMARY_KEYS["solve-complex"] = SUMMARY_KEYS["solve"]


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line

    def __str__(self):
        msg = super().__str__()
        return f"line {self.line}: {msg}" if self.line is not None else msg


@dataclass
class RunConfig:
    subcommand: str
    problem: str | None = None
    h: float = 1 / 16
    W: int | None = None
    tol: float = 1e-8
    max_iters: int = 100
    delta: float = 1e-8
    dt: float = 1e-3
    n_paths: int = 10_000
    seed: int = 0
    max_time: float = 50.0
    at: list = field(default_factory=list)
    control: list | None = None
    policy: str = "constant"
    d: int = 2
    samples: int = 1000
    n_instances: int = 100
    out: str = "."
    threads: int = 1
    verbosity: int = 0
    inline: dict | None = None
    lines: dict = field(default_factory=dict, repr=False)

    def line_of(self, key):
        return self.lines.get(key)

    def validate(self):
        def bad(key, msg):
            raise ConfigError(f"{key}: {msg}", self.line_of(key))

        if not 0 < self.h <= 0.25:
            bad("h", f"must lie in (0, 1/4], got {self.h}")
        if self.W is not None and self.W not in (1, 2, 3):
            bad("W", f"must be 1, 2 or 3, got {self.W}")
        if not self.tol > 0:
            bad("tol", "must be positive")
        if self.max_iters < 1:
            bad("max_iters", "must be >= 1")
        if not self.delta > 0:
            bad("delta", "must be positive")
        if not self.dt > 0:
            bad("dt", "must be positive")
        if self.n_paths < 1:
            bad("n_paths", "must be >= 1")
        if not self.max_time >= self.dt:
            bad("max_time", "must be >= dt")
        if self.threads < 1:
            bad("threads", "must be >= 1")
        if self.samples < 1 or self.n_instances < 1 or self.d < 1:
            bad("samples", "sample counts and d must be positive")
        if self.policy not in ("constant", "grid"):
            bad("policy", f"must be 'constant' or 'grid', got {self.policy!r}")
        needs_problem = {"solve", "solve-complex", "rollout", "estimate-bounds"}
        if self.problem is not None and self.inline is not None:
            bad("problem", "give either a problem name or an [inline] section, not both")
        if self.subcommand in needs_problem and self.problem is None and self.inline is None:
            bad("problem", "a problem name or an [inline] section is required")
        if self.problem is not None and self.problem not in problem_lib.names():
            bad("problem", f"unknown problem {self.problem!r}")
        if self.inline is not None:
            self._validate_inline(bad)

    def _validate_inline(self, bad):
        spec = self.inline
        domain = spec.get("domain")
        if domain not in problem_lib.INLINE_DOMAINS:
            bad("domain", f"must be one of {', '.join(problem_lib.INLINE_DOMAINS)}, got {domain!r}")
        if domain == "ellipsoid":
            axes = spec.get("semi_axes")
            if not axes or not all(isinstance(x, (int, float)) and x > 0 for x in axes):
                bad("semi_axes", "ellipsoid needs a list of positive semi-axes")
        elif "semi_axes" in spec:
            bad("semi_axes", f"only valid with domain = \"ellipsoid\", not {domain!r}")
        if spec.get("dim", 1) < 1:
            bad("dim", "must be >= 1")
        if spec.get("f", 0.0) < 0:
            bad("f", "must be >= 0")

    def problem_spec(self):
        if self.inline is not None:
            return problem_lib.inline_problem(**self.inline)
        return problem_lib.get(self.problem)


# key -> (section, type)
_SCHEMA = {
    "problem": (None, str), "out": (None, str), "verbosity": (None, int), "threads": (None, int),
    "h": ("grid", float), "W": ("grid", int),
    "tol": ("solver", float), "max_iters": ("solver", int), "delta": ("solver", float),
    "dt": ("rollout", float), "n_paths": ("rollout", int), "seed": ("rollout", int),
    "max_time": ("rollout", float), "at": ("rollout", list), "control": ("rollout", list),
    "policy": ("rollout", str),
    "d": ("identities", int), "samples": ("identities", int), "n_instances": ("lemma", int),
}
# keys of the [inline] problem section
_INLINE_SCHEMA = {"domain": str, "dim": int, "semi_axes": list, "f": float, "g": float}


def _key_lines(text: str) -> dict:
    """Line number of every 'key =' in the file, keyed by the bare key."""
    out = {}
    for i, line in enumerate(text.splitlines(), start=1):
        m = re.match(r"\s*([A-Za-z_][A-Za-z0-9_]*)\s*=", line)
        if m:
            out.setdefault(m.group(1), i)
    return out


def load_config_file(path) -> tuple[dict, dict]:
    """Parse a TOML run file into flat settings and their line numbers."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", int(m.group(1)) if m else None) from None
    lines = _key_lines(text)
    flat = {}
    sections = {s for s, _ in _SCHEMA.values() if s}
    for key, value in data.items():
        if isinstance(value, dict):
            if key == "inline":
                flat["inline"] = _inline_section(value, lines, _section_line(text, key))
                continue
            if key not in sections:
                raise ConfigError(f"unknown section [{key}]", _section_line(text, key))
            for k, v in value.items():
                spec = _SCHEMA.get(k)
                if spec is None or spec[0] != key:
                    raise ConfigError(f"unknown key {k!r} in [{key}]", lines.get(k))
                flat[k] = _coerce(k, v, spec[1], lines.get(k))
        else:
            spec = _SCHEMA.get(key)
            if spec is None or spec[0] is not None:
                raise ConfigError(f"unknown top-level key {key!r}", lines.get(key))
            flat[key] = _coerce(key, value, spec[1], lines.get(key))
    return flat, lines


def _inline_section(table, lines, section_line):
    out = {}
    for k, v in table.items():
        typ = _INLINE_SCHEMA.get(k)
        if typ is None:
            raise ConfigError(f"unknown key {k!r} in [inline]", lines.get(k))
        out[k] = _coerce(k, v, typ, lines.get(k))
    if "domain" not in out:
        raise ConfigError("[inline] needs a domain", section_line)
    return out


def _section_line(text, name):
    for i, line in enumerate(text.splitlines(), start=1):
        if line.strip() == f"[{name}]":
            return i
    return None


def _coerce(key, value, typ, line):
    if typ is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if typ is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if typ is str and isinstance(value, str):
        return value
    if typ is list and isinstance(value, list):
        return value
    raise ConfigError(f"{key}: expected {typ.__name__}, got {value!r}", line)


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run file")
    common.add_argument("--out", help="output directory (default: current directory)")
    common.add_argument("--threads", type=int, help="worker threads (default 1)")
    common.add_argument("-v", "--verbose", action="count", default=None, dest="verbosity")

    grid = argparse.ArgumentParser(add_help=False)
    grid.add_argument("--problem")
    grid.add_argument("--h", type=float)
    grid.add_argument("--W", type=int)
    grid.add_argument("--tol", type=float)
    grid.add_argument("--max-iters", type=int, dest="max_iters")
    grid.add_argument("--delta", type=float)

    p = argparse.ArgumentParser(prog="monge-bellman", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("solve", parents=[common, grid], help="solve a real benchmark")
    sub.add_parser("solve-complex", parents=[common, grid], help="reduce and solve a complex benchmark")
    sub.add_parser("estimate-bounds", parents=[common, grid], help="solve and fit the derivative estimates")
    r = sub.add_parser("rollout", parents=[common, grid], help="Monte Carlo payoff from one point")
    r.add_argument("--at", type=_floats, help="start point, e.g. 0,0")
    r.add_argument("--dt", type=float)
    r.add_argument("--n-paths", type=int, dest="n_paths")
    r.add_argument("--seed", type=int)
    r.add_argument("--max-time", type=float, dest="max_time")
    r.add_argument("--control", type=_floats, help="constant control, row-major entries")
    r.add_argument("--policy", choices=["constant", "grid"])
    v = sub.add_parser("verify-identities", parents=[common], help="complex embedding identity sweep")
    v.add_argument("--d", type=int)
    v.add_argument("--samples", type=int)
    v.add_argument("--seed", type=int)
    c = sub.add_parser("check-lemma", parents=[common], help="Bellman/Monge-Ampere equivalence sweep")
    c.add_argument("--n-instances", type=int, dest="n_instances")
    c.add_argument("--seed", type=int)
    sub.add_parser("list-problems", parents=[common], help="print the benchmark registry")
    return p


def make_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig(subcommand=args.subcommand)
    if getattr(args, "config", None):
        flat, lines = load_config_file(args.config)
        for k, v in flat.items():
            setattr(cfg, k, v)
        cfg.lines = lines
    for k, v in vars(args).items():
        if k in ("config", "subcommand") or v is None:
            continue
        setattr(cfg, k, v)
        cfg.lines.pop(k, None)
    cfg.validate()
    return cfg


def _ordered(command: str, summary: dict) -> dict:
    keys = SUMMARY_KEYS.get(command)
    if keys is None:
        return summary
    missing = set(keys) - set(summary)
    extra = set(summary) - set(keys)
    if missing or extra:
        raise RuntimeError(f"summary keys drifted: missing {sorted(missing)}, extra {sorted(extra)}")
    return {k: summary[k] for k in keys}


def write_summary(cfg: RunConfig, summary: dict) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "summary.json"
    solver.write_summary_json(_ordered(cfg.subcommand, summary), path)
    return path


def _solve(cfg: RunConfig, complex_: bool):
    spec = cfg.problem_spec()
    if complex_:
        if spec.kind != "complex":
            raise ConfigError(f"problem: {spec.name!r} is not a complex problem", cfg.line_of("problem"))
        spec = reduce_problem(spec)
    elif spec.kind != "real":
        raise ConfigError(f"problem: {spec.name!r} is complex; use solve-complex", cfg.line_of("problem"))
    bundle = solver.howard_solve(spec, h=cfg.h, width=cfg.W, tol=cfg.tol, max_iters=cfg.max_iters)
    return spec, bundle


def _solve_summary(cfg, spec, bundle):
    grid = bundle.grid
    f = solver.f_field(spec, grid)
    return {
        "command": cfg.subcommand, "problem": spec.name, "h": grid.h, "W": grid.width,
        "n_nodes": grid.n_nodes, "n_frames": int(len(grid.frames)), "tol": cfg.tol,
        "residual": bundle.residual, "iterations": bundle.iterations, "converged": bundle.converged,
        "max_error": solver.max_error(bundle.v, spec.reference) if spec.reference else None,
        "ma_residual": ma_residual(bundle.v, f, complex_=spec.kind == "complex"),
        "max_second_difference": solver.max_stencil_concavity(bundle.v),
    }


def _regularized(cfg, spec, bundle):
    """The bundle with its policy replaced by the delta-regularized control."""
    policy, _ = solver.extract_policy(bundle.v, solver.f_field(spec, bundle.grid), cfg.delta)
    return replace(bundle, policy=policy)


def cmd_solve(cfg: RunConfig, complex_: bool = False) -> int:
    spec, bundle = _solve(cfg, complex_)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_bundle = _regularized(cfg, spec, bundle) if bundle.converged else bundle
    solver.write_solution_csv(csv_bundle, out / "solution.csv")
    write_summary(cfg, _solve_summary(cfg, spec, bundle))
    return 0 if bundle.converged else EXIT_NOT_CONVERGED


def cmd_estimate_bounds(cfg: RunConfig) -> int:
    spec = cfg.problem_spec()
    if spec.kind == "complex":
        spec = reduce_problem(spec)
    bundle = solver.howard_solve(spec, h=cfg.h, width=cfg.W, tol=cfg.tol, max_iters=cfg.max_iters)
    gfit = fit_gradient_bound(bundle.v, spec.df, seed=cfg.seed)
    hfit = fit_hessian_bound(bundle.v, spec.df, seed=cfg.seed, tol=cfg.tol)
    summary = {"command": cfg.subcommand, "problem": spec.name, "h": bundle.grid.h,
               "W": bundle.grid.width, "n_nodes": bundle.grid.n_nodes, "residual": bundle.residual,
               "converged": bundle.converged, "gradient_bound": gfit.summary(),
               "hessian_bound": hfit.summary()}
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "shell_profile.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["estimate", "psi_level", "max_ratio"])
        for name, fit in (("gradient", gfit), ("hessian", hfit)):
            for level, ratio in fit.shell_profile:
                w.writerow([name, format(level, ".17g"), format(ratio, ".17g")])
    write_summary(cfg, summary)
    if not bundle.converged:
        return EXIT_NOT_CONVERGED
    return 0 if hfit.upper_ok else EXIT_CHECK_FAILED


def cmd_rollout(cfg: RunConfig) -> int:
    spec = cfg.problem_spec()
    if spec.kind == "complex":
        spec = reduce_problem(spec)
    n = spec.df.dim
    at = np.zeros(n) if not cfg.at else np.asarray(cfg.at, float)
    if at.shape != (n,):
        raise ConfigError(f"at: expected {n} coordinates", cfg.line_of("at"))
    if cfg.policy == "grid":
        bundle = solver.howard_solve(spec, h=cfg.h, width=cfg.W, tol=cfg.tol, max_iters=cfg.max_iters)
        if not bundle.converged:
            return EXIT_NOT_CONVERGED
        source = GridPolicy(_regularized(cfg, spec, bundle).policy)
    else:
        d = spec.control_dim
        if cfg.control is None:
            a = np.eye(d) / d
        else:
            vals = np.asarray(cfg.control, float)
            if vals.size != d * d:
                raise ConfigError(f"control: expected {d * d} entries", cfg.line_of("control"))
            a = vals.reshape(d, d)
        try:
            ControlMatrix(a)
        except ValueError as exc:
            raise ConfigError(f"control: {exc}", cfg.line_of("control")) from None
        source = ConstantControl(a)
    rc = RolloutConfig(dt=cfg.dt, n_paths=cfg.n_paths, seed=cfg.seed, max_time=cfg.max_time,
                       policy_source=source, threads=cfg.threads)
    res = simulate(at, spec, rc)
    ref = float(spec.reference(at)) + 0.0 if spec.reference else None  # no signed zeros
    summary = {"command": cfg.subcommand, "problem": spec.name, "at": at.tolist(), **res.to_dict(),
               "reference": ref, "config": rc.echo()}
    write_summary(cfg, summary)
    return 0


def _random_point(rng, d, radius=0.3):
    return radius * (rng.standard_normal(d) + 1j * rng.standard_normal(d))


def identity_sweep(d: int, samples: int, seed: int, grad_min: float = 1e-2) -> dict:
    """Random det, trace, frame and exponential identity checks on C^d.

    Det and trace residuals are relative; frame residuals are absolute and
    drawn only where |psi_zbar| >= grad_min.
    """
    rng = np.random.default_rng(seed)
    U = haar_frames(rng, samples, d, complex_=True)
    lam = rng.dirichlet(np.ones(d), samples)
    det_res = trace_res = frame_res = skew = expm_res = 0.0
    for i in range(samples):
        a = (U[i] * lam[i]) @ U[i].conj().T
        a = 0.5 * (a + a.conj().T)
        lhs, rhs = det_identity(a)
        det_res = max(det_res, abs(lhs - rhs) / max(abs(lhs), abs(rhs), np.finfo(float).tiny))
        df = random_cubic_domain(d, rng)
        t1, t2 = trace_identity(a, df, _random_point(rng, d))
        trace_res = max(trace_res, abs(t1 - t2) / max(abs(t1), abs(t2), np.finfo(float).tiny))
        while True:
            z = _random_point(rng, d)
            _, psi_zb = wirtinger_gradient(df, phi_vec(z))
            if np.linalg.norm(psi_zb) >= grad_min:
                break
        xi = rng.standard_normal(d) + 1j * rng.standard_normal(d)
        chk = frame_identity_check(df, z, xi, full=True)
        frame_res = max(frame_res, chk["residual"], chk["real_residual"])
        skew = max(skew, chk["skew_defect"])
        expm_res = max(expm_res, *expm_check(chk["data"].Q))
    witness = not non_closure_witness(max(d, 2))[3]
    return {"max_det_residual": det_res, "max_trace_residual": trace_res,
            "max_frame_residual": frame_res, "max_skew_defect": skew,
            "max_expm_residual": expm_res, "witness_violates_block_form": witness}


def cmd_verify_identities(cfg: RunConfig) -> int:
    rep = identity_sweep(cfg.d, cfg.samples, cfg.seed)
    summary = {"command": cfg.subcommand, "d": cfg.d, "samples": cfg.samples, "seed": cfg.seed, **rep}
    write_summary(cfg, summary)
    ok = max(rep["max_det_residual"], rep["max_trace_residual"], rep["max_frame_residual"],
             rep["max_expm_residual"]) <= 1e-10 and rep["witness_violates_block_form"]
    return 0 if ok else EXIT_CHECK_FAILED


def cmd_check_lemma(cfg: RunConfig) -> int:
    rep = lemma_check(cfg.n_instances, cfg.seed)
    write_summary(cfg, {"command": cfg.subcommand, "seed": cfg.seed, "report": rep.to_dict()})
    return 0 if rep.passes else EXIT_CHECK_FAILED


def cmd_list_problems(cfg: RunConfig) -> int:
    for entry in problem_lib.list_problems():
        print(f"{entry['name']:<26} {entry['kind']:<8} dim={entry['dim']}  K={entry['K']}")
        print(f"    {entry['notes']}")
    return 0


COMMANDS = {
    "solve": lambda c: cmd_solve(c, False),
    "solve-complex": lambda c: cmd_solve(c, True),
    "estimate-bounds": cmd_estimate_bounds,
    "rollout": cmd_rollout,
    "verify-identities": cmd_verify_identities,
    "check-lemma": cmd_check_lemma,
    "list-problems": cmd_list_problems,
}


def run(cfg: RunConfig) -> int:
    return COMMANDS[cfg.subcommand](cfg)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = make_config(args)
    except ConfigError as exc:
        print(f"monge-bellman: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"monge-bellman: {exc}", file=sys.stderr)
        return EXIT_IO
    level = logging.WARNING - 10 * min(cfg.verbosity or 0, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(cfg)
    except ConfigError as exc:
        print(f"monge-bellman: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"monge-bellman: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
