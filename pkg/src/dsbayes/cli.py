"""Command-line experiment runner.

    dsbayes run <config.toml>           run Q-GKB with empirical Bayes, write traces and fields
    dsbayes compare-lis <config.toml>   compare against the dense LIS baseline rank by rank
    dsbayes presets                     list shipped problem presets

``DSBAYES_THREADS`` caps BLAS threads (default 1, which keeps output
bit-reproducible).  Exit codes: 0 success, 2 bad config, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

try:  # Python >= 3.11
    import tomllib as toml_reader
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as toml_reader

from threadpoolctl import threadpool_limits

from .diagnostics import forstner_distance, mstd, trace_seeds
from .inference import InferenceConfig, run_inference
from .oracle import DenseProblem, generalized_eig, lis_posterior_cov, posterior_gap, sqrt_form
from .problems import PRESET_NOTES, PRESET_SEEDS, PRESETS, build_problem, make_rng

logger = logging.getLogger("dsbayes")

SCHEMA_VERSION = 1
TRACE_COLUMNS = [
    "k", "alpha", "beta", "lambda", "nll", "rel_lambda_change",
    "zeta", "gamma", "dF_bound", "kl_bound", "rel_error", "mstd",
]
COMPARE_COLUMNS = ["r", "qgkb_rel_error", "lis_rel_error", "qgkb_mstd", "lis_mstd", "qgkb_dF", "lis_dF"]

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
_TRACE_PROBE_STREAM = 2
LIS_RANK_RTOL = 0.0


class ConfigError(Exception):
    """Raised for unreadable or invalid configuration files."""


# -- configuration -------------------------------------------------------------

_SOLVER_KEYS = {"k_max", "stop_tol", "stop_mode", "reorth", "lambda_bracket", "lambda_tol"}
_DIAG_KEYS = {"dense_oracle", "dense_cap", "eig_threshold", "trace_seeds", "probes"}
_TOP_KEYS = {"schema_version", "seed", "output", "problem", "solver", "diagnostics", "compare"}
_COMPARE_KEYS = {"max_rank"}
_PROBLEM_KEYS = {
    "fredholm1d": {"n", "m", "l_forward", "prior_length", "prior_sigma", "true_sigma", "noise_level"},
    "deblur2d": {"n1", "m1", "l_blur", "nu", "rho", "sigma", "noise_level"},
    "dense": {"G", "y", "sigma", "gamma", "x_true"},
}


@dataclass
class ExperimentConfig:
    problem: dict
    solver: InferenceConfig
    output: Path
    seed: int = 0
    dense_oracle: bool = True
    dense_cap: int = 2048
    eig_threshold: float = 1e-10
    trace_mode: str = "auto"
    probes: int = 200
    max_rank: Optional[int] = None
    source: dict = field(default_factory=dict)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _check_keys(section: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(section) - allowed)
    _require(not unknown, f"unknown key(s) in {where}: {', '.join(unknown)}")


def _number(d: dict, key: str, default, kind=float, lo=None, hi=None, where=""):
    val = d.get(key, default)
    if kind is int:
        _require(isinstance(val, int) and not isinstance(val, bool), f"{where}{key} must be an integer")
    elif kind is float:
        _require(isinstance(val, (int, float)) and not isinstance(val, bool), f"{where}{key} must be a number")
        val = float(val)
        _require(math.isfinite(val), f"{where}{key} must be finite")
    if lo is not None:
        _require(val >= lo, f"{where}{key} must be >= {lo}")
    if hi is not None:
        _require(val <= hi, f"{where}{key} must be <= {hi}")
    return val


def parse_config(data: dict, base_dir: Path = Path(".")) -> ExperimentConfig:
    """Validate a parsed TOML document."""
    _require(isinstance(data, dict), "config must be a table")
    _check_keys(data, _TOP_KEYS, "top level")
    _require(data.get("schema_version") == SCHEMA_VERSION, f"schema_version must be {SCHEMA_VERSION}")
    out = data.get("output", "out")
    _require(isinstance(out, str) and out, "output must be a nonempty path string")
    output = Path(out) if Path(out).is_absolute() else base_dir / out

    prob = data.get("problem")
    _require(isinstance(prob, dict), "missing [problem] table")
    prob = dict(prob)
    preset = prob.pop("preset", None)
    if preset is not None:
        _require(preset in PRESETS, f"unknown preset {preset!r}; see `dsbayes presets`")
        _require("kind" not in prob, "give either preset or kind, not both")
        spec = dict(PRESETS[preset])
    else:
        _require("kind" in prob, "[problem] needs preset or kind")
        spec = {"kind": prob.pop("kind")}
    seed = _number(data, "seed", PRESET_SEEDS.get(preset, 0), int, lo=0)
    kind = spec["kind"]
    _require(kind in _PROBLEM_KEYS, f"unknown problem kind {kind!r}")
    _check_keys(prob, _PROBLEM_KEYS[kind], "[problem]")
    spec.update(prob)
    if kind == "dense":
        _require("G" in spec and "y" in spec, "inline problems need G and y")
    for key in ("n", "m", "n1", "m1"):
        if key in spec:
            _number(spec, key, None, int, lo=1, where="problem.")
    for key in ("l_forward", "prior_length", "prior_sigma", "true_sigma", "noise_level", "l_blur", "nu", "rho", "sigma"):
        if key in spec and kind != "dense":
            _number(spec, key, None, float, where="problem.")
            _require(spec[key] > 0, f"problem.{key} must be positive")

    s = data.get("solver", {})
    _require(isinstance(s, dict), "[solver] must be a table")
    _check_keys(s, _SOLVER_KEYS, "[solver]")
    bracket = s.get("lambda_bracket", [1e-10, 1e10])
    _require(
        isinstance(bracket, list) and len(bracket) == 2 and all(isinstance(b, (int, float)) for b in bracket),
        "solver.lambda_bracket must be a two-element list",
    )
    _require(0 < bracket[0] < bracket[1], "solver.lambda_bracket must satisfy 0 < lo < hi")
    mode = s.get("stop_mode", "double")
    _require(mode in ("single", "double"), "solver.stop_mode must be 'single' or 'double'")
    reorth = s.get("reorth", True)
    _require(isinstance(reorth, bool), "solver.reorth must be true or false")
    solver = InferenceConfig(
        k_max=_number(s, "k_max", 100, int, lo=1, hi=100000, where="solver."),
        stop_tol=_number(s, "stop_tol", 1e-3, float, lo=0.0, where="solver."),
        stop_mode=mode,
        reorth=reorth,
        bracket=(float(bracket[0]), float(bracket[1])),
        lambda_tol=_number(s, "lambda_tol", 1e-8, float, lo=1e-15, hi=1e-1, where="solver."),
    )

    d = data.get("diagnostics", {})
    _require(isinstance(d, dict), "[diagnostics] must be a table")
    _check_keys(d, _DIAG_KEYS, "[diagnostics]")
    dense_oracle = d.get("dense_oracle", True)
    _require(isinstance(dense_oracle, bool), "diagnostics.dense_oracle must be true or false")
    trace_mode = d.get("trace_seeds", "auto")
    _require(trace_mode in ("auto", "dense", "hutchinson", "off"), "diagnostics.trace_seeds must be auto, dense, hutchinson or off")

    c = data.get("compare", {})
    _require(isinstance(c, dict), "[compare] must be a table")
    _check_keys(c, _COMPARE_KEYS, "[compare]")
    max_rank = c.get("max_rank")
    if max_rank is not None:
        max_rank = _number(c, "max_rank", None, int, lo=0, where="compare.")

    return ExperimentConfig(
        problem=spec,
        solver=solver,
        output=output,
        seed=seed,
        dense_oracle=dense_oracle,
        dense_cap=_number(d, "dense_cap", 2048, int, lo=1, where="diagnostics."),
        eig_threshold=_number(d, "eig_threshold", 1e-10, float, lo=0.0, hi=1.0, where="diagnostics."),
        trace_mode=trace_mode,
        probes=_number(d, "probes", 200, int, lo=2, where="diagnostics."),
        max_rank=max_rank,
        source=data,
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = toml_reader.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (OSError, toml_reader.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(data, path.parent)


# -- output helpers --------------------------------------------------------------


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "nan"
    return format(x, ".17g")


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return None if not math.isfinite(x) else x
    return x


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_field(path: Path, values: np.ndarray, shape) -> None:
    """Flat little-endian float64 array plus a ``.json`` sidecar with its shape."""
    np.ascontiguousarray(values, dtype="<f8").tofile(path)
    _write_json(path.with_suffix(".json"), {"dtype": "float64", "byte_order": "little", "shape": list(shape)})


def read_field(path) -> np.ndarray:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return np.fromfile(path, dtype="<f8").reshape(meta["shape"])


# -- commands ----------------------------------------------------------------------


def _seeds(cfg: ExperimentConfig, inst):
    mode = cfg.trace_mode
    if mode == "off":
        return None, "off"
    if mode == "auto":
        mode = "dense" if inst.m <= cfg.dense_cap else "hutchinson"
    rng = make_rng(cfg.seed, _TRACE_PROBE_STREAM)
    return trace_seeds(inst.forward, inst.prior, inst.noise_cov, mode, cfg.probes, rng), mode


def _solve(cfg: ExperimentConfig, inst, keep_steps: bool):
    seeds, mode = _seeds(cfg, inst)
    steps = []
    cb = (lambda k, state, approx: steps.append(approx)) if keep_steps else None
    has_truth = bool(np.any(inst.x_true))
    approx, trace, diag = run_inference(
        inst.forward,
        inst.prior,
        inst.noise_cov,
        inst.y,
        cfg.solver,
        seeds=tuple(seeds) if seeds is not None else None,
        x_true=inst.x_true if has_truth else None,
        track_variance=True,
        callback=cb,
    )
    return approx, trace, diag, seeds, mode, steps


def run_experiment(path) -> int:
    cfg = load_config(path)
    t0 = time.perf_counter()
    inst = build_problem(cfg.problem, cfg.seed)
    t_build = time.perf_counter() - t0
    want_oracle = cfg.dense_oracle and inst.n <= cfg.dense_cap
    approx, trace, diag, seeds, seed_mode, steps = _solve(cfg, inst, keep_steps=want_oracle)
    t_solve = time.perf_counter() - t0 - t_build

    out = cfg.output
    out.mkdir(parents=True, exist_ok=True)
    K = len(trace)
    alphas = approx.B.diag
    b = diag.bounds
    nan = float("nan")
    rows = []
    for i, rec in enumerate(trace.records):
        rows.append([
            rec.k,
            alphas[i],
            approx.B.subdiag[i],
            rec.lam,
            rec.nll,
            rec.rel_change,
            b.zeta[i] if b is not None else nan,
            b.gamma[i] if b is not None else nan,
            b.dF_bound[i] if b is not None else nan,
            b.kl_bound[i] if b is not None else nan,
            diag.rel_error[i] if diag.rel_error.size else nan,
            diag.mstd[i] if diag.mstd.size else nan,
        ])
    _write_csv(out / "trace.csv", TRACE_COLUMNS, rows)

    mean = approx.posterior_mean()
    var = approx.posterior_variance()
    shape = inst.image_shape or (inst.n,)
    write_field(out / "mean.bin", mean, shape)
    write_field(out / "variance.bin", var, shape)

    result = {
        "schema_version": SCHEMA_VERSION,
        "problem": inst.name,
        "params": inst.params,
        "seed": cfg.seed,
        "n": inst.n,
        "m": inst.m,
        "k": approx.k,
        "lambda": approx.lam,
        "sigma_estimate": 1.0 / math.sqrt(approx.lam),
        "lambda_at_boundary": trace.records[-1].at_boundary if K else True,
        "stop_reason": diag.stop_reason,
        "breakdown": diag.broken,
        "rel_error": float(diag.rel_error[-1]) if diag.rel_error.size else None,
        "mstd": mstd(var),
        "trace_seeds": {"mode": seed_mode, **({} if seeds is None else {
            "zeta0": seeds.zeta0, "gamma0_sq": seeds.gamma0_sq,
            "zeta0_se": seeds.zeta0_se, "gamma0_sq_se": seeds.gamma0_sq_se})},
        "bounds_flagged": bool(b.flagged) if b is not None else False,
        "bounds_resolved_through_k": b.last_resolved if b is not None else 0,
    }
    _write_json(out / "result.json", result)

    t_oracle = 0.0
    if want_oracle:
        t1 = time.perf_counter()
        p = DenseProblem.from_instance(inst)
        sf = sqrt_form(p)
        per_k = []
        for i, st in enumerate(steps):
            gap = posterior_gap(p, st.lam, st.V, st.B.matrix, st.xi, sf)
            entry = {"k": st.k, "lambda": st.lam, "dF": gap["dF"], "kl": gap["kl"]}
            if b is not None:
                entry.update(
                    dF_bound=b.dF_bound[i],
                    kl_bound=b.kl_bound[i],
                    dF_ok=gap["dF"] <= b.dF_bound[i] * (1 + 1e-8),
                    kl_ok=gap["kl"] <= b.kl_bound[i] * (1 + 1e-8),
                    resolved=bool(b.resolved[i]),
                )
            per_k.append(entry)
        mu, _ = generalized_eig(p, cfg.eig_threshold)
        _write_json(out / "oracle.json", {
            "effective_dimension": int(mu.size),
            "eig_threshold": cfg.eig_threshold,
            "all_dF_ok": all(e.get("dF_ok", False) for e in per_k) if b is not None else None,
            "all_kl_ok": all(e.get("kl_ok", False) for e in per_k) if b is not None else None,
            "steps": per_k,
        })
        t_oracle = time.perf_counter() - t1
    # wall-clock numbers live apart so the other outputs stay byte-reproducible
    _write_json(out / "timing.json", {"build_s": t_build, "solve_s": t_solve, "oracle_s": t_oracle})
    logger.info("k=%d λ=%.6g stop=%s -> %s", approx.k, approx.lam, diag.stop_reason, out)
    return EXIT_OK


def compare_lis(path) -> int:
    cfg = load_config(path)
    inst = build_problem(cfg.problem, cfg.seed)
    if inst.n > cfg.dense_cap:
        raise FloatingPointError(f"n = {inst.n} exceeds dense_cap = {cfg.dense_cap}; the LIS baseline is dense")
    approx, trace, diag, _, _, steps = _solve(cfg, inst, keep_steps=True)
    p = DenseProblem.from_instance(inst)
    sf = sqrt_form(p)
    # the baseline keeps every numerically nonzero eigenpair; eig_threshold only defines effective dimension
    mu, W = generalized_eig(p, LIS_RANK_RTOL)
    x_true = inst.x_true
    xn = float(np.linalg.norm(x_true)) or float("nan")
    lambdas = [st.lam for st in steps]
    r_max = len(steps) if cfg.max_rank is None else min(cfg.max_rank, len(steps))
    rows = []
    for r in range(r_max + 1):
        # rank 0 uses the first EB estimate: no step has been taken yet
        lam = lambdas[max(r - 1, 0)]
        rl = min(r, mu.size)
        Wr, mur = W[:, :rl], mu[:rl]
        C_lis = lis_posterior_cov(p, mur, Wr, lam)
        # projected likelihood: Γ^{-1} is replaced by W_r diag(μ_r) W_r^T, as in H_r
        lis_mean = C_lis @ (p.G.T @ (Wr @ (mur * (Wr.T @ p.y))))
        P_exact = lam * np.eye(inst.n) + sf.A
        E = sf.L.T @ (p.G.T @ Wr)
        P_lis = lam * np.eye(inst.n) + (E * mur) @ E.T
        lis_dF = forstner_distance(P_exact, 0.5 * (P_lis + P_lis.T))
        if r == 0:
            q_mean = np.zeros(inst.n)
            q_var = np.asarray(inst.prior.diagonal) / lam
            q_dF = lis_dF
        else:
            st = steps[r - 1]
            q_mean = st.posterior_mean()
            q_var = st.posterior_variance()
            q_dF = posterior_gap(p, lam, st.V, st.B.matrix, st.xi, sf)["dF"]
        rows.append([
            r,
            np.linalg.norm(q_mean - x_true) / xn,
            np.linalg.norm(lis_mean - x_true) / xn,
            mstd(q_var),
            mstd(np.maximum(np.diag(C_lis), 0.0)),
            q_dF,
            lis_dF,
        ])
    cfg.output.mkdir(parents=True, exist_ok=True)
    _write_csv(cfg.output / "compare.csv", COMPARE_COLUMNS, rows)
    return EXIT_OK


def list_presets() -> int:
    for name in sorted(PRESETS):
        params = ", ".join(f"{k}={v}" for k, v in PRESETS[name].items())
        print(f"{name}: {PRESET_NOTES.get(name, '')}\n    {params}")
    return EXIT_OK


def _threads() -> int:
    raw = os.environ.get("DSBAYES_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"DSBAYES_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("DSBAYES_THREADS must be a positive integer")
    return n


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dsbayes", description="Data-space Bayesian inversion with Q-GKB")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment from a TOML config")
    p_run.add_argument("config")
    p_cmp = sub.add_parser("compare-lis", help="compare Q-GKB with the dense LIS baseline")
    p_cmp.add_argument("config")
    sub.add_parser("presets", help="list problem presets")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        threads = _threads()
        with threadpool_limits(limits=threads):
            if args.command == "run":
                return run_experiment(args.config)
            if args.command == "compare-lis":
                return compare_lis(args.config)
            return list_presets()
    except ConfigError as exc:
        print(f"dsbayes: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (np.linalg.LinAlgError, FloatingPointError, ArithmeticError, ValueError, RuntimeError) as exc:
        print(f"dsbayes: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
