"""Command line entry point: ``hoifkit {estimate,plan,verify,mc} --config file.json``.

Exit status 0 on success, 2 when the configuration fails validation and 1
when a run fails.  Failures also write a JSON error record.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

SCHEMA_VERSION = 1
COMMANDS = ("estimate", "plan", "verify", "mc")
ESTIMATORS = ("psi_mk", "psi_mod", "psi3_KJ", "psi_eff", "difference", "subcube", "ball", "tau_invert")
FUNCTIONAL_ESTIMATORS = ("psi_mk", "psi_mod", "psi3_KJ", "psi_eff")


class ConfigError(ValueError):
    """Configuration does not satisfy the schema or a module precondition."""


# ----------------------------------------------------------------------------
# deterministic output


def format_float(value: float) -> str:
    return format(float(value), ".17g")


def _to_json(obj, indent: int = 0) -> str:
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_to_json(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[" + ", ".join(_to_json(v, indent + 1) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return format_float(v) if math.isfinite(v) else "null"
    if isinstance(obj, np.ndarray):
        return _to_json(obj.tolist(), indent)
    return json.dumps(str(obj))


def dumps(obj) -> str:
    """JSON text with a fixed field order and floats at 17 significant digits."""
    return _to_json(obj) + "\n"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(header)
    for row in rows:
        out = []
        for v in row:
            if isinstance(v, (bool, np.bool_)):
                out.append("true" if v else "false")
            elif isinstance(v, (float, np.floating)):
                out.append(format_float(v) if math.isfinite(float(v)) else "")
            elif v is None:
                out.append("")
            else:
                out.append(str(v))
        writer.writerow(out)
    return buf.getvalue()


def emit_report(summary, path: str, fmt: str = "json", header=None) -> str:
    """Write a summary as JSON, or as CSV when given a header and rows."""
    if fmt == "json":
        text = dumps(summary)
    elif fmt == "csv":
        if header is None:
            raise ValueError("csv output needs a header")
        text = csv_text(header, summary)
    else:
        raise ValueError(f"unknown format '{fmt}'")
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


# ----------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    raw: dict
    functional: dict = field(default_factory=dict)
    basis: dict = field(default_factory=dict)
    smoothness: dict | None = None
    estimator: str = "psi_mk"
    n: int | None = None
    reps: int = 1
    seed: int = 0
    alpha: float = 0.1
    truth: dict | None = None
    data: str | None = None
    nuisance: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)


def _need(cfg: dict, key: str, where: str = ""):
    if key not in cfg:
        raise ConfigError(f"missing required key '{where}{key}'")
    return cfg[key]


def _int(value, name: str, lo: int = None) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ConfigError(f"'{name}' must be an integer")
    value = int(value)
    if lo is not None and value < lo:
        raise ConfigError(f"'{name}' must be at least {lo}")
    return value


def validate_config(raw: dict, command: str) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    version = _need(raw, "schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version} (expected {SCHEMA_VERSION})")
    cfg = ExperimentConfig(raw=raw)
    cfg.seed = _int(raw.get("seed", 0), "seed", 0)
    cfg.alpha = float(raw.get("alpha", 0.1))
    if not 0.0 < cfg.alpha < 1.0:
        raise ConfigError("'alpha' must lie in (0, 1)")
    sm = raw.get("smoothness")
    if sm is not None:
        for key in ("beta_b", "beta_p", "beta_g"):
            v = _need(sm, key, "smoothness.")
            if not isinstance(v, (int, float)) or v < 0:
                raise ConfigError(f"'smoothness.{key}' must be a non-negative number")
        cfg.smoothness = dict(sm)
    if command == "plan":
        if sm is None:
            raise ConfigError("missing required key 'smoothness'")
        cfg.n = _int(_need(raw, "n"), "n", 2)
        return cfg
    if command == "verify":
        cfg.options = dict(raw.get("verify", {}))
        cfg.options.setdefault("truths", 3)
        _int(cfg.options["truths"], "verify.truths", 1)
        return cfg
    est = raw.get("estimator", "psi_mk")
    if est not in ESTIMATORS:
        raise ConfigError(f"unknown estimator '{est}'")
    cfg.estimator = est
    cfg.options = dict(raw.get("options", {}))
    cfg.nuisance = dict(raw.get("nuisance", {}))
    if est in FUNCTIONAL_ESTIMATORS or est == "ball":
        fun = _need(raw, "functional")
        _need(fun, "id", "functional.")
        cfg.functional = dict(fun)
    if est in FUNCTIONAL_ESTIMATORS or est in ("ball", "tau_invert"):
        basis = _need(raw, "basis")
        _need(basis, "kind", "basis.")
        _int(_need(basis, "K_max", "basis."), "basis.K_max", 1)
        cfg.basis = dict(basis)
    if est in ("psi3_KJ", "psi_eff") and sm is None:
        raise ConfigError("missing required key 'smoothness'")
    if est == "tau_invert":
        _need(cfg.options, "tau_grid", "options.")
    cfg.data = raw.get("data")
    cfg.truth = raw.get("truth")
    if cfg.data is None and cfg.truth is None:
        raise ConfigError("missing required key 'truth' (or 'data')")
    if command == "mc" and cfg.truth is None:
        raise ConfigError("missing required key 'truth'")
    if cfg.truth is not None:
        kind = _need(cfg.truth, "kind", "truth.")
        if kind not in ("discrete", "smooth"):
            raise ConfigError(f"unknown truth kind '{kind}'")
    if cfg.data is None:
        cfg.n = _int(_need(raw, "n"), "n", 4)
    if command == "mc":
        cfg.reps = _int(_need(raw, "reps"), "reps", 1)
    return cfg


# ----------------------------------------------------------------------------
# truths, data and fits


def build_truth(tcfg: dict):
    from hoifkit.sim import SmoothTruth, cosine_series, make_rng, random_discrete_truth

    rng = make_rng(int(tcfg.get("seed", 0)))
    if tcfg["kind"] == "discrete":
        return random_discrete_truth(rng, G=int(tcfg.get("G", 8)), d=int(tcfg.get("d", 1)), n_y=int(tcfg.get("n_y", 2)))
    d = int(tcfg.get("d", 1))
    beta_b = float(tcfg.get("beta_b", 1.0))
    beta_p = float(tcfg.get("beta_p", 1.0))
    effect = float(tcfg.get("effect", 0.5))
    noise = float(tcfg.get("noise", 1.0))
    mfun = cosine_series(beta_b, rng, scale=float(tcfg.get("scale_b", 0.5)), d=d)
    pfun = cosine_series(beta_p, rng, scale=float(tcfg.get("scale_p", 0.15)), d=d)

    def pi(x):
        return np.clip(0.5 + pfun(x), 0.1, 0.9)

    def f(x):
        return np.ones(np.atleast_2d(x).shape[0])

    return SmoothTruth(
        d=d,
        f=f,
        pi=pi,
        mu=lambda a, x: mfun(x) + effect * a,
        sigma=lambda a, x: np.full(np.atleast_2d(x).shape[0], noise),
        f_max=1.0,
        meta={"effect": effect, "noise": noise, "m": mfun},
    )


def load_data(path: str):
    from hoifkit.model import Dataset

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"data file '{path}' is empty")
    xcols = sorted((c for c in rows[0] if c.startswith("x")), key=lambda c: int(c[1:]) if c[1:].isdigit() else 0)
    y = np.array([float(r["y"]) for r in rows])
    a = np.array([float(r["a"]) for r in rows])
    x = np.array([[float(r[c]) for c in xcols] for r in rows])
    train = np.array([r.get("train", "0") in ("1", "true", "True") for r in rows])
    if not train.any():
        train = np.zeros(len(y), dtype=bool)
        train[: int(math.ceil(len(y) / 2))] = True
    return Dataset(y, a, x, train)


def _functional(fcfg: dict, **extra):
    from hoifkit.model import make_functional

    opts = dict(fcfg.get("options", {}))
    opts.update(extra)
    for key in ("pi0", "c"):
        if key in opts and isinstance(opts[key], (int, float)):
            opts[key] = float(opts[key])
    return make_functional(fcfg["id"], **opts)


def _basis(bcfg: dict, d: int):
    from hoifkit.basis import build_basis

    return build_basis(bcfg["kind"], d, int(bcfg["K_max"]))


def _fit(train, spec, basis, ncfg: dict):
    from hoifkit.nuisance import fit_nuisance

    k_b = int(ncfg.get("k_b", min(8, basis.max_size)))
    return fit_nuisance(train, spec, basis, k_b, ncfg.get("k_p"), ncfg.get("k_f"), ncfg.get("density", "histogram"))


def _truth_psi(truth, spec) -> float:
    return float(truth.psi(spec)) if truth is not None else float("nan")


def _smoothness(cfg: ExperimentConfig):
    from hoifkit.model import SmoothnessConfig

    sm = cfg.smoothness
    return SmoothnessConfig(sm["beta_b"], sm["beta_p"], sm["beta_g"], int(sm.get("d", 1)), planner_only=bool(sm.get("planner_only", False)))


def run_single(cfg: ExperimentConfig, data, truth) -> dict:
    """One estimate on one dataset; returns a flat record plus the full report."""
    from hoifkit import hoif, inference, minimax, simple
    from hoifkit.sim import make_rng

    est = cfg.estimator
    train, est_data = data.training(), data.estimation()
    k = int(cfg.basis.get("k", min(8, int(cfg.basis.get("K_max", 8))))) if cfg.basis else 0
    m = int(cfg.options.get("m", 2))
    rec = {"n": data.n, "k": k, "m": m if est in ("psi_mk", "psi_mod") else None, "estimator": est}
    if est in FUNCTIONAL_ESTIMATORS:
        spec = _functional(cfg.functional)
        basis = _basis(cfg.basis, data.d)
        fit = _fit(train, spec, basis, cfg.nuisance)
        mode = cfg.basis.get("mode", "gram_sqrt_inverse")
        if est == "psi_mk":
            rep = hoif.estimate_psi_mk(est_data, spec, fit, basis, m, k, mode=mode, alpha=cfg.alpha, seed=cfg.seed)
        elif est == "psi_mod":
            from hoifkit.nuisance import fit_density

            sizes = cfg.options.get("extra_k_f", [4] * (m - 2))
            extras = []
            for kf in sizes:
                dens = fit_density(train, int(kf), cfg.nuisance.get("density", "histogram"), basis)
                extras.append(lambda x, dens=dens: fit.varsigma_hat(x) * dens(x))
            rep = hoif.estimate_psi_mk_mod(est_data, spec, fit, extras, basis, m, k, mode=mode, alpha=cfg.alpha, seed=cfg.seed)
        else:
            sm = _smoothness(cfg)
            plan = minimax.plan_within(sm, est_data.n, basis.max_size)
            rec["k"] = plan.k_outer
            if est == "psi3_KJ":
                rep = minimax.estimate_psi3_KJ(est_data, spec, fit, basis, plan, alpha=cfg.alpha, sm=sm)
                rec["m"] = 3
            else:
                m_eff = int(cfg.options["m"]) if "m" in cfg.options else None
                rep = minimax.estimate_psi_eff(est_data, spec, fit, basis, sm=sm, plan=plan, m=m_eff, alpha=cfg.alpha, variance=bool(cfg.options.get("variance", False)))
                rec["m"] = rep.config["m"]
        rec.update({"psi_hat": rep.psi_hat, "W": rep.W, "lo": rep.interval[0], "hi": rep.interval[1], "truth_psi": _truth_psi(truth, spec)})
        return {"record": rec, "report": rep.as_dict()}
    if est == "difference":
        from hoifkit.model import make_functional

        val = simple.difference_estimator(data)
        rec.update({"psi_hat": val, "truth_psi": _truth_psi(truth, make_functional("ExpCondCov1b"))})
        return {"record": rec, "report": {"psi_hat": val}}
    if est == "subcube":
        beta = float(cfg.options.get("beta", 0.5))
        kc = int(cfg.options.get("k", simple.recommended_subcubes(data.n, beta, data.d)))
        val = simple.subcube_variance((data.y, None, data.x), kc, make_rng(cfg.seed))
        sigma2 = float("nan")
        if truth is not None and "noise" in getattr(truth, "meta", {}):
            # E[var(Y | X)] with Y = m(X) + effect * A + noise * eps
            eff = float(truth.meta["effect"])
            sigma2 = float(truth.meta["noise"]) ** 2 + eff**2 * truth.mean_of(lambda x: truth.pi(x) * (1.0 - truth.pi(x)))
        rec.update({"k": kc, "psi_hat": val, "truth_psi": sigma2})
        return {"record": rec, "report": {"psi_hat": val, "k": kc}}
    if est == "ball":
        from hoifkit.nuisance import fit_series_regression

        basis = _basis(cfg.basis, data.d)
        k_b = int(cfg.nuisance.get("k_b", min(8, basis.max_size)))
        b_hat = fit_series_regression(train, basis, k_b, "b")
        spec = _functional(cfg.functional, b_ref=b_hat)
        fit = _fit(train, spec, basis, cfg.nuisance)
        rep = hoif.estimate_psi_mk(est_data, spec, fit, basis, 2, k, alpha=cfg.alpha, seed=cfg.seed)
        ball = inference.confidence_ball(est_data, b_hat, rep, cfg.alpha)
        rec.update({"psi_hat": rep.psi_hat, "W": rep.W, "lo": float("nan"), "hi": ball.radius_sq})
        if truth is not None and hasattr(truth, "nuisance_functions"):
            b_true = truth.nuisance_functions(spec)["b"]
            rec["truth_psi"] = ball.distance_sq(b_true)
            rec["covered"] = ball.contains(b_true)
        else:
            rec["truth_psi"] = float("nan")
        return {"record": rec, "report": {"ball": ball.as_dict(), "estimate": rep.as_dict()}}
    # tau_invert
    from hoifkit.model import make_functional

    basis = _basis(cfg.basis, data.d)

    def estimator(tau):
        spec_t = make_functional("VarWeightedATE1c", tau=tau)
        fit_t = _fit(train, spec_t, basis, cfg.nuisance)
        rep_t = hoif.estimate_psi_mk(est_data, spec_t, fit_t, basis, 2, k, alpha=cfg.alpha, seed=cfg.seed)
        return rep_t.psi_hat, rep_t.W

    grid = np.asarray(cfg.options["tau_grid"], dtype=float)
    if grid.ndim == 1 and len(grid) == 3 and cfg.options.get("grid_spec", False):
        grid = np.linspace(grid[0], grid[1], int(grid[2]))
    tset = inference.invert_ci_for_tau(grid, estimator, cfg.alpha)
    lo, hi = tset.interval_hull
    tau_true = float("nan")
    if truth is not None:
        num = truth.psi(make_functional("ExpCondCov1b"))
        den = num - truth.psi(make_functional("VarWeightedATE1c", tau=1.0))
        tau_true = num / den
    rec.update({"psi_hat": 0.5 * (lo + hi), "lo": lo, "hi": hi, "truth_psi": tau_true})
    return {"record": rec, "report": tset.as_dict()}


# ----------------------------------------------------------------------------
# commands


def cmd_plan(cfg: ExperimentConfig) -> dict:
    from hoifkit import minimax

    sm = _smoothness(cfg)
    plan = minimax.rate_plan(sm, cfg.n, bool(cfg.raw.get("g_known", False)), cfg.raw.get("K_max"))
    out = {"schema_version": SCHEMA_VERSION, "command": "plan", "rate_plan": plan.as_dict()}
    if plan.regime == "sub_root_n" and (plan.eq41_holds or plan.eq41_equality) and sm.beta_b > 0 and sm.beta_p > 0:
        part = minimax.hyperbola_partition(sm, cfg.n)
        out["partition"] = part.as_dict()
        out["partition_checks"] = minimax.check_partition(part)
    return out


def cmd_verify(cfg: ExperimentConfig) -> tuple[dict, list]:
    rows = run_oracle_suite(cfg.seed, int(cfg.options["truths"]))
    return {"schema_version": SCHEMA_VERSION, "command": "verify", "all_pass": all(r[3] for r in rows)}, rows


def run_oracle_suite(seed: int = 0, truths: int = 3) -> list:
    """(identity, max error, tolerance, pass) for the exact identities on discrete truths."""
    from hoifkit import hoif, minimax
    from hoifkit.basis import build_basis, build_design
    from hoifkit.model import make_functional
    from hoifkit.nuisance import NuisanceFit
    from hoifkit.sim import make_rng, random_discrete_truth
    from hoifkit.ustat import chain_kernel_function, vn_brute, vn_chain

    rng = make_rng(seed)
    spec = make_functional("ExpCondCov1b")
    basis = build_basis("tensor_haar", 1, 8)
    errs = {"double_robustness": 0.0, "truncation_bias": 0.0, "estimation_bias": 0.0, "ustat_engine": 0.0, "rectangle_additivity": 0.0, "collapse": 0.0}
    for _ in range(truths):
        truth = random_discrete_truth(rng, G=8)
        nu = truth.nuisances(spec)
        psi = truth.psi(spec)
        b_star = nu["b"] + rng.normal(0, 0.5, truth.G)
        p_star = nu["p"] + rng.normal(0, 0.5, truth.G)
        errs["double_robustness"] = max(errs["double_robustness"], abs(truth.h_mean(spec, nu["b"], p_star) - psi), abs(truth.h_mean(spec, b_star, nu["p"]) - psi))
        fit = NuisanceFit(truth.lookup(b_star), truth.lookup(p_star), truth.lookup(nu["varsigma"]), truth.density())
        orc = hoif.oracle_estimation_bias(truth, spec, fit, basis, 3, 4, tol=1.0)
        errs["truncation_bias"] = max(errs["truncation_bias"], abs(orc.TB_k - orc.details["TB_projection"]))
        errs["estimation_bias"] = max(errs["estimation_bias"], abs(orc.EB_m - orc.details["EB_enumeration"]))
        data = truth.sample(8, int(rng.integers(0, 2**31)))
        design = build_design(basis, data.x, spec, fit, 6)
        pieces = hoif.compute_pieces(spec, fit, design.rows, data.y, data.a, data.x)
        ker = hoif.standard_chain(pieces, 3)
        fast = vn_chain(ker)
        brute = vn_brute(chain_kernel_function(ker), list(range(data.n)), 3)
        errs["ustat_engine"] = max(errs["ustat_engine"], abs(fast - brute) / (1.0 + abs(brute)))
        whole = minimax.um_from_pieces(pieces, [(0, 6), (0, 6)])
        parts = sum(minimax.um_from_pieces(pieces, r) for r in ([(0, 2), (0, 6)], [(2, 6), (0, 3)], [(2, 6), (3, 6)]))
        errs["rectangle_additivity"] = max(errs["rectangle_additivity"], abs(whole - parts))
        plan = minimax.collapsed_plan(6)
        eff = minimax.estimate_psi_eff(data, spec, fit, basis, plan=plan, m=4, mode="gram_sqrt_inverse")
        ref = hoif.estimate_psi_mk(data, spec, fit, basis, 4, 6, variance=False)
        errs["collapse"] = max(errs["collapse"], abs(eff.psi_hat - ref.psi_hat))
    tols = {"double_robustness": 1e-12, "truncation_bias": 1e-10, "estimation_bias": 1e-10, "ustat_engine": 1e-10, "rectangle_additivity": 1e-12, "collapse": 1e-12}
    return [(name, err, tols[name], bool(err <= tols[name])) for name, err in errs.items()]


def _dataset(cfg: ExperimentConfig, truth, seed: int):
    from hoifkit.sim import generate_data

    if cfg.data is not None:
        return load_data(cfg.data)
    return generate_data(truth, cfg.n, seed, float(cfg.raw.get("train_fraction", 0.5)))


def cmd_estimate(cfg: ExperimentConfig) -> tuple[dict, list]:
    truth = build_truth(cfg.truth) if cfg.truth is not None else None
    data = _dataset(cfg, truth, cfg.seed)
    res = run_single(cfg, data, truth)
    report = {"schema_version": SCHEMA_VERSION, "command": "estimate", "estimator": cfg.estimator, "seed": cfg.seed, "record": res["record"], "report": res["report"]}
    rows = []
    per_order = res["report"].get("per_order") if isinstance(res["report"], dict) else None
    if per_order:
        comps = res["report"].get("variance_components", [])
        rows = [(j + 1, v, comps[j] if j < len(comps) else None) for j, v in enumerate(per_order)]
    return report, rows


def cmd_mc(cfg: ExperimentConfig, threads: int = 1) -> tuple[dict, list]:
    from hoifkit.sim import CSV_COLUMNS, monte_carlo

    truth = build_truth(cfg.truth)

    def experiment(rep, seed):
        data = _dataset(cfg, truth, seed)
        return run_single(cfg, data, truth)["record"]

    summary = monte_carlo(experiment, cfg.reps, cfg.seed, workers=threads)
    rows = [[r.get(c) for c in CSV_COLUMNS] for r in summary.rows]
    report = {"schema_version": SCHEMA_VERSION, "command": "mc", "estimator": cfg.estimator, "summary": summary.as_dict()}
    return report, rows


def _write_error(out_dir: str, kind: str, message: str) -> None:
    record = {"schema_version": SCHEMA_VERSION, "error": {"type": kind, "message": message}}
    sys.stderr.write(dumps(record))
    if out_dir:
        try:
            os.makedirs(out_dir, exist_ok=True)
            with open(os.path.join(out_dir, "error.json"), "w") as fh:
                fh.write(dumps(record))
        except OSError:
            pass


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoifkit", description="Higher-order influence function estimators.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="JSON configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--threads", type=int, default=1, help="maximum worker threads for Monte Carlo reps")
    parser.add_argument("--out", default=".", help="output directory")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        _write_error(args.out, "validation", f"cannot read configuration: {exc}")
        return 2
    if args.seed is not None and isinstance(raw, dict):
        raw["seed"] = args.seed
    if args.threads < 1:
        _write_error(args.out, "validation", "--threads must be at least 1")
        return 2
    try:
        cfg = validate_config(raw, args.command)
    except ConfigError as exc:
        _write_error(args.out, "validation", str(exc))
        return 2
    try:
        os.makedirs(args.out, exist_ok=True)
        if args.command == "plan":
            emit_report(cmd_plan(cfg), os.path.join(args.out, "plan.json"))
            return 0
        if args.command == "verify":
            report, rows = cmd_verify(cfg)
            emit_report(report, os.path.join(args.out, "verify.json"))
            emit_report(rows, os.path.join(args.out, "verify.csv"), "csv", ("identity", "max_error", "tolerance", "pass"))
            return 0 if report["all_pass"] else 1
        if args.command == "estimate":
            report, rows = cmd_estimate(cfg)
            emit_report(report, os.path.join(args.out, "report.json"))
            emit_report(rows, os.path.join(args.out, "orders.csv"), "csv", ("order", "term", "variance_component"))
            return 0
        report, rows = cmd_mc(cfg, args.threads)
        from hoifkit.sim import CSV_COLUMNS

        emit_report(report, os.path.join(args.out, "summary.json"))
        emit_report(rows, os.path.join(args.out, "reps.csv"), "csv", CSV_COLUMNS)
        return 0
    except ConfigError as exc:
        _write_error(args.out, "validation", str(exc))
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure becomes an error record
        _write_error(args.out, "runtime", f"{type(exc).__name__}: {exc}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
