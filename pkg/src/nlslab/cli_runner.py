"""Command-line runner: config validation, experiments, artifacts and manifests.

Usage::

    nlslab <experiment> --config run.json [--seed N] [--out DIR]
    nlslab report RUN_DIR [RUN_DIR ...] [--out DIR]

Exit codes: 0 success, 1 finished with failing checks, 2 invalid config,
3 numerical failure (the manifest is still written), 4 I/O or integrity error.

Every run writes ``manifest.json`` last (atomically) with the resolved config,
the per-check table and a SHA-256 for every artifact.  Numeric artifacts are
deterministic functions of config and seed; wall time lives only in the
manifest.
"""

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from nlslab import __version__
from nlslab.errors import LabError, NumericalError, ValidationError
from nlslab.randomization import FAMILIES

log = logging.getLogger("nlslab")

EXPERIMENTS = ("spectrum", "groundstate", "plane-waves", "randomize-mc", "evolve", "stability",
               "bilinear", "strichartz", "local-smoothing", "norms")
MANIFEST = "manifest.json"
OUT_ENV = "NLSLAB_OUT"

EXIT_OK, EXIT_CHECKS, EXIT_SCHEMA, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3, 4


# ---------------------------------------------------------------------------
# configuration

BASE_DEFAULTS = {
    "grid": {"L": 40.0, "n_points": 2048, "d": 1},
    "potential": {"kind": "sech2", "depth": 2.0, "width": 1.0},
    "evolution": {"dt": 1e-3, "t_final": 1.0, "stride": 10, "scheme": "strang", "mu": 1.0,
                  "projection": "full", "dealias": False},
    "randomization": {"law": "complex-gaussian", "variance": 1.0, "eps": 1e-3, "seeds": [0], "n_samples": 10000},
    "branch": {"z_min": 1e-3, "z_max": 1e-1, "samples": 8, "nodes": "log"},
    "tolerances": {},
    "params": {},
}

PARAM_DEFAULTS = {
    "spectrum": {"gap_eps": 1e-3, "cross_localization": False, "cross_N": [1, 4, 16, 64],
                 "cross_floor": 1e-12, "cross_offset": 3},
    "groundstate": {},
    "plane-waves": {"n_fields": 100, "xi": [0.5, 1.0, 2.0, 4.0], "cross_route": True,
                    "ls_L": 20.0, "ls_n_points": 512, "xi_cut": 25.0},
    "randomize-mc": {"single_cube": True, "cube_center": 3.0, "n_oracle": 100000,
                     "multi_cube": True, "st_q": 4.0, "st_r": 4.0, "st_horizon": 1.0, "st_times": 21,
                     "n_lambdas": 50},
    "evolve": {"data": "soliton", "z": 0.1, "width": 1.0, "k0": 0.0, "save_fields": True},
    "stability": {"z0": 0.05, "bump_size": 1e-3, "k0": 3.0, "branch_lo": 0.03, "branch_hi": 0.07,
                  "branch_count": 12, "variant": "exact", "halving": False, "tail_fraction": 0.8,
                  "increments": True},
    "bilinear": {"N": [4], "M": [16, 32, 64, 128, 256, 512], "n_samples": 20, "steps_per_unit": 20,
                 "horizon_factor": 6.0, "slope_target": -0.5, "ratio_bound": 2.0},
    "strichartz": {"pairs": [["inf", 2], [8, 4], [6, 6], [4, "inf"]], "horizon": 20.0, "dt": 0.05,
                   "decay": True, "t_lo": 1.0, "t_hi": 50.0, "n_times": 40, "width": 1.0},
    "local-smoothing": {"horizon": 10.0, "dt": 0.05, "eps": 0.1, "width": 1.0, "forcing": False},
    "norms": {"n_paths": 500, "max_len": 10, "dim": 2, "q_values": [1.0, 1.5, 2.0, 3.0, 4.0],
              "duality_samples": 100000, "coherence_horizon": 5.0, "coherence_dt": 0.05},
}

# default tolerances per check name; config "tolerances" may override any of them
TOLERANCES = {
    "spectrum": {"gram_residual": 1e-10, "cross_localization_worst_ratio": 0.1},
    "groundstate": {"exponent_width": 0.15, "max_residual": 1e-10, "runtime_s": 120.0},
    "plane-waves": {"plancherel": 1e-8, "diagonalization": 1e-8, "helmholtz_residual": 1e-6,
                    "multiplier_agreement": 1e-4},
    "randomize-mc": {"single_cube_slope_rel": 0.05, "multi_cube_r_squared": 0.9, "runtime_s": 300.0},
    "evolve": {"sup_modulus_error": 1e-6, "phase_error": 1e-5, "runtime_s": 60.0, "mass_drift": 1e-8},
    "stability": {"tail_variation": 1e-4, "pp_ratio": 0.5, "consistency_ratio": 2.0, "runtime_s": 900.0},
    "bilinear": {"slope": 0.1},
    "strichartz": {"decay_slope": 0.05, "decay_slope_perturbed": 0.15, "horizon_doubling": 1.5},
    "local-smoothing": {"cross_check": 1e-10, "horizon_doubling": 1.5},
    "norms": {"dp_mismatches": 0, "monotonicity_violations": 0, "embedding_violations": 0,
              "duality_ratio": 0.05},
}

_num = {"type": "number"}
_int = {"type": "integer"}
_bool = {"type": "boolean"}


def _block(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _block({
    "experiment": {"enum": list(EXPERIMENTS)},
    "grid": _block({"L": {"type": "number", "exclusiveMinimum": 0}, "n_points": _int, "d": {"const": 1}}),
    "potential": _block({"kind": {"enum": ["zero", "sech2", "gaussian"]}, "depth": _num,
                         "width": {"type": "number", "exclusiveMinimum": 0}}),
    "evolution": _block({"dt": {"type": "number", "exclusiveMinimum": 0},
                         "t_final": {"type": "number", "exclusiveMinimum": 0},
                         "stride": {"type": "integer", "minimum": 1}, "scheme": {"enum": ["strang"]},
                         "mu": _num, "projection": {"enum": ["full", "continuous-projected"]},
                         "dealias": _bool}),
    "randomization": _block({"law": {"enum": list(FAMILIES)},
                             "variance": {"type": "number", "exclusiveMinimum": 0},
                             "eps": {"type": "number", "minimum": 0},
                             "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                             "n_samples": {"type": "integer", "minimum": 1}}),
    "branch": _block({"z_min": {"type": "number", "exclusiveMinimum": 0},
                      "z_max": {"type": "number", "exclusiveMinimum": 0},
                      "samples": {"type": "integer", "minimum": 2}, "nodes": {"enum": ["log", "chebyshev"]}}),
    "tolerances": {"type": "object", "additionalProperties": _num},
    "params": {"type": "object"},
    "output_dir": {"type": "string"},
})


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _path_name(err):
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def resolve_config(raw, experiment, seed=None, out=None):
    """Validate a raw config dict and fill defaults; raises ValidationError naming the field."""
    if not isinstance(raw, dict):
        raise ValidationError("config must be a JSON object")
    if experiment not in EXPERIMENTS:
        raise ValidationError(f"unknown experiment {experiment!r}")
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(raw), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        e = errors[0]
        raise ValidationError(f"config field {_path_name(e)}: {e.message}")
    if raw.get("experiment", experiment) != experiment:
        raise ValidationError(f"config field experiment: {raw['experiment']!r} does not match subcommand {experiment!r}")
    cfg = _merge(BASE_DEFAULTS, {k: v for k, v in raw.items() if k != "params"})
    cfg["experiment"] = experiment
    unknown = set(raw.get("params", {})) - set(PARAM_DEFAULTS[experiment])
    if unknown:
        raise ValidationError(f"config field params.{sorted(unknown)[0]}: unknown parameter for {experiment}")
    cfg["params"] = _merge(PARAM_DEFAULTS[experiment], raw.get("params", {}))
    unknown = set(cfg["tolerances"]) - set(TOLERANCES[experiment])
    if unknown:
        raise ValidationError(f"config field tolerances.{sorted(unknown)[0]}: no such check for {experiment}")
    n = cfg["grid"]["n_points"]
    if n < 8 or n & (n - 1):
        raise ValidationError(f"config field grid.n_points: {n} is not a power of two >= 8")
    b = cfg["branch"]
    if b["z_min"] >= b["z_max"]:
        raise ValidationError("config field branch.z_min: must be below branch.z_max")
    if seed is not None:
        if seed < 0:
            raise ValidationError("--seed must be non-negative")
        cfg["randomization"]["seeds"] = [int(seed)]
    cfg["output_dir"] = out or os.environ.get(OUT_ENV) or cfg.get("output_dir") or f"runs/{experiment}"
    return cfg


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc


# ---------------------------------------------------------------------------
# artifacts


def fmt(x):
    """17-significant-digit text for floats (round-trips exactly); ints and bools verbatim."""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), ".17g")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else str(f)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path, data):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


class ArtifactWriter:
    """Writes artifacts into one run directory and remembers their names."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files = []

    def _put(self, name, data):
        path = self.root / name
        _atomic_write(path, data)
        self.files.append(name)
        return path

    def array(self, name, arr):
        """Raw little-endian row-major bytes plus a JSON sidecar (shape, dtype, order)."""
        arr = np.asarray(arr)
        if np.iscomplexobj(arr):
            dtype, arr = "complex128", arr.astype("<c16")
        else:
            dtype, arr = "float64", arr.astype("<f8")
        self._put(f"{name}.bin", np.ascontiguousarray(arr).tobytes(order="C"))
        side = {"dtype": dtype, "order": "row-major", "shape": list(arr.shape)}
        self._put(f"{name}.json", (json.dumps(side, sort_keys=True) + "\n").encode())

    def csv(self, name, header, rows):
        lines = [",".join(header)]
        lines += [",".join(fmt(v) for v in row) for row in rows]
        self._put(f"{name}.csv", ("\n".join(lines) + "\n").encode())

    def json(self, name, obj):
        self._put(f"{name}.json", (json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n").encode())

    def dat(self, name, x, y, labels=("x", "y")):
        lines = [f"# {labels[0]} {labels[1]}"]
        lines += [f"{fmt(a)} {fmt(b)}" for a, b in zip(np.asarray(x).ravel(), np.asarray(y).ravel())]
        self._put(f"{name}.dat", ("\n".join(lines) + "\n").encode())


def read_array(stem):
    """Inverse of ArtifactWriter.array: ``stem`` is the path without extension."""
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    dt = {"complex128": "<c16", "float64": "<f8"}[side["dtype"]]
    return np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype=dt).reshape(side["shape"])


# ---------------------------------------------------------------------------
# checks


@dataclass
class Check:
    name: str
    value: object
    tolerance: object
    comparator: str
    passed: bool
    target: object = None

    def as_dict(self):
        return _jsonable({"name": self.name, "value": self.value, "tolerance": self.tolerance,
                          "comparator": self.comparator, "passed": self.passed, "target": self.target})


@dataclass
class RunContext:
    cfg: dict
    out: ArtifactWriter
    checks: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def params(self):
        return self.cfg["params"]

    def tol(self, key):
        return self.cfg["tolerances"].get(key, TOLERANCES[self.cfg["experiment"]][key])

    def check_le(self, name, value, tol_key):
        tol = self.tol(tol_key)
        self.checks.append(Check(name, float(value), tol, "<=", bool(value <= tol)))

    def check_ge(self, name, value, tol_key):
        tol = self.tol(tol_key)
        self.checks.append(Check(name, float(value), tol, ">=", bool(value >= tol)))

    def check_near(self, name, value, target, tol_key, relative=False):
        tol = self.tol(tol_key)
        dev = abs(value / target - 1.0) if relative else abs(value - target)
        comp = "|value/target-1|<=" if relative else "|value-target|<="
        self.checks.append(Check(name, float(value), tol, comp, bool(dev <= tol), target))

    def check_true(self, name, flag, value=None):
        self.checks.append(Check(name, flag if value is None else value, None, "is-true", bool(flag)))

    def record(self, name, value):
        """A measured constant with no pass/fail threshold (always passes when finite)."""
        self.checks.append(Check(name, float(value), None, "finite", bool(np.isfinite(value))))


# ---------------------------------------------------------------------------
# shared builders


def _context(cfg, grid=None, diagonalize=True):
    from nlslab.spectral_core import Grid1D, PotentialSpec, build_operator

    g = cfg["grid"] if grid is None else grid
    p = cfg["potential"]
    pot = PotentialSpec(p["kind"], float(p["depth"]), float(p["width"]))
    return build_operator(Grid1D(float(g["L"]), int(g["n_points"])), pot, d=1, diagonalize=diagonalize)


def _evolution_config(cfg, **over):
    from nlslab.evolution import EvolutionConfig

    e = dict(cfg["evolution"])
    e.update(over)
    return EvolutionConfig(dt=e["dt"], t_final=e["t_final"], stride=e["stride"], scheme=e["scheme"],
                           mu=e["mu"], projection=e["projection"], dealias=e["dealias"])


def _law(cfg):
    from nlslab.randomization import CoefficientLaw

    r = cfg["randomization"]
    return CoefficientLaw(r["law"], r["variance"])


def _gaussian(grid, width=1.0, k0=0.0):
    return np.exp(-0.5 * (grid.x / width) ** 2 + 1j * k0 * grid.x)


# ---------------------------------------------------------------------------
# experiments


def run_spectrum(rc):
    from nlslab.spectral_core import cross_localization_decay

    ctx = _context(rc.cfg)
    P = rc.params
    lam = ctx.eigenvalues
    g = ctx.grid
    rc.out.array("eigenvalues", lam)
    rc.out.csv("spectrum", ("index", "eigenvalue"), enumerate(lam))
    rc.out.dat("potential", g.x, ctx.V, ("x", "V"))
    neg = ctx.negative_indices
    if neg.size:
        rc.record("e0", ctx.e0)
    rc.check_true("simple_ground_state", neg.size == 1, int(neg.size))
    rc.check_true("gap", ctx.spectral_gap_check(P["gap_eps"]), float(np.min(np.abs(lam))))
    rc.check_le("gram_residual", ctx.gram_residual(), "gram_residual")
    if neg.size:
        rc.out.array("phi0", ctx.phi0)
    rc.summary.update(n_negative=int(neg.size), e0=float(ctx.e0) if neg.size else None,
                      lambda_min_abs=float(np.min(np.abs(lam))))
    if P["cross_localization"]:
        res = cross_localization_decay(ctx, P["cross_N"], P["cross_offset"], P["cross_floor"])
        rows = [(N, K, v) for N, row in res["table"].items() for K, v in row.items()]
        rc.out.csv("cross_localization", ("N", "K", "norm"), rows)
        rc.check_true("cross_localization_steps", res["steps"] > 0, res["steps"])
        rc.check_le("cross_localization_worst_ratio", res["worst_ratio"], "cross_localization_worst_ratio")
        rc.summary["cross_localization_worst_ratio"] = res["worst_ratio"]


def run_groundstate(rc):
    from nlslab.groundstate import build_branch, chebyshev_nodes, scaling_report, weighted_report

    ctx = _context(rc.cfg)
    b = rc.cfg["branch"]
    if b["nodes"] == "log":
        moduli = np.geomspace(b["z_min"], b["z_max"], b["samples"])
    else:
        moduli = chebyshev_nodes(b["z_min"], b["z_max"], b["samples"])
    br = build_branch(ctx, moduli, nodes=b["nodes"])
    rows = [(z, e, de, r, it) for z, e, de, r, it in zip(br.moduli, br.e, br.de, br.residuals, br.iterations)]
    rc.out.csv("branch", ("z", "e", "de", "residual", "iterations"), rows)
    rc.out.array("q", np.array(br.q))
    rc.out.array("moduli", br.moduli)
    rc.check_le("max_residual", float(np.max(br.residuals)), "max_residual")
    if len(br) >= 6:
        s = scaling_report(br, ctx.grid)
        w1, w2 = weighted_report(br, ctx.grid, 1), weighted_report(br, ctx.grid, 2)
        targets = {"exp_q_H2": (s["q_H2"], 3), "exp_x1_q_H2": (w1["q"], 3), "exp_x2_q_H2": (w2["q"], 3),
                   "exp_Dzq_H2": (s["Dzq_H2"], 2), "exp_e": (s["e"], 2), "exp_Dze": (s["Dze"], 1)}
        for name, (val, tgt) in targets.items():
            rc.check_near(name, val, tgt, "exponent_width")
        rc.summary["exponents"] = {k: v[0] for k, v in targets.items()}
        logz = np.log(br.moduli)
        rc.out.dat("scaling_e", logz, np.log(np.abs(br.e)), ("log_z", "log_abs_e"))
    rc.summary["z"] = br.moduli


def run_plane_waves(rc):
    from nlslab import scattering as S

    P = rc.params
    ctx = _context(rc.cfg)
    g = ctx.grid
    T = S.build_transform(ctx, "eigenbasis")
    rng = np.random.Generator(np.random.Philox(key=np.array([rc.cfg["randomization"]["seeds"][0], 0x5CA7],
                                                             dtype=np.uint64)))
    planch, diag = [], []
    for _ in range(P["n_fields"]):
        u = rng.standard_normal(g.n_points) + 1j * rng.standard_normal(g.n_points)
        planch.append(T.plancherel_defect(ctx, u) / g.norm(u))
        diag.append(T.diagonalization_defect(ctx, u))
    rc.check_le("plancherel", max(planch), "plancherel")
    rc.check_le("diagonalization", max(diag), "diagonalization")
    rc.out.array("momenta", T.momenta)
    rc.out.csv("transform_defects", ("field", "plancherel_rel", "diagonalization_rel"),
               ((i, a, b) for i, (a, b) in enumerate(zip(planch, diag))))
    tab = S.plane_wave_table(ctx, np.asarray(P["xi"], dtype=float))
    rc.out.array("plane_waves", tab.waves)
    rc.out.csv("plane_wave_residuals", ("xi", "residual"), zip(tab.momenta, tab.residuals))
    rc.check_le("helmholtz_residual", float(np.max(tab.residuals)), "helmholtz_residual")
    if P["cross_route"]:
        small = _context(rc.cfg, {"L": P["ls_L"], "n_points": P["ls_n_points"]})
        gs = small.grid
        TL = S.build_transform(small, "lippmann-schwinger", xi_cut=P["xi_cut"])
        TE = S.build_transform(small, "eigenbasis")
        rc.record("cluster_alignment", S.cluster_alignment(small, TL, TE))
        v = np.exp(-gs.x**2 / 2) * (rng.standard_normal(gs.n_points) + 1j * rng.standard_normal(gs.n_points))
        v = gs.apply_flat(lambda lam: np.exp(-lam / 8), v)
        worst = 0.0
        for m in (lambda xi: np.exp(-xi**2 / 4), lambda xi: np.tanh(xi) * np.exp(-xi**2 / 16)):
            a = S.distorted_multiplier(small, TE, m, v)
            b = S.distorted_multiplier(small, TL, m, v)
            worst = max(worst, gs.norm(a - b) / gs.norm(v))
        rc.check_le("multiplier_agreement", worst, "multiplier_agreement")
        rc.record("ls_plancherel", TL.plancherel_defect(small, v) / gs.norm(v))


def run_randomize_mc(rc):
    from nlslab import randomization as R
    from nlslab.scattering import build_transform

    P = rc.params
    ctx = _context(rc.cfg)
    g = ctx.grid
    law = _law(rc.cfg)
    seed = rc.cfg["randomization"]["seeds"][0]
    T = build_transform(ctx)
    part = R.WienerPartition.build(ctx, T)
    rc.record("partition_coverage", part.coverage_residual())
    if P["single_cube"]:
        c = P["cube_center"]
        # spectral bump inside one unit interval: the L^2 norm is an exact gaussian
        # functional with tail slope -1/||u0||^2 in lambda^2
        m = np.exp(-(((T.momenta - c) / 0.06) ** 2)) * (np.abs(T.momenta - c) < 0.24)
        u0 = T.synthesize(m.astype(complex))
        p = g.norm(u0)
        lam = np.linspace(0.2 * p, 3.5 * p, P["n_lambdas"])
        rep = R.tail_probability_mc(ctx, u0, law, R.DataNorm(2), lam, P["n_oracle"], seed, part)
        rc.out.csv("tail_single_cube", ("lambda", "p_empirical", "n_samples"), rep.csv_rows())
        oracle = -1.0 / (law.variance * p**2)
        rc.out.json("fit_single_cube", {"slope": rep.slope, "oracle": oracle, "r_squared": rep.r_squared,
                                        "tail_points": rep.tail_points, "n_samples": rep.n_samples})
        rc.check_near("single_cube_slope", rep.slope, oracle, "single_cube_slope_rel", relative=True)
    if P["multi_cube"]:
        u1 = _gaussian(g)
        u1 = u1 / g.norm(u1)
        times = np.linspace(0.0, P["st_horizon"], P["st_times"])
        st = R.SpaceTimeNorm(_exponent(P["st_q"]), _exponent(P["st_r"]), times)
        n = rc.cfg["randomization"]["n_samples"]
        pilot = R.tail_probability_mc(ctx, u1, law, st, [0.0], 1000, seed + 1, part)
        lam = np.linspace(np.quantile(pilot.values, 0.5), pilot.values.max() * 1.3, P["n_lambdas"])
        rep = R.tail_probability_mc(ctx, u1, law, st, lam, n, seed, part)
        rc.out.csv("tail_multi_cube", ("lambda", "p_empirical", "n_samples"), rep.csv_rows())
        rc.out.json("fit_multi_cube", {"slope": rep.slope, "r_squared": rep.r_squared,
                                       "slope_stderr": rep.slope_stderr, "tail_points": rep.tail_points,
                                       "n_samples": rep.n_samples, "norm": st.name})
        rc.checks.append(Check("multi_cube_slope", float(rep.slope), 0.0, "<", bool(rep.slope < 0)))
        rc.check_ge("multi_cube_r_squared", rep.r_squared, "multi_cube_r_squared")


def _exponent(v):
    return np.inf if v in ("inf", float("inf")) else float(v)


def run_evolve(rc):
    from nlslab.evolution import nls_evolve
    from nlslab.groundstate import solve_ground_state

    P = rc.params
    ctx = _context(rc.cfg)
    g = ctx.grid
    conf = _evolution_config(rc.cfg)
    if P["data"] == "soliton":
        gs = solve_ground_state(ctx, P["z"])
        psi0, ref, E = gs.Q, gs.Q, gs.E
    elif P["data"] == "gaussian":
        psi0, ref, E = _gaussian(g, P["width"], P["k0"]), None, None
    else:
        raise ValidationError(f"config field params.data: unknown data {P['data']!r}")
    tr = nls_evolve(ctx, psi0, conf)
    rc.out.csv("series", ("t", "mass", "energy", "sup_norm"),
               zip(tr.times, tr.mass, tr.energy, tr.sup_norm))
    if P["save_fields"]:
        rc.out.array("fields", tr.fields)
    rc.out.dat("modulus_final", g.x, np.abs(tr.fields[-1]), ("x", "abs_psi"))
    rc.check_le("mass_drift", tr.mass_drift, "mass_drift")
    rc.summary.update(mass_drift=tr.mass_drift, energy_drift=tr.energy_drift, margin=tr.margin)
    if ref is not None:
        amp = float(np.max(np.abs(np.abs(tr.fields) - np.abs(ref)[None, :])))
        phase = float(np.max(np.abs(tr.fields - np.exp(-1j * tr.times * E)[:, None] * ref[None, :])))
        rc.check_le("sup_modulus_error", amp, "sup_modulus_error")
        rc.check_le("phase_error", phase, "phase_error")
        rc.summary.update(E=E, sup_modulus_error=amp, phase_error=phase)


def run_stability(rc):
    from nlslab import modulation as Mo
    from nlslab.groundstate import chebyshev_branch
    from nlslab.randomization import WienerPartition

    P = rc.params
    ctx = _context(rc.cfg)
    br = chebyshev_branch(ctx, P["branch_lo"], P["branch_hi"], P["branch_count"])
    part = WienerPartition.build(ctx)
    u0 = Mo.carrier_data(ctx, P["k0"])
    conf = _evolution_config(rc.cfg)
    eps = rc.cfg["randomization"]["eps"]
    law = _law(rc.cfg)
    seeds = rc.cfg["randomization"]["seeds"]
    T = conf.t_final
    table = []
    flags = {"tail": True, "monotone": True, "pp": True}
    for seed in seeds:
        data = Mo.stability_data(ctx, seed, P["z0"], eps, P["bump_size"], P["k0"], law, part, u0)
        rec = Mo.stability_experiment(ctx, br, data, conf, variant=P["variant"])
        if rec.truncated:
            raise NumericalError(f"stability run for seed {seed} truncated: {rec.message}")
        rc.out.csv(f"modulation_seed{seed}", Mo.CSV_HEADER, rec.csv_rows())
        tv = rec.tail_variation(P["tail_fraction"] * T)
        rd = Mo.radiation_discrete_part(ctx, br, rec)
        pp_ratio = rd["final"] / rd["peak"] if rd["peak"] > 0 else 0.0
        incs = np.array([i[2] for i in rec.increments])
        mono = bool(incs.size >= 2 and np.all(np.diff(incs) < 0))
        cons = Mo.ode_consistency(rec, conf.dt)
        rc.check_le(f"seed{seed}.tail_variation", tv, "tail_variation")
        rc.check_le(f"seed{seed}.pp_ratio", pp_ratio, "pp_ratio")
        if P["increments"]:
            rc.check_true(f"seed{seed}.increments_monotone", mono, incs.tolist())
            rc.out.dat(f"increments_seed{seed}", [i[1] for i in rec.increments], incs, ("t_end", "increment"))
        rc.record(f"seed{seed}.ode_consistency_C", cons)
        zp = rec.z_plus()
        summary = {"seed": seed, "z_plus": [zp.real, zp.imag], "tail_variation": tv,
                   "tail_integral": rec.tail_integral(P["tail_fraction"] * T), "increments": incs,
                   "increments_monotone": mono, "pp_ratio": pp_ratio, "ode_consistency_C": cons,
                   "pp_bound_constant": rd["bound_constant"]}
        rc.out.json(f"summary_seed{seed}", summary)
        table.append(summary)
        flags["tail"] &= tv <= rc.tol("tail_variation")
        flags["monotone"] &= mono
        flags["pp"] &= pp_ratio <= rc.tol("pp_ratio")
        if P["halving"]:
            rec2 = Mo.stability_experiment(ctx, br, data, _evolution_config(
                rc.cfg, dt=conf.dt / 2, stride=2 * conf.stride), variant=P["variant"])
            cons2 = Mo.ode_consistency(rec2, conf.dt / 2)
            ratio = max(cons, cons2) / min(cons, cons2) if min(cons, cons2) > 0 else float("inf")
            rc.record(f"seed{seed}.ode_consistency_C_halved", cons2)
            rc.check_le(f"seed{seed}.consistency_ratio", ratio, "consistency_ratio")
            summary["ode_consistency_C_halved"] = cons2
    rc.out.csv("z_plus", ("seed", "re_z_plus", "im_z_plus", "tail_variation", "increments_monotone"),
               ((s["seed"], s["z_plus"][0], s["z_plus"][1], s["tail_variation"], s["increments_monotone"])
                for s in table))
    rc.summary.update(seeds=seeds, all_tail=flags["tail"], all_monotone=flags["monotone"], all_pp=flags["pp"])


def run_bilinear(rc):
    from nlslab.evolution import bilinear_slope, bilinear_sweep

    P = rc.params
    ctx = _context(rc.cfg, diagonalize=rc.cfg["potential"]["kind"] != "zero")
    res = bilinear_sweep(ctx, P["N"], P["M"], P["n_samples"], horizon_factor=P["horizon_factor"],
                         seed=rc.cfg["randomization"]["seeds"][0], steps_per_unit=P["steps_per_unit"])
    rows = [(N, M, v["mean_ratio"], v["max_ratio"], float(np.mean(v["norms"])))
            for (N, M), v in sorted(res["table"].items())]
    rc.out.csv("bilinear_table", ("N", "M", "mean_ratio", "max_ratio", "mean_norm"), rows)
    const = max(r[3] for r in rows)
    rc.record("ratio_constant", const)
    for N in P["N"]:
        sel = [r for r in rows if r[0] == N]
        rc.out.dat(f"bilinear_N{N}", np.log([r[1] for r in sel]), np.log([r[4] for r in sel]),
                   ("log_M", "log_mean_norm"))
        if ctx.is_free and len(sel) >= 2:
            rc.check_near(f"slope_N{N}", bilinear_slope(res, N), P["slope_target"], "slope")
    if not ctx.is_free:
        tol = P["ratio_bound"]
        rc.checks.append(Check("ratio_bounded", const, tol, "<=", bool(const <= tol)))
    rc.summary.update(ratio_constant=const, rejected=res["rejected"])


def run_strichartz(rc):
    from nlslab.evolution import dispersive_decay_slope, strichartz_ratio

    P = rc.params
    free = rc.cfg["potential"]["kind"] == "zero"
    ctx = _context(rc.cfg, diagonalize=not free)
    g = ctx.grid
    u0 = _gaussian(g, P["width"])
    rows = []
    if not free:
        for q, r in P["pairs"]:
            q, r = _exponent(q), _exponent(r)
            a = strichartz_ratio(ctx, u0, q, r, P["horizon"], P["dt"])
            b = strichartz_ratio(ctx, u0, q, r, 2 * P["horizon"], P["dt"])
            rows.append((fmt(q), fmt(r), a, b))
            rc.check_le(f"strichartz_q{fmt(q)}_r{fmt(r)}.horizon_doubling", b / a, "horizon_doubling")
        rc.out.csv("strichartz", ("q", "r", "ratio_T", "ratio_2T"), rows)
    if P["decay"]:
        slope, times, sup = dispersive_decay_slope(ctx, u0, P["t_lo"], P["t_hi"], P["n_times"], project=not free)
        rc.out.dat("decay", times, sup, ("t", "sup_norm"))
        rc.check_near("decay_slope", slope, -0.5, "decay_slope" if free else "decay_slope_perturbed")
        rc.summary["decay_slope"] = slope


def run_local_smoothing(rc):
    from nlslab.critical_norms import weighted_spacetime_norm
    from nlslab.evolution import linear_path, local_smoothing_ratio
    from nlslab.spectral_core import sobolev_norm

    P = rc.params
    ctx = _context(rc.cfg)
    g = ctx.grid
    u0 = _gaussian(g, P["width"])
    forcing = (lambda t: np.exp(-t) * u0) if P["forcing"] else None
    r1 = local_smoothing_ratio(ctx, u0, P["horizon"], forcing, P["eps"], P["dt"])
    r2 = local_smoothing_ratio(ctx, u0, 2 * P["horizon"], forcing, P["eps"], P["dt"])
    rc.record("ratio", r1)
    rc.check_le("horizon_doubling", r2 / r1, "horizon_doubling")
    if forcing is None:
        times = np.linspace(0.0, P["horizon"], int(round(P["horizon"] / P["dt"])) + 1)
        rows = linear_path(ctx, u0, times)
        w = weighted_spacetime_norm(ctx, (times, rows), 1.0, -0.5 - P["eps"])
        alt = w**2 / sobolev_norm(ctx, u0, 0.5, "flat") ** 2
        rc.check_le("cross_check", abs(alt - r1) / r1, "cross_check")
    rc.out.json("local_smoothing", {"ratio": r1, "ratio_doubled": r2, "sigma": -0.5 - P["eps"]})


def run_norms(rc):
    from nlslab import critical_norms as C
    from nlslab.evolution import linear_path

    P = rc.params
    seed = rc.cfg["randomization"]["seeds"][0]
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0x9A7], dtype=np.uint64)))
    mismatches = mono_bad = embed_bad = 0
    qs = sorted(P["q_values"])
    rows = []
    for i in range(P["n_paths"]):
        # max_len bounds the effective sample count, implicit zero included
        zp = bool(rng.integers(0, 2))
        n = int(rng.integers(2 - zp, P["max_len"] - zp + 1))
        v = rng.standard_normal((n, P["dim"])) + 1j * rng.standard_normal((n, P["dim"]))
        path = C.DiscretePath(np.sort(rng.uniform(0, 1, n)) + np.arange(n), v, zp)
        vals = [C.q_variation(path, q) for q in qs]
        brute = [C.q_variation_bruteforce(path, q) for q in qs]
        mismatches += sum(a != b for a, b in zip(vals, brute))
        mono_bad += sum(vals[k + 1] > vals[k] * (1 + 1e-12) for k in range(len(vals) - 1))
        if path.zero_prefix:
            embed_bad += sum(path.sup_norm() > val * (1 + 1e-12) for val in vals)
        rows.append((i, n, int(path.zero_prefix), *vals))
    rc.out.csv("q_variation", ("path", "samples", "zero_prefix", *[f"q={fmt(q)}" for q in qs]), rows)
    rc.check_le("dp_mismatches", mismatches, "dp_mismatches")
    rc.check_le("monotonicity_violations", mono_bad, "monotonicity_violations")
    rc.check_le("embedding_violations", embed_bad, "embedding_violations")
    # duality pairing on a 3-step scalar path: random search vs constrained optimum
    u = C.DiscretePath([0.0, 1.0, 2.0], rng.standard_normal((3, 1)) + 1j * rng.standard_normal((3, 1)))
    sup, _ = C.duality_supremum(u)
    lb, _ = C.duality_lower_bound(u, P["duality_samples"], seed)
    rc.record("duality_supremum", sup)
    rc.checks.append(Check("duality_ratio", lb / sup, rc.tol("duality_ratio"), "1-tol<=value<=1+1e-9",
                           bool(1 - rc.tol("duality_ratio") <= lb / sup <= 1 + 1e-9)))
    # adapted norm of a linear solution and the critical-weighted constant
    ctx = _context(rc.cfg)
    g = ctx.grid
    u0 = _gaussian(g)
    times = np.linspace(0.0, P["coherence_horizon"], int(round(P["coherence_horizon"] / P["coherence_dt"])) + 1)
    path = C.DiscretePath.from_fields(g, times, linear_path(ctx, u0, times))
    a = C.adapted_norm(ctx, path, 2.0, "H", 0.0)
    rc.checks.append(Check("adapted_linear_path", a, 1e-10, "|value-target|/target<=",
                           bool(abs(a - g.norm(u0)) <= 1e-10 * g.norm(u0)), g.norm(u0)))
    rep = C.critical_weighted_constant(ctx, u0, P["coherence_horizon"], P["coherence_dt"])
    rc.record("coherence_constant", rep.constant)
    xn = C.x_norm(ctx, path)
    rc.record("x_norm_linear", xn)
    entries = [C.norm_entry("adapted", a, q=2, generator="H", s=0.0),
               C.norm_entry("x_norm", xn, s=(ctx.d - 2) / 2),
               C.norm_entry("coherence", rep.constant, sigma=rep.sigma, horizon=rep.horizon),
               C.norm_entry("duality_supremum", sup, steps=3)]
    rc.out.json("norm_report", entries)


RUNNERS = {
    "spectrum": run_spectrum,
    "groundstate": run_groundstate,
    "plane-waves": run_plane_waves,
    "randomize-mc": run_randomize_mc,
    "evolve": run_evolve,
    "stability": run_stability,
    "bilinear": run_bilinear,
    "strichartz": run_strichartz,
    "local-smoothing": run_local_smoothing,
    "norms": run_norms,
}


# ---------------------------------------------------------------------------
# run + manifest


@dataclass
class RunResult:
    exit_code: int
    manifest: dict
    directory: Path


def _write_manifest(out_dir, cfg, rc, started, status, error=None):
    out_dir = Path(out_dir)
    files = rc.out.files if rc is not None else []
    manifest = {
        "config": cfg,
        "code_version": __version__,
        "wall_time_s": time.perf_counter() - started,
        "status": status,
        "error": error,
        "checks": [c.as_dict() for c in rc.checks] if rc is not None else [],
        "summary": _jsonable(rc.summary) if rc is not None else {},
        "artifacts": [{"file": f, "sha256": sha256(out_dir / f), "bytes": (out_dir / f).stat().st_size}
                      for f in sorted(set(files))],
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    _atomic_write(out_dir / MANIFEST, (json.dumps(_jsonable(manifest), sort_keys=True, indent=2) + "\n").encode())
    return manifest


def run(cfg):
    """Execute a resolved config; returns RunResult (exit code, manifest, directory)."""
    started = time.perf_counter()
    out_dir = Path(cfg["output_dir"])
    rc = RunContext(cfg, ArtifactWriter(out_dir))
    try:
        RUNNERS[cfg["experiment"]](rc)
        if "runtime_s" in TOLERANCES[cfg["experiment"]]:
            rc.check_le("runtime_s", time.perf_counter() - started, "runtime_s")
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.error("numerical failure: %s", exc)
        m = _write_manifest(out_dir, cfg, rc, started, "numerical-failure", f"{type(exc).__name__}: {exc}")
        return RunResult(EXIT_NUMERICAL, m, out_dir)
    status = "ok" if all(c.passed for c in rc.checks) else "failed-checks"
    m = _write_manifest(out_dir, cfg, rc, started, status)
    return RunResult(EXIT_OK if status == "ok" else EXIT_CHECKS, m, out_dir)


def run_experiment(experiment, raw_config, seed=None, out=None):
    """Validate, resolve and run in-process (used by the CLI and the tests)."""
    return run(resolve_config(raw_config, experiment, seed, out))


# ---------------------------------------------------------------------------
# report


class IntegrityError(LabError):
    """A manifest is missing, unreadable, or does not match the files on disk."""


def read_manifest(run_dir, verify=True):
    path = Path(run_dir) / MANIFEST
    try:
        m = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise IntegrityError(f"missing manifest: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"corrupt manifest: {path} ({exc})") from exc
    if not isinstance(m, dict) or "checks" not in m or "artifacts" not in m:
        raise IntegrityError(f"corrupt manifest: {path} (missing checks/artifacts)")
    if verify:
        for a in m["artifacts"]:
            f = Path(run_dir) / a["file"]
            if not f.exists():
                raise IntegrityError(f"missing artifact: {f}")
            if sha256(f) != a["sha256"]:
                raise IntegrityError(f"checksum mismatch: {f}")
    return m


def _fit_slope(x, y):
    if len(x) < 2:
        return None
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def report(run_dirs, out=None):
    """Merge the check tables of completed runs; returns the summary dict."""
    rows, runs, zplus, bil = [], [], [], {}
    for d in run_dirs:
        m = read_manifest(d)
        exp = m.get("config", {}).get("experiment", "?")
        runs.append({"run": str(d), "experiment": exp, "status": m.get("status")})
        for c in m["checks"]:
            rows.append((str(d), exp, c["name"], bool(c["passed"]), c["value"], c["tolerance"]))
        if exp == "stability":
            for f in m["artifacts"]:
                name = f["file"]
                if name.startswith("summary_seed") and name.endswith(".json"):
                    s = json.loads((Path(d) / name).read_text())
                    zplus.append({"run": str(d), "seed": s["seed"], "z_plus": s["z_plus"],
                                  "converged": bool(s["tail_variation"] <= 1e-4 and s["increments_monotone"])})
        if exp == "bilinear":
            with open(Path(d) / "bilinear_table.csv") as f:
                for r in csv.DictReader(f):
                    bil.setdefault(int(r["N"]), []).append((float(r["M"]), float(r["mean_norm"])))
    slopes = {}
    for N, pts in bil.items():
        pts = sorted(pts)
        s = _fit_slope([p[0] for p in pts], [p[1] for p in pts])
        if s is not None:
            slopes[N] = s
    summary = {"runs": runs, "n_checks": len(rows), "n_failed": sum(1 for r in rows if not r[3]),
               "z_plus": zplus, "bilinear_slopes": slopes}
    if out is not None:
        w = ArtifactWriter(out)
        w.csv("summary", ("run", "experiment", "check", "passed", "value", "tolerance"),
              ([r[0], r[1], r[2], r[3], _cell(r[4]), _cell(r[5])] for r in rows))
        w.json("summary", summary)
    return summary


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, list):
        return " ".join(fmt(x) for x in v)
    return v


# ---------------------------------------------------------------------------
# entry point


def _parser():
    p = argparse.ArgumentParser(prog="nlslab", description="Small-soliton NLS numerical experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name, help=f"run the {name} experiment")
        s.add_argument("--config", required=True, help="JSON run config")
        s.add_argument("--seed", type=int, default=None, help="override randomization.seeds with one seed")
        s.add_argument("--out", default=None, help="output directory")
    r = sub.add_parser("report", help="aggregate completed runs")
    r.add_argument("runs", nargs="*", help="run directories")
    r.add_argument("--out", default=None, help="directory for summary.csv / summary.json")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_SCHEMA if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "report":
        try:
            summary = report(args.runs, args.out)
        except IntegrityError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(json.dumps(_jsonable(summary), sort_keys=True))
        return EXIT_OK
    try:
        cfg = resolve_config(load_config(args.config), args.command, args.seed, args.out)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        res = run(cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    failed = [c["name"] for c in res.manifest["checks"] if not c["passed"]]
    print(f"{cfg['experiment']}: {res.manifest['status']} ({len(res.manifest['checks'])} checks, "
          f"{len(failed)} failed) -> {res.directory}")
    for name in failed:
        print(f"  FAIL {name}")
    if res.manifest["error"]:
        print(f"error: {res.manifest['error']}", file=sys.stderr)
    return res.exit_code


def console():
    sys.exit(main())


if __name__ == "__main__":
    console()
