"""Configuration loading, experiment orchestration and artifact output.

A run reads one JSON document, fills defaults from the shipped schema,
builds the model and writes into ``<out>/<command>-<digest12>/``:

    config.json    canonical config echo (without the worker count)
    summary.json   sorted-key results and a pass/fail entry per statistical test
    *.csv          tables; every Monte Carlo number has a std-error column
    run.log        timestamps and the worker count, excluded from reproducibility

The digest is the SHA-256 of the canonical config without ``numerics.workers``,
so runs that differ only in worker count share a directory and payloads.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import math
import time
import traceback
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np

from . import adjoint, maxprin, optimize, paths
from .errors import (
    ConfigError,
    ConstraintViolation,
    DelayExceedsHorizon,
    DelayNotGridAligned,
    EmptyControlSet,
    ExcessiveRewardGrowth,
    GoodwillError,
    MissingRequired,
    ModelError,
    NonConvexCost,
    NonIncreasingTerminalReward,
    NonPositiveDelay,
    ParseError,
    RegressionQualityBelowFloor,
    TabulatedCostOffGrid,
    UnknownKey,
    WindowNotAligned,
    WindowOutOfRange,
)
from .model import (
    CONTROL_COSTS,
    ControlSet,
    ControlSignal,
    CostSpec,
    ModelParams,
    RUNNING_REWARDS,
    SpikeSpec,
    TERMINAL_REWARDS,
    TimeGrid,
    ValidatedModel,
    spike_window,
    validate_model,
)

COMMANDS = ("simulate", "adjoint", "check-mp", "expand", "optimize", "converge", "oracle")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_STATISTICAL = 0, 2, 3, 4

_FAMILY_PARAMS = {
    "quadratic_c": ("alpha", "beta"),
    "tabulated": ("table",),
    "linear": ("slope", "intercept"),
    "quadratic": ("slope", "curvature"),
    "exponential_capped": ("scale", "rate"),
    "saturating": ("scale", "rate"),
}

# model errors mapped to the config key responsible
_ERROR_KEYS = [
    (DelayNotGridAligned, "numerics.dt"),
    (NonPositiveDelay, "model.delay_d"),
    (DelayExceedsHorizon, "model.delay_d"),
    (EmptyControlSet, "control.U"),
    (TabulatedCostOffGrid, "cost.c.table"),
    (NonConvexCost, "cost.c"),
    (NonIncreasingTerminalReward, "cost.r"),
    (ExcessiveRewardGrowth, "cost.l"),
    (WindowOutOfRange, "spike"),
    (WindowNotAligned, "spike"),
]


def load_schema() -> dict:
    text = resources.files("goodwill").joinpath("data/config.schema.json").read_text("utf-8")
    return json.loads(text)


_SCHEMA = load_schema()


# ---------------------------------------------------------------------------
# Config


def _resolve(node: dict, root: dict) -> dict:
    ref = node.get("$ref")
    if ref:
        target = root
        for part in ref.lstrip("#/").split("/"):
            target = target[part]
        return {**target, **{k: v for k, v in node.items() if k != "$ref"}}
    return node


def _fill_defaults(doc, node: dict, root: dict):
    """Recursively insert schema defaults for absent object keys."""
    node = _resolve(node, root)
    if not isinstance(doc, dict) or "properties" not in node:
        return doc
    for key, sub in node["properties"].items():
        sub_r = _resolve(sub, root)
        if key not in doc and "default" in sub:
            doc[key] = copy.deepcopy(sub["default"])
        elif key not in doc and "default" in sub_r:
            doc[key] = copy.deepcopy(sub_r["default"])
        if key in doc:
            doc[key] = _fill_defaults(doc[key], sub, root)
    return doc


def _prune_unknown(doc, node: dict, root: dict, path: str, dropped: list):
    node = _resolve(node, root)
    if not isinstance(doc, dict) or "properties" not in node:
        return
    for key in list(doc):
        if key not in node["properties"]:
            dropped.append(f"{path}{key}")
            del doc[key]
        else:
            _prune_unknown(doc[key], node["properties"][key], root, f"{path}{key}.", dropped)


def _key_path(parts) -> str:
    return ".".join(str(p) for p in parts)


def _schema_error(err: jsonschema.ValidationError) -> ConfigError:
    base = list(err.absolute_path)
    if err.validator == "additionalProperties":
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        return UnknownKey("unknown key", _key_path(base + extra[:1]))
    if err.validator == "required":
        missing = sorted(k for k in err.validator_value if k not in err.instance)
        return MissingRequired("required key is missing", _key_path(base + missing[:1]))
    return ConstraintViolation(err.message, _key_path(base))


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
                      allow_nan=False)


@dataclass
class ExperimentConfig:
    """Validated config document with every default filled in."""

    data: dict

    @property
    def digest(self) -> str:
        material = copy.deepcopy(self.data)
        material["numerics"].pop("workers", None)
        return hashlib.sha256(_canonical(material).encode("utf-8")).hexdigest()

    @property
    def command(self) -> str:
        return self.data["command"]

    @property
    def numerics(self) -> dict:
        return self.data["numerics"]

    def to_json(self, include_workers: bool = True) -> str:
        data = copy.deepcopy(self.data)
        if not include_workers:
            data["numerics"].pop("workers", None)
        return json.dumps(data, sort_keys=True, indent=2, allow_nan=False) + "\n"

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``{"numerics.seed": 3}``."""
        data = copy.deepcopy(self.data)
        for dotted, value in overrides.items():
            node = data
            *head, last = dotted.split(".")
            for part in head:
                node = node[part]
            node[last] = value
        return load_config(json.dumps(data))

    # -- builders -----------------------------------------------------------

    def build_model(self) -> ValidatedModel:
        mdl = self.data["model"]
        hist = mdl["history"]
        params = ModelParams(
            a0=mdl["a0"], ad=mdl["ad"], b0=mdl["b0"], sigma1=mdl["sigma1"],
            sigma2=mdl["sigma2"], delay_d=mdl["delay_d"], horizon_T=mdl["horizon_T"],
            history=tuple(hist) if isinstance(hist, list) else hist,
        )
        cst = self.data["cost"]
        cost = CostSpec(
            c=_build_family(cst["c"], CONTROL_COSTS, "cost.c", control=True),
            l=_build_family(cst["l"], RUNNING_REWARDS, "cost.l"),
            r=_build_family(cst["r"], TERMINAL_REWARDS, "cost.r"),
            operating_interval=tuple(cst["operating_interval"]),
            growth_bound=cst["growth_bound"],
        )
        grid = TimeGrid.build(self.numerics["dt"], params.horizon_T, params.delay_d)
        return validate_model(params, ControlSet(self.data["control"]["U"]), cost, grid)

    def initial_control(self, model: ValidatedModel, B=None) -> ControlSignal:
        init = self.data["control"]["initial"]
        kind = init["kind"]
        if kind == "constant":
            u = ControlSignal.constant(model.grid, init["level"])
        elif kind == "coarse":
            if "levels" not in init:
                raise MissingRequired("coarse control needs levels", "control.initial.levels")
            u = ControlSignal.from_coarse(model.grid, init["levels"])
        else:
            u = optimize.worst_constant_control(model, B if B is not None else self.brownian(model))
        u.check_in(model.U)
        return u

    def spike(self) -> SpikeSpec:
        s = self.data["spike"]
        return SpikeSpec(t_start=s["t_start"], epsilon=s["epsilon"], v=s["v"])

    def brownian(self, model: ValidatedModel, stream: int = 0,
                 n_paths: Optional[int] = None) -> paths.BrownianBatch:
        num = self.numerics
        if num["noise"] == "tree":
            return paths.tree_brownian(model.grid, path_cap=num["enumeration_cap"])
        return paths.sample_brownian(model.grid, n_paths or num["n_paths"], num["seed"],
                                     workers=num["workers"], stream=stream)


def _build_family(block: dict, registry: dict, key: str, control: bool = False):
    fam = block["family"]
    if fam not in registry:
        raise ConstraintViolation(f"family {fam!r} is not allowed here", f"{key}.family")
    allowed = _FAMILY_PARAMS["quadratic_c" if control and fam == "quadratic" else fam]
    kwargs = {}
    for name, value in block.items():
        if name == "family":
            continue
        if name not in allowed:
            raise UnknownKey(f"not a parameter of family {fam!r}", f"{key}.{name}")
        kwargs[name] = value
    if fam == "tabulated":
        if "table" not in kwargs:
            raise MissingRequired("tabulated cost needs a table", f"{key}.table")
        return registry[fam]([tuple(row) for row in kwargs["table"]])
    return registry[fam](**kwargs)


def load_config(document: str, strict: bool = True) -> ExperimentConfig:
    """Parse, validate and default-fill a JSON config document.

    Raises ParseError, UnknownKey (strict mode; otherwise unknown keys are
    dropped with a warning), MissingRequired or ConstraintViolation. Every
    error carries the dotted ``key_path`` of the offending entry.
    """
    try:
        doc = json.loads(document)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ParseError("config must be a JSON object")
    if not strict:
        dropped: list = []
        _prune_unknown(doc, _SCHEMA, _SCHEMA, "", dropped)
        if dropped:
            warnings.warn(f"ignored unknown keys: {', '.join(dropped)}", stacklevel=2)
    validator = jsonschema.Draft202012Validator(_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.validator))
    if errors:
        raise _schema_error(errors[0])
    doc = _fill_defaults(doc, _SCHEMA, _SCHEMA)
    cfg = ExperimentConfig(doc)
    _semantic_checks(cfg)
    return cfg


def _semantic_checks(cfg: ExperimentConfig) -> None:
    try:
        model = cfg.build_model()
        init = cfg.data["control"]["initial"]
        if init["kind"] != "worst_constant":
            cfg.initial_control(model)
        lo, hi = cfg.data["cost"]["operating_interval"]
        if not lo < hi:
            raise ConstraintViolation("interval must satisfy lo < hi", "cost.operating_interval")
        if cfg.command in ("expand", "converge") or cfg.numerics["dump_paths"]:
            spike_window(cfg.spike(), model.grid)
        key = {"expand": "expand_epsilons", "converge": "converge_epsilons"}.get(cfg.command)
        if key:
            sp = cfg.spike()
            for j, eps in enumerate(cfg.data["experiments"][key]):
                try:
                    spike_window(SpikeSpec(sp.t_start, eps, sp.v), model.grid)
                except ModelError as exc:
                    raise ConstraintViolation(str(exc), f"experiments.{key}.{j}") from exc
    except ConfigError:
        raise
    except ModelError as exc:
        key = next((k for cls, k in _ERROR_KEYS if isinstance(exc, cls)), "model")
        if key == "model" and "control" in exc.hypothesis:
            key = "control.initial"
        elif key == "model" and exc.hypothesis in ("grid-aligned horizon", "positive time step"):
            key = "numerics.dt"
        raise ConstraintViolation(f"{exc} [{exc.hypothesis}]", key) from exc


# ---------------------------------------------------------------------------
# Output helpers


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_num(v) for v in row])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


@dataclass
class RunArtifacts:
    out_dir: Path
    files: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    exit_code: int = EXIT_OK


class _Run:
    """Collects tables, tests and results for one command."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.tables: dict = {}
        self.tests: dict = {}
        self.results: dict = {}
        self.flags: list = []

    def table(self, name, header, rows):
        self.tables[f"{name}.csv"] = csv_text(header, rows)

    def test(self, name, passed, **detail):
        self.tests[name] = {"passed": bool(passed), **detail}


# ---------------------------------------------------------------------------
# Commands


def _cmd_simulate(run: _Run, model: ValidatedModel):
    cfg = run.cfg
    B = cfg.brownian(model)
    u = cfg.initial_control(model, B)
    S = paths.simulate_state(model, u, B)
    exact = B.exact
    rows = []
    for j, t in enumerate(model.grid.extended_times):
        mean, se = paths.mc_stats(S.x[j], exact)
        rows.append((t, mean, se))
    run.table("state", ["t", "x_mean", "x_stderr"], rows)
    J = paths.estimate_cost(model, u, S)
    run.results.update(cost_mean=J.mean, cost_stderr=J.std_error, n_paths=B.n_paths,
                       x_T_mean=rows[-1][1], x_T_stderr=rows[-1][2])
    k = min(cfg.numerics["dump_paths"], B.n_paths)
    if k:
        V = paths.simulate_variations(model, u, cfg.spike(), B)
        dump = [(pid, t, S.x[j, pid], V.y[j, pid], V.z[j, pid])
                for pid in range(k) for j, t in enumerate(model.grid.extended_times)]
        run.table("paths", ["path_id", "t", "x", "y", "z"], dump)


def _adjoint_for(run: _Run, model, u, B):
    num = run.cfg.numerics
    S = paths.simulate_state(model, u, B)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RegressionQualityBelowFloor)
        A = adjoint.solve_first_adjoint(model, S, num["basis_degree"], driver=num["driver"],
                                        r2_floor=num["r2_floor"], ridge_weight=num["ridge_weight"])
    run.flags.extend(str(w.message) for w in caught)
    return S, A


def _p_probe_indices(cfg: ExperimentConfig, model: ValidatedModel) -> list:
    times = cfg.numerics["p_probe_times"]
    if times is None:
        return sorted({int(round(f * model.N)) for f in (0.0, 0.2, 0.4, 0.6, 0.8)})
    out = []
    for t in times:
        k = model.grid.index_of(t)
        if k is None or k >= model.N:
            raise ConstraintViolation(f"probe time {t} is not a grid node in [0, T)",
                                      "numerics.p_probe_times")
        out.append(k)
    return out


def _cmd_adjoint(run: _Run, model: ValidatedModel):
    cfg, num = run.cfg, run.cfg.numerics
    B = cfg.brownian(model)
    u = cfg.initial_control(model, B)
    S, A = _adjoint_for(run, model, u, B)
    exact = B.exact
    rows = []
    for i, t in enumerate(model.grid.times):
        pm, ps = paths.mc_stats(A.p[i], exact)
        if i < model.N:
            a, b = paths.mc_stats(A.q1[i], exact)
            c, d = paths.mc_stats(A.q2[i], exact)
        else:
            a = b = c = d = 0.0
        rows.append((t, pm, ps, a, b, c, d, A.diagnostics["r2"][min(i, model.N - 1)]))
    run.table("adjoint", ["t", "p_mean", "p_stderr", "q1_mean", "q1_stderr",
                          "q2_mean", "q2_stderr", "r2"], rows)

    p_rows = []
    for k in _p_probe_indices(cfg, model):
        est = adjoint.estimate_second_adjoint(
            model, S, k * model.dt, n_inner=num["n_inner"], method=num["p_method"],
            scheme=num["p_scheme"], seed=num["seed"], max_paths=num["max_paths"],
            workers=num["workers"], basis_degree=num["basis_degree"])
        p_rows.append((est.s, est.mean, est.std_error))
    run.table("second_adjoint", ["s", "P_mean", "P_stderr"], p_rows)

    if not exact:
        Bv = cfg.brownian(model, stream=1, n_paths=num["n_validation"])
        res = adjoint.bsde_residuals(model, A, paths.simulate_state(model, u, Bv))
        thr = num["sigma_threshold"]
        ok = res["z"] <= thr
        run.table("bsde_residuals", ["t", "residual_mean", "residual_stderr", "z_score"],
                  zip(model.grid.times[:-1], res["mean"], res["std_error"], res["z"]))
        frac = float(np.mean(ok))
        need = cfg.data["experiments"]["bsde_pass_fraction"]
        run.test("bsde_residual", frac >= need, fraction_within=frac, required=need,
                 threshold=thr)
    run.results.update(p0_mean=rows[0][1], p0_stderr=rows[0][2],
                       min_r2=float(np.min(A.diagnostics["r2"])),
                       intervals=A.diagnostics["intervals"])


def _cmd_check_mp(run: _Run, model: ValidatedModel):
    cfg, num = run.cfg, run.cfg.numerics
    B = cfg.brownian(model)
    u = cfg.initial_control(model, B)
    S, A = _adjoint_for(run, model, u, B)
    rep = maxprin.verify_max_principle(model, u, S, A, threshold=num["sigma_threshold"])
    bad = {(r[0], r[1]) for r in rep.violations}
    run.table("mp_gaps", ["t", "v", "gap_mean", "gap_stderr", "violation"],
              [(*r, (r[0], r[1]) in bad) for r in rep.rows])
    run.results.update(max_gap=rep.max_gap, violation_count=len(rep.violations),
                       checked_points=rep.checked_points, threshold=rep.threshold,
                       **rep.flags)
    run.test("mp_certificate", not rep.violations, violation_count=len(rep.violations))


def _ratio_decreasing(reports) -> bool:
    """|residual|/eps non-increasing as eps shrinks, within one pooled std error."""
    ordered = sorted(reports, key=lambda r: -r.epsilon)
    for big, small in zip(ordered, ordered[1:]):
        rb = abs(big.residual.mean) / big.epsilon
        rs = abs(small.residual.mean) / small.epsilon
        pooled = math.hypot(big.residual.std_error / big.epsilon,
                            small.residual.std_error / small.epsilon)
        if rs - rb > pooled:
            return False
    return True


def _cmd_expand(run: _Run, model: ValidatedModel):
    cfg, num = run.cfg, run.cfg.numerics
    B = cfg.brownian(model)
    u = cfg.initial_control(model, B)
    S, A = _adjoint_for(run, model, u, B)
    thr = num["sigma_threshold"]
    spike = cfg.spike()
    V = paths.simulate_variations(model, u, spike, B)
    drows = []
    for which in ("y", "z"):
        d = maxprin.check_duality_first(model, S, V, A, which)
        drows.append((d.relation, d.lhs_mean, d.lhs_stderr, d.rhs_mean, d.rhs_stderr, d.z_score))
        run.test(f"duality_{which}", d.z_score <= thr, z_score=d.z_score, threshold=thr)
    run.table("duality", ["relation", "lhs_mean", "lhs_stderr", "rhs_mean", "rhs_stderr",
                          "z_score"], drows)

    P = None
    if model.params.sigma2 and not model.cost.second_order_free:
        P = adjoint.second_adjoint_sweep(model, S)
    reports = []
    for eps in cfg.data["experiments"]["expand_epsilons"]:
        sp = SpikeSpec(spike.t_start, eps, spike.v)
        reports.append(maxprin.check_cost_expansion(model, u, sp, S, A, P, B))
    erows = []
    for r in reports:
        erows.append((r.epsilon, r.cost_diff.mean, r.cost_diff.std_error,
                      r.first_order_term.mean, r.first_order_term.std_error,
                      r.second_order_term.mean, r.second_order_term.std_error,
                      r.residual.mean, r.residual.std_error,
                      abs(r.residual.mean) / r.epsilon, r.residual.std_error / r.epsilon))
    run.table("expansion", ["epsilon", "cost_diff_mean", "cost_diff_stderr", "first_mean",
                            "first_stderr", "second_mean", "second_stderr", "residual_mean",
                            "residual_stderr", "residual_over_eps", "residual_over_eps_stderr"],
              erows)
    if len(reports) > 1:
        run.test("expansion_o_eps", _ratio_decreasing(reports))


def _tree_oracle_applies(cfg: ExperimentConfig, model: ValidatedModel) -> bool:
    n = model.N
    cap = cfg.numerics["enumeration_cap"]
    return cfg.numerics["noise"] == "tree" and n <= 6 and len(model.U) ** n * 4**n <= cap


def _cmd_optimize(run: _Run, model: ValidatedModel):
    cfg, num = run.cfg, run.cfg.numerics
    ex = cfg.data["experiments"]
    B = cfg.brownian(model)
    u0 = cfg.initial_control(model, B)
    res = optimize.spike_descent(model, u0, budget=ex["budget"], seed=num["seed"], B=B,
                                 threshold=num["sigma_threshold"], eps_init=ex["eps_init"],
                                 basis_degree=num["basis_degree"])
    run.table("descent_trace", ["iteration", "cost_mean", "cost_stderr", "spike_t", "spike_v",
                                "epsilon"], res.trace_rows)
    run.table("control", ["t", "u"], zip(model.grid.times[:-1], res.control.values))
    final = res.cost_trace[-1]
    run.results.update(stop_reason=res.stop_reason, iterations=len(res.trace_rows) - 1,
                       final_cost_mean=final.mean, final_cost_stderr=final.std_error)
    if _tree_oracle_applies(cfg, model):
        orc = optimize.tree_oracle(model, model.N, num["enumeration_cap"])
        gap = final.mean - orc.best_cost
        tol = max(2 * final.std_error, 1e-12)
        run.results.update(oracle_best_cost=orc.best_cost, oracle_best_control=list(orc.best_control))
        run.test("descent_vs_oracle", gap <= tol, cost_gap=gap, tolerance=tol)


def _cmd_converge(run: _Run, model: ValidatedModel):
    cfg, num = run.cfg, run.cfg.numerics
    u = cfg.initial_control(model)
    sp = cfg.spike()
    rep = optimize.convergence_study(model, u, sp.t_start, sp.v,
                                     cfg.data["experiments"]["converge_epsilons"],
                                     num["n_paths"], num["seed"], workers=num["workers"])
    srows, mrows = [], []
    for name in optimize.QUANTITIES:
        f = rep.quantities[name]
        srows.append((name, f.slope, f.slope_stderr, f.lower, f.upper, f.intercept,
                      f.identically_zero))
        mrows.extend((name, e, v, s) for e, v, s in zip(f.epsilons, f.values, f.stderrs))
    run.table("slopes", ["quantity", "slope", "slope_stderr", "lower", "upper", "intercept",
                         "identically_zero"], srows)
    run.table("moments", ["quantity", "epsilon", "mean", "stderr"], mrows)
    for name, ok in slope_checks(rep).items():
        f = rep.quantities[name]
        run.test(f"slope_{name}", ok, slope=f.slope, lower=f.lower, upper=f.upper)


def slope_checks(rep: "optimize.SlopeReport") -> dict:
    """Order contracts: y and z moments O(eps), remainders O(eps^2) and o(eps^2).

    Two-sided checks use the point estimate against the tolerance window;
    the last one is one-sided at the lower confidence bound.
    """
    q = rep.quantities
    return {
        "sup_y2": abs(q["sup_y2"].slope - 1.0) <= 0.2,
        "sup_z2": abs(q["sup_z2"].slope - 1.0) <= 0.2,
        "sup_rem1": abs(q["sup_rem1"].slope - 2.0) <= 0.3,
        "sup_rem2": q["sup_rem2"].lower > 2.0,
    }


def _cmd_oracle(run: _Run, model: ValidatedModel):
    cfg = run.cfg
    n = cfg.data["experiments"]["oracle_steps"]
    orc = optimize.tree_oracle(model, n, cfg.numerics["enumeration_cap"])
    run.table("oracle", ["control", "cost"],
              ((";".join(_num(v) for v in seq), c) for seq, c in orc.costs.items()))
    run.results.update(best_control=list(orc.best_control), best_cost=orc.best_cost,
                       enumerated=orc.enumerated, tree_spec=orc.tree_spec)


_COMMANDS = {
    "simulate": _cmd_simulate,
    "adjoint": _cmd_adjoint,
    "check-mp": _cmd_check_mp,
    "expand": _cmd_expand,
    "optimize": _cmd_optimize,
    "converge": _cmd_converge,
    "oracle": _cmd_oracle,
}


def _origin_module(exc: BaseException) -> str:
    mod = "goodwill"
    for frame, _ in traceback.walk_tb(exc.__traceback__):
        name = frame.f_globals.get("__name__", "")
        if name.startswith("goodwill."):
            mod = name
    return mod


def run_command(config: ExperimentConfig, command: Optional[str] = None,
                out_root: str | Path = "out") -> RunArtifacts:
    """Execute one pipeline and write its artifacts.

    Returns the artifacts with ``exit_code`` set to 0 (all tests pass), 3
    (numerical failure) or 4 (a statistical test failed). Config problems
    raise ConfigError before anything is written.
    """
    if command is not None and command != config.command:
        config = config.replace(command=command)
    command = config.command
    digest = config.digest
    out_dir = Path(out_root) / f"{command}-{digest[:12]}"
    out_dir.mkdir(parents=True, exist_ok=True)
    log = logging.getLogger(f"goodwill.run.{digest[:12]}")
    log.setLevel(logging.INFO)
    log.propagate = False
    handler = logging.FileHandler(out_dir / "run.log", mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    art = RunArtifacts(out_dir=out_dir)
    run = _Run(config)
    t0 = time.perf_counter()
    log.info("command=%s digest=%s workers=%d", command, digest, config.numerics["workers"])
    error = None
    try:
        try:
            model = config.build_model()
        except ModelError as exc:
            raise ConstraintViolation(str(exc), "model") from exc
        with np.errstate(over="raise", invalid="raise", divide="ignore"):
            _COMMANDS[command](run, model)
    except ConfigError:
        log.removeHandler(handler)
        handler.close()
        raise
    except (GoodwillError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        error = {"module": _origin_module(exc), "type": type(exc).__name__, "message": str(exc)}
        log.error("%s in %s: %s", error["type"], error["module"], error["message"])
    log.info("elapsed %.3fs", time.perf_counter() - t0)

    if error:
        art.exit_code = EXIT_NUMERICAL
        status = "numerical_failure"
    elif all(t["passed"] for t in run.tests.values()):
        status = "pass"
    else:
        art.exit_code = EXIT_STATISTICAL
        status = "statistical_failure"
    summary = {
        "command": command,
        "config_digest": digest,
        "status": status,
        "exit_code": art.exit_code,
        "results": run.results,
        "tests": run.tests,
        "flags": run.flags,
    }
    if error:
        summary["error"] = error
    art.summary = _jsonable(summary)
    files = {"config.json": config.to_json(include_workers=False),
             "summary.json": json.dumps(art.summary, sort_keys=True, indent=2,
                                        allow_nan=False) + "\n",
             **run.tables}
    for name, text in files.items():
        path = out_dir / name
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        art.files[name] = path
    art.files["run.log"] = out_dir / "run.log"
    log.info("wrote %s", ", ".join(sorted(files)))
    log.removeHandler(handler)
    handler.close()
    return art


BUNDLED_CONFIGS = ("reference", "deterministic", "tiny_tree", "tiny_optimal")


def bundled_config(name: str) -> str:
    """JSON text of a config shipped with the package (see BUNDLED_CONFIGS)."""
    if name not in BUNDLED_CONFIGS:
        raise KeyError(f"no bundled config {name!r}; choose from {BUNDLED_CONFIGS}")
    return resources.files("goodwill").joinpath(f"data/{name}.json").read_text("utf-8")
