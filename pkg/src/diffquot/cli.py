"""Command line runner: ``diffquot run <config.json> --out <dir>`` and ``diffquot list``.

Numerical modules are imported only after the thread cap is applied, so
``--threads`` and ``DIFFQUOT_THREADS`` reach the BLAS pools at start-up.
"""

from __future__ import annotations

import argparse
import ast
import json
import os
import sys
from importlib import resources
from pathlib import Path

BUILTIN_DIR = "builtins"

DEFAULT_PIPELINES = {
    "linear-exist": ["forward"],
    "linear-unique": ["characterization", "reconstruction", "stability"],
    "poly-scalar": ["characterization", "stability"],
    "borg": ["mfunction"],
    "calderon-ti": ["characterization", "stability"],
}

DEFAULT_FAMILIES = {
    "linear-exist": ("linear", {"slope": -1.0}),
    "linear-unique": ("linear", {"slope": 1.0}),
    "poly-scalar": ("quadratic", {"a1": 1.0, "a2": 1.0}),
}

DEFAULT_REGIMES = {"linear-exist": "existence", "linear-unique": "uniqueness", "poly-scalar": "uniqueness"}

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


# ---------------------------------------------------------------------------
# Expressions
# ---------------------------------------------------------------------------

_FUNCS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs", "tanh", "sinh", "cosh", "arctan", "maximum", "minimum",
          "where", "heaviside")
_NODES = (ast.Expression, ast.BinOp, ast.UnaryOp, ast.Call, ast.Name, ast.Load, ast.Constant, ast.Add, ast.Sub,
          ast.Mult, ast.Div, ast.Pow, ast.USub, ast.UAdd, ast.Mod, ast.Compare, ast.Lt, ast.LtE, ast.Gt, ast.GtE)


def compile_expression(text, var, where):
    """Vectorized function of ``var`` from an arithmetic expression over numpy functions.

    Only arithmetic, comparisons, numbers, ``pi``, ``e``, the variable and a
    fixed list of numpy functions are accepted.
    """
    import numpy as np

    try:
        tree = ast.parse(str(text), mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"{where}: cannot parse expression {text!r}: {exc.msg}") from None
    names = {var, "pi", "e", *_FUNCS}
    for node in ast.walk(tree):
        if not isinstance(node, _NODES):
            raise ConfigError(f"{where}: {type(node).__name__} is not allowed in expressions")
        if isinstance(node, ast.Name) and node.id not in names:
            raise ConfigError(f"{where}: unknown name {node.id!r} (variable is {var!r})")
        if isinstance(node, ast.Call) and not (isinstance(node.func, ast.Name) and node.func.id in _FUNCS):
            raise ConfigError(f"{where}: only numpy functions {', '.join(_FUNCS)} may be called")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ConfigError(f"{where}: only numeric constants are allowed")
    code = compile(tree, where, "eval")
    env = {name: getattr(np, name) for name in _FUNCS}
    env.update(pi=np.pi, e=np.e, __builtins__={})

    def f(s):
        s = np.asarray(s, dtype=float)
        return np.broadcast_to(np.asarray(eval(code, env, {var: s}), dtype=float), s.shape).astype(float)

    return f


def compile_fn(value, var, where):
    """A config ``fn`` entry: number, expression, or list of them (one per component)."""
    import numpy as np

    if isinstance(value, list):
        parts = [compile_fn(v, var, f"{where}[{k}]") for k, v in enumerate(value)]
        return lambda s: np.stack([p(s) for p in parts], axis=-1)
    if isinstance(value, (int, float)):
        c = float(value)
        return lambda s: np.full(np.shape(s), c)
    return compile_expression(value, var, where)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def load_schema():
    return json.loads(resources.files("diffquot").joinpath("config.schema.json").read_text())


def builtin_names():
    folder = resources.files("diffquot").joinpath(BUILTIN_DIR)
    return sorted(p.name[:-5] for p in folder.iterdir() if p.name.endswith(".json"))


def read_config(path_or_name):
    """Parse and schema-check a config file, or a built-in scenario given by name."""
    import jsonschema

    p = Path(path_or_name)
    if p.exists():
        text = p.read_text()
    elif str(path_or_name) in builtin_names():
        text = resources.files("diffquot").joinpath(BUILTIN_DIR, f"{path_or_name}.json").read_text()
    else:
        raise ConfigError(f"config {path_or_name!r} not found (built-ins: {', '.join(builtin_names())})")
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    validator = jsonschema.Draft202012Validator(load_schema())
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            loc = ".".join(str(k) for k in err.absolute_path) or "<root>"
            lines.append(f"{loc}: {err.message}")
        raise ConfigError("schema violation:\n  " + "\n  ".join(lines))
    return cfg


def _nodes(grids, default):
    import numpy as np

    spec = grids.get("x_nodes")
    if spec is None:
        return default
    if spec["lo"] >= spec["hi"]:
        raise ConfigError("grids.x_nodes: lo must be below hi")
    return np.geomspace(spec["lo"], spec["hi"], spec.get("n", 24))


def build_scenario(cfg, seed=None):
    """Turn a validated config dict into ``(ScenarioConfig or borg inputs, pipelines)``."""
    import numpy as np

    from . import polynomial, scenarios
    from .numerics import GridFunction, log_spaced_nodes

    sc = cfg["scenario"]
    variant = sc["variant"]
    const = sc["constants"]
    grids = cfg.get("grids", {})
    eps1, eps2 = float(const["eps1"]), float(const["eps2"])
    h_t = grids.get("h_t", eps1 / 64)
    nt = int(round(eps1 / h_t)) + 1
    wmax = min(eps2, sc.get("delta_cap", eps2))
    nw = int(round(wmax / grids.get("h_w", wmax / 64))) + 1
    if nt < 5 or nw < 5:
        raise ConfigError("grids: h_t and h_w must give at least 5 nodes")
    pipelines = sc.get("pipelines") or DEFAULT_PIPELINES.get(variant)
    if pipelines is None:
        raise ConfigError("scenario.pipelines: required for custom scenarios")
    seed = cfg.get("seed", 0) if seed is None else seed
    tolerances = dict(cfg.get("tolerances", {}))

    if variant == "borg":
        if "potential" not in sc:
            raise ConfigError("scenario.potential: required for the borg variant")
        q = compile_fn(sc["potential"], "t", "scenario.potential")
        xs = _nodes(grids, np.geomspace(1e-3, 0.1, 12))
        T_max = float(sc.get("T_max", 10 * xs.max()))
        n = int(round((eps1 + T_max) / h_t)) + 1
        qg = GridFunction.from_function(q, 0.0, eps1 + T_max, n)
        return {"variant": variant, "q": qg, "x_nodes": xs, "T_max": T_max, "tolerances": tolerances}, pipelines

    common = dict(
        eps0=float(const.get("eps0", 0.1)),
        r=float(const.get("r", 0.3)),
        gammas=tuple(const.get("gammas", [0.8])),
        nt=nt,
        nw=nw,
        seed=seed,
        tolerances=tolerances,
        delta_cap=sc.get("delta_cap"),
        delta_prime=sc.get("delta_prime"),
        blocks=sc.get("blocks", 1),
        bump=sc.get("bump", 5.0),
        width=sc.get("width"),
    )
    if "noise" in sc:
        common["noise"] = tuple(sc["noise"])
    if "x_nodes" in grids:
        common["x_nodes"] = _nodes(grids, None)

    if variant == "calderon-ti":
        if "metric" not in sc:
            raise ConfigError("scenario.metric: required for the calderon-ti variant")
        rows = sc["metric"]
        n = len(rows)
        if any(len(r) != n for r in rows):
            raise ConfigError("scenario.metric: must be a square matrix")
        entries = [[compile_fn(v, "t", f"scenario.metric[{i}][{j}]") for j, v in enumerate(r)] for i, r in enumerate(rows)]
        g = lambda t: np.array([[float(e(np.asarray(t))) for e in r] for r in entries])
        common.setdefault("x_nodes", log_spaced_nodes(1e-3, 0.3, 16))
        return scenarios.calderon_instance(g, n=n, eps1=eps1, eps2=eps2, **common), pipelines

    fam_name, fam_params = DEFAULT_FAMILIES.get(variant, (None, {}))
    if "family" in sc:
        fam_name, fam_params = sc["family"]["name"], sc["family"].get("params", {})
    if fam_name is None:
        raise ConfigError("scenario.family: required for custom scenarios")
    try:
        spec = polynomial.build_family(fam_name, eps1=eps1, eps2=eps2, **fam_params)
    except TypeError as exc:
        raise ConfigError(f"scenario.family.params: {exc}") from None
    regime = sc.get("regime", DEFAULT_REGIMES.get(variant))
    if regime is None:
        raise ConfigError("scenario.regime: required for custom scenarios")
    funcs = {}
    for key, var in (("trace", "t"), ("f_initial", "x"), ("f_end", "x"), ("density", "w"), ("density2", "w")):
        if key in sc:
            funcs[key] = compile_fn(sc[key], var, f"scenario.{key}")
    if "trace" not in funcs:
        raise ConfigError("scenario.trace: required")
    need = {"forward": "f_initial", "characterization": "f_end" if regime == "uniqueness" else "f_initial",
            "reconstruction": "f_end", "stability": "density"}
    for p in pipelines:
        key = need.get(p)
        if key and key not in funcs:
            raise ConfigError(f"scenario.{key}: required by the {p} pipeline")
    return scenarios.ScenarioConfig(variant=variant, spec=spec, regime=regime, **funcs, **common), pipelines


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def _delta_values(summary):
    keys = ("delta", "contraction_delta", "delta0", "delta_prime")
    return {k: summary[k] for k in keys if k in summary}


def run_config(path_or_name, out_dir, seed=None, svg=False, threads=None):
    """Run every pipeline of a config; returns the exit code (0 pass, 2 verdict failure)."""
    from . import scenarios

    cfg = read_config(path_or_name)
    scen, pipelines = build_scenario(cfg, seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for name in pipelines:
        if isinstance(scen, dict):
            if name != "mfunction":
                raise ConfigError(f"scenario.pipelines: {name} is not available for the borg variant")
            res = scenarios.run_borg(scen["q"], scen["x_nodes"], scen["T_max"],
                                     tol=float(scen["tolerances"].get("residual", 5e-4)))
        else:
            runner = {
                "forward": scenarios.run_forward_problem,
                "characterization": scenarios.run_characterization,
                "reconstruction": scenarios.run_reconstruction,
                "stability": scenarios.run_stability,
            }.get(name)
            if runner is None:
                raise ConfigError(f"scenario.pipelines: {name} needs the borg variant")
            res = runner(scen)
        res.write(out, svg=svg)
        results[name] = res
    verdicts = {f"{p}.{k}": v for p, r in results.items() for k, v in r.verdicts.items()}
    failed = any(v == "fail" for v in verdicts.values())
    summary = {
        "config": str(path_or_name),
        "variant": cfg["scenario"]["variant"],
        "seed": cfg.get("seed", 0) if seed is None else seed,
        "threads": threads,
        "pipelines": {p: r.summary for p, r in results.items()},
        "delta_values": {p: _delta_values(r.summary) for p, r in results.items()},
        "verdicts": verdicts,
        "status": "fail" if failed else "pass",
    }
    scenarios.write_summary(out / "summary.json", summary)
    return 2 if failed else 0


def list_scenarios():
    from .scenarios import BUILTINS

    lines = [f"{name:<15} {desc}" for name, desc in BUILTINS.items()]
    return "\n".join(lines) + "\n"


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("DIFFQUOT_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"DIFFQUOT_THREADS must be an integer, got {env!r}") from None
    return None


def main(argv=None):
    parser = argparse.ArgumentParser(prog="diffquot", description="Difference-quotient equation experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario config (path or built-in name)")
    run.add_argument("config")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--threads", type=int, help="cap on BLAS worker threads (default: DIFFQUOT_THREADS)")
    run.add_argument("--svg", action="store_true", help="also write log-residual plots")
    run.add_argument("--seed", type=int, help="override the config seed")
    sub.add_parser("list", help="list built-in scenarios")
    args = parser.parse_args(argv)

    if args.command == "list":
        sys.stdout.write(list_scenarios())
        return 0
    try:
        threads = _threads(args.threads)
        if threads is not None:
            if threads < 1:
                raise ConfigError("--threads must be at least 1")
            for var in THREAD_VARS:
                os.environ[var] = str(threads)
        code = run_config(args.config, args.out, seed=args.seed, svg=args.svg, threads=threads)
    except ConfigError as exc:
        print(f"diffquot: config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # solver failures end the run with a diagnostic, not a traceback
        print(f"diffquot: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
