"""Command-line interface: reproducible batch runs from JSON configs.

Commands: ``gen`` (expand block-design notation to CSV), ``simulate``
(draw outcomes), ``power`` (design statistics), ``fit`` (MCML or Laplace),
``design`` (combinatorial c-optimal search), ``apportion`` (weights to
integer designs). Config fields are documented in the README; command-line
flags override config entries. Exit codes: 0 success, 1 configuration
error, 2 numerical failure, 3 non-convergence (results still written).
"""

import argparse
import json
import os
import sys

import numpy as np
import scipy.io
import scipy.sparse as sps

from . import __version__
from .blocks import BlockFormulaError, nelder
from .covariance import NotPositiveDefiniteError
from .datatable import DataTable
from .families import FamilyError, get_family
from .formula import FormulaError, parse_formula
from .hmc import HmcOptions
from .kernels import KernelError
from .laplace import LaOptions, la_fit
from .mcml import EssError, McmlOptions, mcml_fit
from .model import Glmm, SingularInformationError
from .optdesign import DegenerateDesignError, DesignSpace, apportion
from .optim import OptimError

CONFIG_ERROR, NUMERICAL_ERROR, NO_CONVERGENCE = 1, 2, 3


class ConfigError(ValueError):
    pass


# numerical failures are matched before the broad config classes because
# several of them subclass ValueError
_NUMERICAL_ERRORS = (
    NotPositiveDefiniteError, SingularInformationError, DegenerateDesignError,
    OptimError, EssError, np.linalg.LinAlgError, FloatingPointError,
    RuntimeError,
)
_CONFIG_ERRORS = (
    ConfigError, BlockFormulaError, FormulaError, FamilyError, KernelError,
    FileNotFoundError, json.JSONDecodeError, KeyError, TypeError, ValueError,
)

_COMPARATORS = {
    ">": np.greater, ">=": np.greater_equal, "<": np.less,
    "<=": np.less_equal, "==": np.equal, "!=": np.not_equal,
}


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def load_table(config):
    """Data from a CSV path or block-design notation, plus derived
    indicator columns."""
    if config.get("data") and config.get("nelder"):
        raise ConfigError("give either 'data' (CSV path) or 'nelder', not both")
    if config.get("data"):
        table = DataTable.from_csv(config["data"])
    elif config.get("nelder"):
        table = nelder(config["nelder"])
    else:
        raise ConfigError("config needs 'data' (CSV path) or 'nelder'")
    for name, spec in (config.get("derive") or {}).items():
        try:
            left, op, right = spec
        except (TypeError, ValueError):
            raise ConfigError(
                f"derive entry {name!r} must be [column, op, column-or-number]"
            ) from None
        if op not in _COMPARATORS:
            raise ConfigError(f"unknown comparator {op!r} in derive {name!r}")
        lhs = np.asarray(table[left], dtype=float)
        rhs = (np.asarray(table[right], dtype=float)
               if isinstance(right, str) else float(right))
        table = table.with_column(name, _COMPARATORS[op](lhs, rhs).astype(np.int64))
    return table


def build_model(config, table=None):
    if "formula" not in config:
        raise ConfigError("config needs a 'formula'")
    table = load_table(config) if table is None else table
    family = get_family(config.get("family", "gaussian"), config.get("link"))
    formula = parse_formula(config["formula"])
    model = Glmm(
        formula, table, family,
        beta=config.get("beta"),
        theta=config.get("theta"),
        var_par=config.get("var_par", 1.0),
        offset=np.asarray(config["offset"], dtype=float) if config.get("offset") else None,
        attenuate=bool(config.get("attenuate", False)),
        effective_range=config.get("effective_range"),
        sparse=bool(config.get("sparse", True)),
    )
    return model, table


def _rng(config):
    seed = config.get("seed")
    if seed is None:
        raise ConfigError("a 'seed' is required for reproducible runs")
    return np.random.Generator(np.random.Philox(int(seed)))


def _outcome(model, table, config):
    name = config.get("outcome") or model.formula.outcome
    if name is None:
        raise ConfigError("name the outcome column in the formula or 'outcome'")
    if name not in table:
        raise ConfigError(f"outcome column {name!r} not in the data")
    return np.asarray(table[name], dtype=float)


def emit_matrices(model, prefix):
    scipy.io.mmwrite(f"{prefix}X.mtx", sps.csr_matrix(model.X))
    scipy.io.mmwrite(f"{prefix}Z.mtx", model.re.z)
    scipy.io.mmwrite(f"{prefix}D.mtx", model.re.build_d(model.theta))
    scipy.io.mmwrite(f"{prefix}sigma.mtx", sps.csr_matrix(model.sigma()))


# ---------------------------------------------------------------------------
# commands


def cmd_gen(config):
    if not config.get("nelder"):
        raise ConfigError("gen needs block-design notation via --nelder")
    table = load_table({k: v for k, v in config.items() if k != "data"})
    out = config.get("out")
    if out:
        table.to_csv(out)
        payload = {"rows": table.n, "columns": table.names, "written": out}
    else:
        payload = {"rows": table.n, "columns": table.names,
                   "csv": table.to_csv_text()}
    return 0, payload


def cmd_simulate(config):
    model, table = build_model(config)
    rng = _rng(config)
    mode = config.get("mode", "y")
    out = config.get("out")
    if mode == "y":
        y = model.sim_data(rng, mode="y")
        if out:
            DataTable({"y": y}).to_csv(out)
            return 0, {"n": int(y.size), "written": out}
        return 0, {"n": int(y.size), "y": y.tolist()}
    if mode == "data":
        sim = model.sim_data(rng, mode="data")
        if out:
            sim.to_csv(out)
            return 0, {"n": sim.n, "written": out}
        return 0, {"n": sim.n, "csv": sim.to_csv_text()}
    raise ConfigError(f"unknown simulate mode {mode!r}")


def cmd_power(config):
    model, _ = build_model(config)
    alpha = float(config.get("alpha", 0.05))
    rows = model.power(alpha=alpha)
    if config.get("format") == "csv":
        lines = ["parameter,value,se,power"]
        for r in rows:
            lines.append(
                f"{r['parameter']},{r['value']!r},{r['se']!r},{r['power']!r}"
            )
        return 0, {"alpha": alpha, "csv": "\n".join(lines) + "\n"}
    return 0, {"alpha": alpha, "table": rows}


def cmd_fit(config):
    model, table = build_model(config)
    y = _outcome(model, table, config)
    method = config.get("method", "mcnr")
    if method == "la":
        options = LaOptions(
            variant=config.get("la_variant", "scoring"),
            tol=float(config.get("tol", 0.01)),
        )
        result = la_fit(model, y=y, options=options)
    elif method in ("mcnr", "mcem"):
        options = McmlOptions(
            method=method,
            tol=float(config.get("tol", 0.01)),
            max_iter=int(config.get("max_iter", 100)),
            se_method=config.get("se_method", "information"),
            simlik=bool(config.get("simlik", False)),
            warm_start=config.get("warm_start"),
        )
        hmc = HmcOptions(
            warmup=int(config.get("warmup", 500)),
            adapt=int(config.get("adapt", 50)),
            samples=int(config.get("samples", 250)),
            max_leapfrog=int(config.get("max_leapfrog", 100)),
            target_accept=float(config.get("target_accept", 0.95)),
            int_time=float(config.get("int_time", 5.0)),
        )
        result = mcml_fit(model, y=y, options=options, hmc_options=hmc,
                          rng=_rng(config))
    else:
        raise ConfigError(f"unknown fit method {method!r}")
    payload = {
        "algorithm": result.algorithm,
        "estimates": {
            "beta": dict(zip(model.x_names, result.beta.tolist())),
            "theta": dict(zip(model.re.param_names, result.theta.tolist())),
            "var_par": result.var_par,
        },
        "se_beta": result.se_beta.tolist(),
        "se_theta": None if result.se_theta is None else result.se_theta.tolist(),
        "converged": result.converged,
        "n_iter": result.n_iter,
        "boundary": result.boundary,
        "accept_rate": result.accept_rate,
        "loglik": result.loglik,
        "trace": [
            {"iteration": row["iteration"], "delta": row["delta"]}
            for row in result.trace
        ],
    }
    if config.get("emit_re"):
        payload["re_samples"] = result.U.tolist()
    code = 0 if result.converged else NO_CONVERGENCE
    return code, payload


def cmd_design(config):
    models, c_vectors, weights = [], [], config.get("model_weights")
    specs = config.get("models") or [config]
    shared = load_table(config) if config.get("models") else None
    for spec in specs:
        merged = dict(config, **spec) if spec is not config else config
        model, table = build_model(merged, table=shared)
        models.append(model)
        c = merged.get("c_vector")
        if c is None:
            raise ConfigError("design needs a 'c_vector' per model")
        c_vectors.append(np.asarray(c, dtype=float))
    table = shared if shared is not None else table
    conditions = None
    if config.get("conditions"):
        col = config["conditions"]
        if col not in table:
            raise ConfigError(f"condition column {col!r} not in the data")
        conditions = np.asarray(table[col])
    space = DesignSpace(
        models, c_vectors, conditions=conditions, weights=weights,
        robust_kind=config.get("robust_kind", "weighted-mean"),
        rm_cols=config.get("rm_cols"),
    )
    algo = config.get("algo", [1])
    if isinstance(algo, str):
        algo = [int(a) for a in algo.split(",") if a]
    j_prime = config.get("m")
    if j_prime is None:
        raise ConfigError("design needs the target size 'm'")
    result = space.optimal(
        int(j_prime), algo=tuple(algo),
        restarts=int(config.get("restarts", 10)), rng=_rng(config),
    )
    payload = {
        "algorithm": result.algorithm,
        "conditions": [space.labels[k] for k in result.design],
        "rows": result.rows.tolist(),
        "objective": result.objective,
        "trace": result.trace,
    }
    if config.get("weights"):
        payload["apportion"] = _to_jsonable(
            apportion(np.asarray(config["weights"], dtype=float),
                      int(j_prime))
        )
    return 0, payload


def cmd_apportion(config):
    weights = config.get("weights")
    if weights is None:
        raise ConfigError("apportion needs 'weights'")
    m = config.get("m")
    if m is None:
        raise ConfigError("apportion needs the design size 'm'")
    out = apportion(np.asarray(weights, dtype=float), int(m))
    return 0, _to_jsonable(out)


_COMMANDS = {
    "gen": cmd_gen,
    "simulate": cmd_simulate,
    "power": cmd_power,
    "fit": cmd_fit,
    "design": cmd_design,
    "apportion": cmd_apportion,
}


# ---------------------------------------------------------------------------
# argument handling


def build_parser():
    parser = argparse.ArgumentParser(
        prog="glmmkit",
        description="GLMM design statistics, fitting, and optimal designs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output path (JSON, or CSV for gen)")
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int,
                       help="thread budget for engine reductions")
        p.add_argument("--emit-matrices", metavar="PREFIX",
                       help="dump X, Z, D, Sigma in Matrix Market format")
        p.add_argument("--formula")
        p.add_argument("--data", help="CSV data path")
        p.add_argument("--nelder", help="block-design notation")
        p.add_argument("--family")
        p.add_argument("--link")

    p = sub.add_parser("gen", help="expand block-design notation to CSV")
    common(p)

    p = sub.add_parser("simulate", help="simulate outcomes from the model")
    common(p)
    p.add_argument("--mode", choices=["y", "data"])

    p = sub.add_parser("power", help="information matrix and power table")
    common(p)
    p.add_argument("--alpha", type=float)
    p.add_argument("--format", choices=["json", "csv"])

    p = sub.add_parser("fit", help="fit the model")
    common(p)
    p.add_argument("--method", choices=["mcnr", "mcem", "la"])
    p.add_argument("--la-variant", choices=["scoring", "dfo"])
    p.add_argument("--tol", type=float)
    p.add_argument("--samples", type=int)
    p.add_argument("--warm-start", choices=["la"])
    p.add_argument("--emit-re", action="store_true", default=None)

    p = sub.add_parser("design", help="search for a c-optimal design")
    common(p)
    p.add_argument("--m", type=int, help="design size (conditions)")
    p.add_argument("--algo", help="e.g. '1' or '3,1'")
    p.add_argument("--restarts", type=int)
    p.add_argument("--c-vector", help="comma-separated target combination")
    p.add_argument("--conditions", help="condition column name")

    p = sub.add_parser("apportion", help="round weights to integer designs")
    common(p)
    p.add_argument("--weights", help="comma-separated simplex weights")
    p.add_argument("--m", type=int, help="total units")

    return parser


def merge_config(args):
    config = {}
    if args.config:
        with open(args.config) as fh:
            config = json.load(fh)
        if not isinstance(config, dict):
            raise ConfigError("the config file must hold a JSON object")
    overrides = {
        k: v for k, v in vars(args).items()
        if k not in ("command", "config") and v is not None
    }
    for key, value in overrides.items():
        name = key  # argparse already converts dashes to underscores
        if name in ("weights", "c_vector") and isinstance(value, str):
            value = [float(x) for x in value.split(",") if x]
        config[name] = value
    if config.get("threads") is None and os.environ.get("GLMMKIT_THREADS"):
        config["threads"] = int(os.environ["GLMMKIT_THREADS"])
    if config.get("threads") is not None and int(config["threads"]) < 1:
        raise ConfigError("threads must be at least 1")
    return config


def run(command, config):
    """Run one command; returns (exit_code, document)."""
    handler = _COMMANDS[command]
    code, payload = handler(config)
    doc = {
        "engine": {"name": "glmmkit", "version": __version__},
        "command": command,
        "config": _to_jsonable(config),
        "results": _to_jsonable(payload),
    }
    if config.get("emit_matrices") and command in (
        "simulate", "power", "fit",
    ):
        model, _ = build_model(config)
        emit_matrices(model, config["emit_matrices"])
    return code, doc


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = merge_config(args)
        code, doc = run(args.command, config)
    except _NUMERICAL_ERRORS as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return NUMERICAL_ERROR
    except _CONFIG_ERRORS as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return CONFIG_ERROR
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    out = config.get("out")
    # gen and simulate write their CSV artifact to --out; the JSON summary
    # then goes to stdout
    if out and args.command not in ("gen", "simulate"):
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return code


if __name__ == "__main__":
    sys.exit(main())
