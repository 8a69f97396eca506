"""
Command-line pipeline: ``simulate | train | estimate | calibrate | qini | oracle | report``.

Every command reads one JSON run configuration, writes its artifacts into the
output directory, and records a ``manifest.json`` with the resolved
configuration, its hash, the seed and the package version. A manifest is a
valid ``--config`` for the same command and reproduces the run.

Exit codes: 0 success, 1 validation error, 2 IO error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .calibration import (DEFAULT_LEVELS, CoverageCurve, cate_coverage_from_arms, fold_predictions,
                          search_temperature_folds)
from .evaluation import MetricError, qini_curve
from .inference import EstimationError, ate_from_arms, cate_from_arms, predict_arms
from .model import ModelConfig, ModelState
from .numerics import NumericError
from .oracle import (DiscreteDgpFamily, confounded_pair, consistency_experiment, identifiable_family,
                     kl_equivalence_check)
from .plots import qini_svg, reliability_svg
from .prior import derive_seed, prior_from_spec, read_observational_csv, read_truth_csv, write_dgp_csv
from .training import TrainConfig, TrainState, train

log = logging.getLogger("amortized_cate")

COMMANDS = ("simulate", "train", "estimate", "calibrate", "qini", "oracle", "report")
EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "output_dir": "out",
    "prior": {"family": "sinusoidal", "n_dgps": 1, "n_rows": 256, "name": "dgp"},
    "model": ModelConfig().to_dict(),
    "train": {k: v for k, v in dataclasses.asdict(TrainConfig()).items() if k != "seed"},
    "calibrate": {"k_folds": 5, "t_min": 0.25, "t_max": 8.0, "n_temperatures": 25, "n_samples": 2000},
    "evaluate": {"alpha": 0.05, "n_samples": 10000, "q_points": 100, "qini_form": "mean",
                 "oracle_n_grid": [100, 1000, 10000], "oracle_seeds": 20, "kl_n": 2, "kl_thetas": 10},
}

_PRIOR_KEYS = {"family", "omega_range", "degree", "max_covariates", "gamma", "xi", "n_dgps", "n_rows", "name"}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int
    output_dir: str
    prior: dict
    model: dict
    train: dict
    calibrate: dict
    evaluate: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        doc = {k: v for k, v in self.to_dict().items() if k != "output_dir"}
        return hashlib.sha256(canonical_json(doc).encode("utf-8")).hexdigest()

    def model_config(self, max_context: Optional[int] = None) -> ModelConfig:
        cfg = ModelConfig.from_dict(self.model)
        return dataclasses.replace(cfg, max_context=max_context) if max_context else cfg

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.train, seed=self.seed)

    def prior_callable(self):
        spec = {k: v for k, v in self.prior.items() if k not in ("n_dgps", "n_rows", "name")}
        return prior_from_spec(spec)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _merge(section: str, base: dict, override: dict, allowed: set) -> dict:
    if not isinstance(override, dict):
        raise ConfigError(f"config section '{section}' must be an object")
    unknown = sorted(set(override) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")
    out = copy.deepcopy(base)
    out.update(override)
    return out


def load_run_config(doc: dict, seed: Optional[int] = None, output_dir: Optional[str] = None) -> RunConfig:
    """Validate ``doc`` (a run config or a manifest) and fill defaults."""
    if "config" in doc and "config_hash" in doc:
        doc = doc["config"]
    unknown = sorted(set(doc) - set(_DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    sections = {}
    for name in ("prior", "model", "train", "calibrate", "evaluate"):
        allowed = _PRIOR_KEYS if name == "prior" else set(_DEFAULTS[name])
        sections[name] = _merge(name, _DEFAULTS[name], doc.get(name, {}), allowed)
    cfg = RunConfig(
        seed=int(doc.get("seed", _DEFAULTS["seed"]) if seed is None else seed),
        output_dir=str(doc.get("output_dir", _DEFAULTS["output_dir"]) if output_dir is None else output_dir),
        **sections,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    def wrap(section, fn):
        try:
            return fn()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}: {exc}") from exc

    wrap("prior", cfg.prior_callable)
    wrap("model", cfg.model_config)
    wrap("train", cfg.train_config)
    p, c, e = cfg.prior, cfg.calibrate, cfg.evaluate
    if not (isinstance(p["n_dgps"], int) and p["n_dgps"] >= 1):
        raise ConfigError("prior: n_dgps must be a positive integer")
    if not (isinstance(p["n_rows"], int) and p["n_rows"] >= 2):
        raise ConfigError("prior: n_rows must be an integer >= 2")
    if not (isinstance(c["k_folds"], int) and c["k_folds"] >= 2):
        raise ConfigError("calibrate: k_folds must be an integer >= 2")
    if not 0 < c["t_min"] <= c["t_max"]:
        raise ConfigError("calibrate: need 0 < t_min <= t_max")
    if not (isinstance(c["n_temperatures"], int) and c["n_temperatures"] >= 1):
        raise ConfigError("calibrate: n_temperatures must be a positive integer")
    for section, d in (("calibrate", c), ("evaluate", e)):
        if not (isinstance(d["n_samples"], int) and d["n_samples"] >= 10):
            raise ConfigError(f"{section}: n_samples must be an integer >= 10")
    if not 0 < e["alpha"] < 1:
        raise ConfigError("evaluate: alpha must lie in (0, 1)")
    if e["qini_form"] not in ("mean", "sum"):
        raise ConfigError("evaluate: qini_form must be 'mean' or 'sum'")
    if not (isinstance(e["q_points"], int) and e["q_points"] >= 2):
        raise ConfigError("evaluate: q_points must be an integer >= 2")
    if not all(isinstance(n, int) and n >= 1 for n in e["oracle_n_grid"]):
        raise ConfigError("evaluate: oracle_n_grid must hold positive integers")


def read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    if path == "smoke":
        return json.loads(resources.files("amortized_cate").joinpath("configs/smoke.json").read_text("utf-8"))
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: the config must be a JSON object")
    return doc


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _f(v) -> str:
    return repr(float(v))


def write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, args: dict, inputs: dict) -> None:
    write_json(out / "manifest.json", {
        "command": command,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
        "seed": cfg.seed,
        "version": __version__,
        "args": args,
        "inputs": {k: _file_digest(v) for k, v in sorted(inputs.items()) if v is not None},
    })


def _need(value, flag: str):
    if value is None:
        raise ConfigError(f"{flag} is required for this command")
    return value


def _load_state(path: str, max_context: Optional[int]) -> ModelState:
    state = ModelState.load(path)
    return state.with_max_context(max_context) if max_context else state


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _simulate_one(job):
    prior, seed, n_rows = job
    return prior(seed, n_rows)


def cmd_simulate(cfg: RunConfig, out: Path, ns) -> dict:
    prior = cfg.prior_callable()
    n, rows, name = cfg.prior["n_dgps"], cfg.prior["n_rows"], cfg.prior["name"]
    jobs = [(prior, derive_seed(cfg.seed, i), rows) for i in range(n)]
    if ns.workers > 1 and n > 1:
        with ProcessPoolExecutor(max_workers=ns.workers) as ex:
            instances = list(ex.map(_simulate_one, jobs))
    else:
        instances = [_simulate_one(j) for j in jobs]
    names = [name] if n == 1 else [f"{name}_{i:03d}" for i in range(n)]
    for nm, inst in zip(names, instances):
        write_dgp_csv(inst, out, nm)
    return {}


def cmd_train(cfg: RunConfig, out: Path, ns) -> dict:
    tcfg = cfg.train_config()
    mcfg = cfg.model_config(ns.max_context)
    if ns.checkpoint:
        state = TrainState.load(ns.checkpoint)
        if state.model.config != mcfg:
            raise ConfigError("checkpoint model config differs from the run config")
    else:
        state = TrainState.fresh(ModelState.init(mcfg, cfg.seed))
    state, _ = train(state, tcfg, cfg.prior_callable(), workers=ns.workers,
                     checkpoint_path=out / "train_state.json", trace_path=out / "trace.csv")
    state.model.save(out / "model.ckpt")
    return {"checkpoint": ns.checkpoint}


def cmd_estimate(cfg: RunConfig, out: Path, ns) -> dict:
    table = read_observational_csv(_need(ns.data, "--data"))
    state = _load_state(_need(ns.checkpoint, "--checkpoint"), ns.max_context)
    e = cfg.evaluate
    ppd0, ppd1 = predict_arms(state, table, table.x)
    cates = cate_from_arms(ppd0, ppd1, e["alpha"], e["n_samples"], cfg.seed)
    ate = ate_from_arms(ppd0, ppd1, e["alpha"], e["n_samples"], cfg.seed)
    write_csv(out / "cate.csv", ["row", "cate_point", "cate_lo", "cate_hi"],
              ([i, _f(c.point), _f(c.lo), _f(c.hi)] for i, c in enumerate(cates)))
    write_json(out / "ate.json", {"ate_point": ate.point, "ate_lo": ate.lo, "ate_hi": ate.hi,
                                  "alpha": ate.alpha, "n_samples": ate.n_samples, "theta_T": state.theta_T})
    return {"data": ns.data, "checkpoint": ns.checkpoint}


def cmd_calibrate(cfg: RunConfig, out: Path, ns) -> dict:
    table = read_observational_csv(_need(ns.data, "--data"))
    state = _load_state(_need(ns.checkpoint, "--checkpoint"), ns.max_context)
    c = cfg.calibrate
    grid = np.geomspace(c["t_min"], c["t_max"], c["n_temperatures"])
    folds, skipped = fold_predictions(state, table, c["k_folds"], c["n_samples"], cfg.seed)
    res = search_temperature_folds(folds, grid, DEFAULT_LEVELS, state.theta_T, skipped)
    hits_before = np.concatenate([f.coverage(DEFAULT_LEVELS, state.theta_T) for f in folds]).mean(axis=0)
    hits_after = np.concatenate([f.coverage(DEFAULT_LEVELS, res.theta_T) for f in folds]).mean(axis=0)
    doc = {"theta_T": res.theta_T, "ice_mu_before": res.ice_before, "ice_mu_after": res.ice_after,
           "skipped_folds": list(skipped)}
    header = ["level", "coverage_mu_before", "coverage_mu_after"]
    cols = [DEFAULT_LEVELS, hits_before, hits_after]
    curves = {"regression, before": CoverageCurve(DEFAULT_LEVELS, hits_before, "regression"),
              "regression, after": CoverageCurve(DEFAULT_LEVELS, hits_after, "regression")}
    if ns.truth:
        truth = read_truth_csv(ns.truth)
        tau = truth["mu1"] - truth["mu0"]
        if len(tau) != table.n:
            raise ConfigError("--truth and --data have different row counts")
        ppd0, ppd1 = predict_arms(state, table, table.x)
        cb = cate_coverage_from_arms(ppd0, ppd1, tau, DEFAULT_LEVELS, c["n_samples"], cfg.seed)
        ca = cate_coverage_from_arms(ppd0, ppd1, tau, DEFAULT_LEVELS, c["n_samples"], cfg.seed, res.theta_T)
        doc.update({"ice_tau_before": cb.ice, "ice_tau_after": ca.ice})
        header += ["coverage_tau_before", "coverage_tau_after"]
        cols += [cb.coverage, ca.coverage]
        curves.update({"CATE, before": cb, "CATE, after": ca})
    write_json(out / "calibration.json", doc)
    write_csv(out / "coverage.csv", header, ([_f(v) for v in row] for row in zip(*cols)))
    reliability_svg(out / "reliability.svg", curves)
    state.with_temperature(res.theta_T).save(out / "calibrated.ckpt")
    return {"data": ns.data, "checkpoint": ns.checkpoint, "truth": ns.truth}


def _read_predictions(path: str, n: int) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "cate_point" not in reader.fieldnames:
            raise ConfigError(f"{path}: missing required column 'cate_point'")
        vals = np.array([float(r["cate_point"]) for r in reader])
    if len(vals) != n:
        raise ConfigError(f"{path}: {len(vals)} predictions for {n} data rows")
    return vals


def cmd_qini(cfg: RunConfig, out: Path, ns) -> dict:
    table = read_observational_csv(_need(ns.data, "--data"))
    if ns.predictions:
        tau_hat = _read_predictions(ns.predictions, table.n)
    else:
        state = _load_state(_need(ns.checkpoint, "--checkpoint or --predictions"), ns.max_context)
        ppd0, ppd1 = predict_arms(state, table, table.x)
        tau_hat = np.array([c.point for c in cate_from_arms(ppd0, ppd1, n_samples=10, seed=cfg.seed)])
    e = cfg.evaluate
    q_grid = np.arange(1, e["q_points"] + 1) / e["q_points"]
    curve = qini_curve(table.y, table.t, tau_hat, q_grid, form=e["qini_form"])
    write_csv(out / "qini.csv", ["q", "Q", "lambda_q", "degenerate_flag"],
              ([_f(q), _f(Q), _f(lam), int(flag)]
               for q, Q, lam, flag in zip(curve.q_grid, curve.Q, curve.lambda_q, curve.degenerate)))
    write_json(out / "qini.json", {"qini_score": curve.qini_score, "lambda_full": curve.lambda_full})
    qini_svg(out / "qini.svg", curve)
    return {"data": ns.data, "predictions": ns.predictions, "checkpoint": ns.checkpoint}


def cmd_oracle(cfg: RunConfig, out: Path, ns) -> dict:
    e = cfg.evaluate
    if ns.counterexample:
        family: DiscreteDgpFamily = confounded_pair()
        truth = family.members[1]
    else:
        family = identifiable_family()
        truth = family.members[int(np.random.default_rng(cfg.seed).integers(len(family)))]
    res = consistency_experiment(family, truth, e["oracle_n_grid"], e["oracle_seeds"], cfg.seed)
    kl = kl_equivalence_check(family, e["kl_n"], e["kl_thetas"], cfg.seed)
    write_csv(out / "oracle.csv", ["n", "mean_abs_error", "posterior_sd"],
              ([int(n), _f(a), _f(s)] for n, a, s in zip(res.n_grid, res.mean_abs_error, res.mean_posterior_sd)))
    write_json(out / "oracle.json", {"consistent": res.consistent, "kl_equiv_max_dev": kl.max_dev})
    return {"counterexample": bool(ns.counterexample)}


def cmd_report(cfg: RunConfig, out: Path, ns) -> dict:
    """Collect every JSON summary under ``--data`` (a directory) into one report."""
    src = Path(_need(ns.data, "--data"))
    if not src.is_dir():
        raise FileNotFoundError(f"{src} is not a directory")
    found = {}
    for p in sorted(src.rglob("*.json")):
        if p.name in ("manifest.json", "report.json") or p.name.endswith(".config.json"):
            continue
        found[str(p.relative_to(src))] = json.loads(p.read_text(encoding="utf-8"))
    write_json(out / "report.json", found)
    lines = ["# run report", ""]
    for name, doc in found.items():
        lines.append(f"## {name}")
        if isinstance(doc, dict):
            lines += [f"- {k}: {v}" for k, v in sorted(doc.items()) if not isinstance(v, (dict, list))]
        lines.append("")
    (out / "report.md").write_text("\n".join(lines), encoding="utf-8")
    return {"data": ns.data}


_HANDLERS = {"simulate": cmd_simulate, "train": cmd_train, "estimate": cmd_estimate, "calibrate": cmd_calibrate,
             "qini": cmd_qini, "oracle": cmd_oracle, "report": cmd_report}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amortized-cate", description=__doc__.split("\n\n")[0].strip())
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="run config JSON, a manifest.json, or 'smoke' for the bundled config")
    parser.add_argument("--out", help="output directory (overrides output_dir)")
    parser.add_argument("--seed", type=int, help="global seed (overrides the config)")
    parser.add_argument("--workers", type=int, default=1, help="worker processes for simulation")
    parser.add_argument("--max-context", type=int, dest="max_context", help="override the model context window")
    parser.add_argument("--checkpoint", help="model checkpoint (train: resume from a training state)")
    parser.add_argument("--data", help="observational CSV (report: a results directory)")
    parser.add_argument("--truth", help="truth CSV for CATE coverage in calibrate")
    parser.add_argument("--predictions", help="cate.csv produced by estimate (qini)")
    parser.add_argument("--counterexample", action="store_true", help="oracle: use the confounded pair")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def _apply_manifest_args(ns, doc: dict) -> None:
    for k, v in (doc.get("args") or {}).items():
        if getattr(ns, k, None) in (None, False) and v is not None:
            setattr(ns, k, v)


def run(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out: Optional[Path] = None
    try:
        if ns.workers < 1:
            raise ConfigError("--workers must be at least 1")
        if ns.max_context is not None and ns.max_context < 2:
            raise ConfigError("--max-context must be at least 2")
        doc = read_config(ns.config)
        if "config_hash" in doc:
            _apply_manifest_args(ns, doc)
        cfg = load_run_config(doc, ns.seed, ns.out)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        args = _HANDLERS[ns.command](cfg, out, ns)
        args = {k: v for k, v in {**args, "max_context": ns.max_context}.items() if v not in (None, False)}
        inputs = {k: v for k, v in args.items() if k in ("data", "checkpoint", "truth", "predictions")
                  and Path(v).is_file()}
        write_manifest(out, ns.command, cfg, args, inputs)
        return EXIT_OK
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if out is not None:
            write_json(out / "diagnostics.json", {"command": ns.command, "error": str(exc),
                                                  "op": getattr(exc, "op", None),
                                                  "traceback": traceback.format_exc().splitlines()})
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, EstimationError, MetricError, ValueError, KeyError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
