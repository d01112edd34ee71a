"""Command line surface: subcommands, TOML configs, manifests, sweeps.

Every run directory gets a `manifest.json` recording the resolved config,
its sha256 hash, the seed, and the files written; a run is reproducible
from the manifest alone.  Numeric artifacts (checkpoints, trace CSVs) is
where reproducibility is checked bit for bit, so none of them embed
timestamps; wall-clock fields live in the trace columns themselves and in
the manifest, both documented as volatile.

Exit codes: 0 success, 2 usage errors (argparse), 3 invalid config,
4 missing input file, 5 numerical failure, 6 malformed data file.
Failures print one JSON line to stderr with `error`, `exit_code`, and
`message` fields.  The `MFLDIV_LOG` environment variable sets the log
level (DEBUG, INFO, WARNING, ERROR).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import baselines, bilevel, checkpoints, npiv_data, objectives, ope
from .errors import ConfigError, DataFormatError, NumericalFailure
from .features import ensemble_eval_batch
from .objectives import RegParams

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING_FILE = 4
EXIT_NUMERICAL = 5
EXIT_DATA_FORMAT = 6

# fixed seed for fresh evaluation draws, independent of any training seed
EVAL_SEED = 314159

log = logging.getLogger("mfldiv")

_NPIV_DATA_KEYS = {
    "structural", "m", "n",
    "instrument_range", "confounder_var", "first_stage_var", "outcome_var",
}
_OPE_DATA_KEYS = {"n_states", "slip", "discount", "n_tuples", "p_right"}

_SECTION_KEYS = {
    "run": {"kind", "seed"},
    "data": _NPIV_DATA_KEYS | _OPE_DATA_KEYS,
    "train": {
        "alpha", "beta", "gamma", "inner_steps", "outer_steps", "n_x", "n_z",
        "batch_size", "warm_start_inner", "clip_bound", "activation",
        "trace_eval_size",
    },
    "reg": {"zeta1", "zeta2", "sigma1", "sigma2", "lam"},
    "baseline": {"kind", "features", "width", "degree", "steps", "lr"},
}

_BASELINE_DEFAULTS = {
    "kind": "fixed2sls", "features": "random_tanh", "width": 64,
    "degree": 2, "steps": 200, "lr": 1e-3,
}


# ---------------------------------------------------------------------------
# Config files


def load_config(path) -> dict:
    p = Path(path)
    try:
        fh = open(p, "rb")
    except FileNotFoundError:
        raise FileNotFoundError(f"config file not found: {p}") from None
    with fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"unparseable TOML in {p}: {exc}") from None
    return raw


def resolve_config(raw: dict, seed_override=None, cold_start=False) -> dict:
    """Apply CLI overrides and defaults; the result is what gets hashed."""
    try:
        resolved = json.loads(json.dumps(raw))
    except TypeError as exc:
        raise ConfigError(
            f"config values must be numbers, strings, booleans, arrays, or tables: {exc}"
        ) from None
    run = resolved.setdefault("run", {})
    run.setdefault("kind", "npiv")
    run.setdefault("seed", 0)
    if seed_override is not None:
        run["seed"] = int(seed_override)
    if cold_start:
        resolved.setdefault("train", {})["warm_start_inner"] = False
    _validate_layout(resolved)
    return resolved


def _validate_layout(resolved: dict) -> None:
    for section, table in resolved.items():
        if section not in _SECTION_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(table, dict):
            raise ConfigError(f"config section [{section}] must be a table")
        for key in table:
            if key not in _SECTION_KEYS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
    kind = resolved["run"]["kind"]
    if kind not in ("npiv", "ope"):
        raise ConfigError(f"run.kind must be 'npiv' or 'ope', got {kind!r}")
    if not isinstance(resolved["run"]["seed"], int) or isinstance(resolved["run"]["seed"], bool):
        raise ConfigError(f"run.seed must be an integer, got {resolved['run']['seed']!r}")
    allowed = _NPIV_DATA_KEYS if kind == "npiv" else _OPE_DATA_KEYS
    for key in resolved.get("data", {}):
        if key not in allowed:
            raise ConfigError(f"config key data.{key} does not apply to run.kind {kind!r}")


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _cast_int(key, value):
    if isinstance(value, bool):
        raise ConfigError(f"bad config value {key}={value!r}: expected an integer")
    try:
        as_int = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad config value {key}={value!r}: expected an integer") from None
    if float(value) != as_int:
        raise ConfigError(f"bad config value {key}={value!r}: expected an integer")
    return as_int


def _cast_float(key, value):
    if isinstance(value, bool):
        raise ConfigError(f"bad config value {key}={value!r}: expected a number")
    try:
        return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad config value {key}={value!r}: expected a number") from None


_TRAIN_CASTS = {
    "alpha": _cast_float, "beta": _cast_float, "gamma": _cast_float,
    "clip_bound": _cast_float,
    "inner_steps": _cast_int, "outer_steps": _cast_int, "n_x": _cast_int,
    "n_z": _cast_int, "batch_size": _cast_int, "trace_eval_size": _cast_int,
}


def build_train_config(resolved: dict) -> bilevel.TrainConfig:
    reg_kwargs = {}
    for key, value in resolved.get("reg", {}).items():
        reg_kwargs[key] = _cast_float(f"reg.{key}", value)
    reg = RegParams(**reg_kwargs)
    kwargs = {}
    for key, value in resolved.get("train", {}).items():
        if key == "warm_start_inner":
            if not isinstance(value, bool):
                raise ConfigError(f"bad config value train.{key}={value!r}: expected true/false")
            kwargs[key] = value
        elif key == "activation":
            kwargs[key] = str(value)
        else:
            kwargs[key] = _TRAIN_CASTS[key](f"train.{key}", value)
    return bilevel.TrainConfig(reg=reg, seed=resolved["run"]["seed"], **kwargs)


def npiv_setup_from(resolved: dict):
    d = resolved.get("data", {})
    spec = npiv_data.StructuralSpec(
        h_name=str(d.get("structural", "abs")),
        instrument_range=_cast_float("data.instrument_range", d.get("instrument_range", 3.0)),
        confounder_var=_cast_float("data.confounder_var", d.get("confounder_var", 0.25)),
        first_stage_var=_cast_float("data.first_stage_var", d.get("first_stage_var", 0.25)),
        outcome_var=_cast_float("data.outcome_var", d.get("outcome_var", 0.01)),
    )
    m = _cast_int("data.m", d.get("m", 2000))
    n = _cast_int("data.n", d.get("n", 2000))
    return spec, m, n


def ope_setup_from(resolved: dict):
    d = resolved.get("data", {})
    mdp = ope.chain_mdp(
        n_states=_cast_int("data.n_states", d.get("n_states", 5)),
        slip=_cast_float("data.slip", d.get("slip", 0.0)),
        discount=_cast_float("data.discount", d.get("discount", 0.9)),
    )
    p_right = _cast_float("data.p_right", d.get("p_right", 0.9))
    n_tuples = _cast_int("data.n_tuples", d.get("n_tuples", 10000))
    return mdp, p_right, n_tuples


def baseline_params(resolved: dict) -> dict:
    params = dict(_BASELINE_DEFAULTS)
    params.update(resolved.get("baseline", {}))
    if params["kind"] not in ("fixed2sls", "dfiv"):
        raise ConfigError(f"baseline.kind must be 'fixed2sls' or 'dfiv', got {params['kind']!r}")
    if params["features"] not in baselines.FEATURE_KINDS:
        raise ConfigError(
            f"baseline.features must be one of {baselines.FEATURE_KINDS}, got {params['features']!r}"
        )
    params["width"] = _cast_int("baseline.width", params["width"])
    params["degree"] = _cast_int("baseline.degree", params["degree"])
    params["steps"] = _cast_int("baseline.steps", params["steps"])
    params["lr"] = _cast_float("baseline.lr", params["lr"])
    if params["width"] < 1:
        raise ConfigError(f"baseline.width must be >= 1, got {params['width']}")
    if params["steps"] < 0:
        raise ConfigError(f"baseline.steps must be >= 0, got {params['steps']}")
    return params


# ---------------------------------------------------------------------------
# Manifests


@dataclass
class RunManifest:
    """Provenance record for one run directory."""

    command: str
    config_path: str
    config_hash: str
    config: dict
    out_dir: str
    seed: int
    git_describe: str
    created: str
    completed: str | None = None
    artifacts: list = field(default_factory=list)

    def add(self, name: str, path) -> None:
        self.artifacts.append(
            {"name": name, "file": os.path.basename(str(path)), "config_hash": self.config_hash}
        )

    def save(self, path) -> None:
        self.completed = _utc_now()
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def git_describe_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=10,
        )
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    text = out.stdout.strip()
    return text if out.returncode == 0 and text else "unknown"


def new_manifest(command, config_path, resolved, out_dir) -> RunManifest:
    return RunManifest(
        command=command,
        config_path=str(config_path),
        config_hash=config_hash(resolved),
        config=resolved,
        out_dir=str(out_dir),
        seed=int(resolved.get("run", {}).get("seed", 0)),
        git_describe=git_describe_string(),
        created=_utc_now(),
    )


# ---------------------------------------------------------------------------
# Shared helpers


def _setup_logging() -> None:
    name = os.environ.get("MFLDIV_LOG", "WARNING").upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ConfigError(f"MFLDIV_LOG must be a logging level name, got {name!r}")
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _require(args, name: str):
    value = getattr(args, name)
    if value is None:
        raise ConfigError(f"--{name.replace('_', '-')} is required for this command")
    return value


def _out_dir(args) -> Path:
    out = Path(_require(args, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _spec_from_meta(meta) -> npiv_data.StructuralSpec | None:
    spec_dict = meta.get("spec") if isinstance(meta, dict) else None
    if not isinstance(spec_dict, dict):
        return None
    try:
        return npiv_data.StructuralSpec(**spec_dict)
    except (TypeError, ConfigError):
        return None


def structural_metrics(predict_rows, spec: npiv_data.StructuralSpec) -> dict:
    """Risk of a treatment->outcome predictor against the known truth.

    `predict_rows` maps a (rows, 1) treatment array to (rows,) values.
    Projected risk smooths both sides through the conditional-expectation
    quadrature; treatment_mse is a plain Monte Carlo risk under the
    treatment marginal, drawn fresh with a fixed evaluation seed.
    """
    grid = npiv_data.instrument_grid(spec)
    projected = bilevel.projected_risk(
        lambda a: predict_rows(np.asarray(a, dtype=np.float64).reshape(-1, 1)), spec, grid
    )
    sample = npiv_data.generate_npiv(spec, 20000, 1, seed=EVAL_SEED)
    a_rows = sample.stage1_a
    truth = spec.h(a_rows[:, 0])
    mse = float(np.mean((np.asarray(predict_rows(a_rows)) - truth) ** 2))
    return {"projected_risk": float(projected), "treatment_mse": mse}


def write_predictions_csv(path, predict_rows, spec) -> None:
    """Plot data: structural estimate vs truth on a treatment grid."""
    half = 1.5 * spec.instrument_range
    a_grid = np.linspace(-half, half, 201)
    est = np.asarray(predict_rows(a_grid.reshape(-1, 1)))
    truth = spec.h(a_grid)
    rows = [
        (repr(float(a)), repr(float(e)), repr(float(t)))
        for a, e, t in zip(a_grid, est, truth)
    ]
    _write_csv(path, ("a", "estimate", "truth"), rows)


def write_loss_trace_csv(path, loss_trace, value_trace=None) -> None:
    if value_trace:
        header = ("step", "loss", "value_estimate")
        rows = [
            (str(i), repr(float(l)), repr(float(v)))
            for i, (l, v) in enumerate(zip(loss_trace, value_trace))
        ]
    else:
        header = ("step", "loss")
        rows = [(str(i), repr(float(l))) for i, l in enumerate(loss_trace)]
    _write_csv(path, header, rows)


def _feature_map(kind: str, input_dim: int, width: int, degree: int, seed: int):
    if kind == "identity":
        return baselines.identity_features(input_dim)
    if kind == "polynomial":
        return baselines.polynomial_features(input_dim, degree)
    return baselines.random_tanh_features(input_dim, width, seed)


def _load_npiv_config(args):
    resolved = resolve_config(load_config(_require(args, "config")), args.seed, args.cold_start)
    if resolved["run"]["kind"] != "npiv":
        raise ConfigError("this command needs run.kind = 'npiv'; use the ope subcommand instead")
    return resolved


def _load_ope_config(args):
    resolved = resolve_config(load_config(_require(args, "config")), args.seed, args.cold_start)
    if resolved["run"]["kind"] != "ope":
        raise ConfigError("this command needs run.kind = 'ope'")
    return resolved


def _ope_dataset(args, resolved, mdp):
    """Load tuples from --data, or roll them out from the config."""
    if args.data is not None:
        ds = ope.load_ope_dataset(args.data)
    else:
        _, p_right, n_tuples = ope_setup_from(resolved)
        ds = ope.build_ope_dataset(
            mdp,
            ope.uniform_policy(mdp),
            ope.right_biased_policy(mdp, p_right),
            n_tuples,
            seed=resolved["run"]["seed"],
        )
    return ds


def _oracle_value(mdp, policy) -> float:
    return ope.policy_value(ope.exact_q(mdp, policy), mdp, policy)


def _rel_err(estimate: float, truth: float) -> float:
    return abs(estimate - truth) / max(abs(truth), 1e-12)


def _tail_mean(values, fraction=0.2) -> float:
    """Average over the final stretch of a trace; the reported point estimate.

    The value trace keeps fluctuating at stationarity (Langevin noise plus
    minibatch noise), so the last iterate alone is a needlessly noisy
    estimator.  Averaging the tail is the usual fix and keeps determinism.
    """
    tail = values[int(round(len(values) * (1 - fraction))):]
    if not tail:
        tail = values[-1:]
    return float(np.mean(np.asarray(tail, dtype=np.float64)))


def _tail_std(values, fraction=0.2) -> float:
    tail = values[int(round(len(values) * (1 - fraction))):]
    if len(tail) < 2:
        return 0.0
    return float(np.std(np.asarray(tail, dtype=np.float64)))


# ---------------------------------------------------------------------------
# Subcommands


def cmd_generate(args) -> int:
    resolved = resolve_config(load_config(_require(args, "config")), args.seed, args.cold_start)
    kind = resolved["run"]["kind"]
    seed = resolved["run"]["seed"]
    if kind == "npiv":
        spec, m, n = npiv_setup_from(resolved)
    else:
        mdp, p_right, n_tuples = ope_setup_from(resolved)
    if args.dry_run:
        log.info("generate dry run ok (kind=%s)", kind)
        _emit({"command": "generate", "dry_run": True, "kind": kind,
               "config_hash": config_hash(resolved)})
        return EXIT_OK
    out = _out_dir(args)
    manifest = new_manifest("generate", args.config, resolved, out)
    if kind == "npiv":
        ds = npiv_data.generate_npiv(spec, m, n, seed)
        npiv_data.save_dataset(out / "dataset.csv", ds)
        manifest.add("dataset", out / "dataset.csv")
        summary = {"m": m, "n": n, "structural": spec.h_name}
    else:
        behavior = ope.uniform_policy(mdp)
        target = ope.right_biased_policy(mdp, p_right)
        ds = ope.build_ope_dataset(mdp, behavior, target, n_tuples, seed)
        ope.save_mdp(out / "mdp.json", mdp)
        manifest.add("mdp", out / "mdp.json")
        ope.save_ope_dataset(out / "tuples.csv", ds)
        manifest.add("tuples", out / "tuples.csv")
        q = ope.exact_q(mdp, target)
        ope.save_q_table(out / "q_exact.ckpt", q, mdp, target)
        manifest.add("q_exact", out / "q_exact.ckpt")
        summary = {"n_tuples": n_tuples, "n_states": mdp.n_states,
                   "oracle_value": _oracle_value(mdp, target)}
    manifest.save(out / "manifest.json")
    log.info("generate wrote %s", out)
    _emit({"command": "generate", "kind": kind, "out": str(out),
           "config_hash": manifest.config_hash, **summary})
    return EXIT_OK


def cmd_train(args) -> int:
    resolved = _load_npiv_config(args)
    cfg = build_train_config(resolved)
    if args.dry_run:
        log.info("train dry run ok")
        _emit({"command": "train", "dry_run": True, "config_ok": True,
               "config_hash": config_hash(resolved)})
        return EXIT_OK
    ds = npiv_data.load_dataset(_require(args, "data"))
    out = _out_dir(args)
    manifest = new_manifest("train", args.config, resolved, out)
    model = bilevel.train(cfg, ds)
    bilevel.save_model(out / "model.ckpt", model)
    manifest.add("model", out / "model.ckpt")
    bilevel.save_trace(out / "trace.csv", model.trace)
    manifest.add("trace", out / "trace.csv")
    last = model.trace[-1]
    metrics = {
        "config_hash": manifest.config_hash,
        "outer_steps": cfg.outer_steps,
        "f1": last.f1, "f2": last.f2, "gap": last.gap,
        "lagrangian": last.lagrangian, "mean_norm_x": last.mean_norm_x,
    }
    spec = _spec_from_meta(ds.meta)
    if spec is not None:
        predict_rows = lambda rows: bilevel.predict_batch(model, rows)
        metrics.update(structural_metrics(predict_rows, spec))
        write_predictions_csv(out / "predictions.csv", predict_rows, spec)
        manifest.add("predictions", out / "predictions.csv")
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
    manifest.add("metrics", out / "metrics.json")
    manifest.save(out / "manifest.json")
    log.info("train wrote %s", out)
    _emit({"command": "train", "out": str(out), **metrics})
    return EXIT_OK


def cmd_baseline(args) -> int:
    resolved = resolve_config(load_config(_require(args, "config")), args.seed, args.cold_start)
    kind = resolved["run"]["kind"]
    params = baseline_params(resolved)
    reg_kwargs = {k: _cast_float(f"reg.{k}", v) for k, v in resolved.get("reg", {}).items()}
    reg = RegParams(**reg_kwargs)
    seed = resolved["run"]["seed"]
    if kind == "ope" and params["kind"] != "dfiv":
        raise ConfigError(
            "run.kind 'ope' supports only baseline.kind = 'dfiv' (the Bellman "
            "stage-II head needs learned or frozen network features)"
        )
    if args.dry_run:
        log.info("baseline dry run ok (%s)", params["kind"])
        _emit({"command": "baseline", "dry_run": True, "kind": params["kind"],
               "config_hash": config_hash(resolved)})
        return EXIT_OK
    out = _out_dir(args)
    manifest = new_manifest("baseline", args.config, resolved, out)
    metrics = {"config_hash": manifest.config_hash, "baseline": params["kind"]}
    if kind == "npiv":
        ds = npiv_data.load_dataset(_require(args, "data"))
        spec = _spec_from_meta(ds.meta)
        if params["kind"] == "fixed2sls":
            psi = _feature_map(params["features"], ds.d_a, params["width"], params["degree"], seed)
            phi = _feature_map(params["features"], ds.d_w, params["width"], params["degree"], seed + 1)
            sol = baselines.fixed_2sls(psi, phi, ds, reg.zeta1, reg.zeta2)
            baselines.save_fixed_2sls(out / "fixed2sls.ckpt", sol)
            manifest.add("model", out / "fixed2sls.ckpt")
            resid = sol.stage1_fit(ds.stage2_w) @ sol.u - ds.stage2_y
            metrics["stage2_loss"] = 0.5 * float(np.mean(resid * resid))
            predict_rows = sol.predict
        else:
            model = baselines.dfiv_train(
                None, None, ds, reg.zeta1, reg.zeta2,
                steps=params["steps"], lr=params["lr"], seed=seed, width=params["width"],
            )
            baselines.save_dfiv(out / "dfiv.ckpt", model)
            manifest.add("model", out / "dfiv.ckpt")
            write_loss_trace_csv(out / "baseline_trace.csv", model.loss_trace)
            manifest.add("trace", out / "baseline_trace.csv")
            metrics["stage2_loss"] = float(model.loss_trace[-1])
            predict_rows = model.predict
        if spec is not None:
            metrics.update(structural_metrics(predict_rows, spec))
            write_predictions_csv(out / "predictions.csv", predict_rows, spec)
            manifest.add("predictions", out / "predictions.csv")
    else:
        mdp = ope.load_mdp(args.mdp) if args.mdp else None
        ds = _ope_dataset(args, resolved, mdp) if mdp is not None else ope.load_ope_dataset(
            _require(args, "data")
        )
        discount = mdp.discount if mdp is not None else ope_setup_from(resolved)[0].discount
        model = ope.dfiv_q_train(
            None, None, ds, discount, reg.zeta1, reg.zeta2,
            steps=params["steps"], lr=params["lr"], seed=seed, width=params["width"],
            mdp=mdp,
        )
        ope.save_bellman_dfiv(out / "dfiv_q.ckpt", model)
        manifest.add("model", out / "dfiv_q.ckpt")
        write_loss_trace_csv(out / "baseline_trace.csv", model.loss_trace, model.value_trace)
        manifest.add("trace", out / "baseline_trace.csv")
        metrics["stage2_loss"] = float(model.loss_trace[-1])
        if mdp is not None:
            estimate = _tail_mean(model.value_trace)
            oracle = _oracle_value(mdp, ds.target_policy)
            metrics.update({
                "value_estimate": estimate,
                "value_final": float(model.value_trace[-1]),
                "oracle_value": oracle,
                "rel_err": _rel_err(estimate, oracle),
                "tail_std": _tail_std(model.value_trace),
            })
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
    manifest.add("metrics", out / "metrics.json")
    manifest.save(out / "manifest.json")
    log.info("baseline wrote %s", out)
    _emit({"command": "baseline", "out": str(out), **metrics})
    return EXIT_OK


def cmd_ope(args) -> int:
    resolved = _load_ope_config(args)
    cfg = build_train_config(resolved)
    if args.dry_run:
        if args.mdp is not None:
            ope.load_mdp(args.mdp)
        log.info("ope dry run ok")
        _emit({"command": "ope", "dry_run": True, "config_ok": True,
               "config_hash": config_hash(resolved)})
        return EXIT_OK
    mdp = ope.load_mdp(_require(args, "mdp"))
    ds = _ope_dataset(args, resolved, mdp)
    out = _out_dir(args)
    manifest = new_manifest("ope", args.config, resolved, out)
    model = ope.train_q(cfg, ds, mdp.discount, mdp=mdp)
    ope.save_q_model(out / "model.ckpt", model)
    manifest.add("model", out / "model.ckpt")
    bilevel.save_trace(out / "trace.csv", model.trace)
    manifest.add("trace", out / "trace.csv")
    values = [r.value_estimate for r in model.trace]
    estimate = _tail_mean(values)
    oracle = _oracle_value(mdp, ds.target_policy)
    last = model.trace[-1]
    metrics = {
        "config_hash": manifest.config_hash,
        "value_estimate": estimate,
        "value_final": values[-1],
        "oracle_value": oracle,
        "rel_err": _rel_err(estimate, oracle),
        "tail_std": _tail_std(values),
        "f2": last.f2, "gap": last.gap,
    }
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
    manifest.add("metrics", out / "metrics.json")
    manifest.save(out / "manifest.json")
    log.info("ope wrote %s", out)
    _emit({"command": "ope", "out": str(out), **metrics})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    """Metrics for an existing checkpoint; reads the config stored inside it."""
    path = _require(args, "checkpoint")
    kind, stored_config, _ = checkpoints.load_container(path)
    if args.dry_run:
        _emit({"command": "evaluate", "dry_run": True, "kind": kind})
        return EXIT_OK
    metrics = {"kind": kind, "checkpoint": os.path.basename(str(path)),
               "config_hash": config_hash(stored_config)}
    ds = npiv_data.load_dataset(args.data) if (
        args.data and kind in (baselines.CHECKPOINT_KIND_2SLS,
                               baselines.CHECKPOINT_KIND_DFIV,
                               bilevel.CHECKPOINT_KIND)
    ) else None
    spec = _spec_from_meta(ds.meta) if ds is not None else None
    predict_rows = None

    if kind == baselines.CHECKPOINT_KIND_2SLS:
        sol = baselines.load_fixed_2sls(path)
        predict_rows = sol.predict
        if ds is not None:
            resid = sol.stage1_fit(ds.stage2_w) @ sol.u - ds.stage2_y
            metrics["stage2_loss"] = 0.5 * float(np.mean(resid * resid))
    elif kind == baselines.CHECKPOINT_KIND_DFIV:
        model = baselines.load_dfiv(path)
        predict_rows = model.predict
        metrics["stage2_loss"] = float(model.loss_trace[-1])
        if ds is not None:
            g = model.phi_net.features(ds.stage2_w) @ model.v.T
            resid = g @ model.u - ds.stage2_y
            metrics["stage2_loss"] = 0.5 * float(np.mean(resid * resid))
    elif kind == bilevel.CHECKPOINT_KIND:
        model = bilevel.load_model(path)
        last = model.trace[-1]
        metrics.update({"f1": last.f1, "f2": last.f2, "gap": last.gap,
                        "lagrangian": last.lagrangian})
        predict_rows = lambda rows: bilevel.predict_batch(model, rows)
        if ds is not None:
            metrics["stage2_fit"] = objectives.u2(
                model.tilde_ens_z, ds.stage2_w, ds.stage2_y
            )
    elif kind == ope.CHECKPOINT_KIND_Q_TABLE:
        table = ope.load_q_table(path)
        metrics["policy_value"] = table.value()
        metrics["discount"] = table.discount
        if args.mdp is not None:
            mdp = ope.load_mdp(args.mdp)
            oracle = _oracle_value(mdp, table.policy)
            metrics.update({"oracle_value": oracle,
                            "abs_err": abs(table.value() - oracle),
                            "rel_err": _rel_err(table.value(), oracle)})
    elif kind in (ope.CHECKPOINT_KIND_Q, ope.CHECKPOINT_KIND_DFIV_Q):
        if args.mdp is None or args.data is None:
            raise ConfigError(
                "evaluating a Bellman checkpoint needs --mdp and --data "
                "(the dataset carries the target policy)"
            )
        mdp = ope.load_mdp(args.mdp)
        tuples = ope.load_ope_dataset(args.data)
        policy = tuples.target_policy
        if kind == ope.CHECKPOINT_KIND_Q:
            model = ope.load_q_model(path)
            terminal = ope.policy_value(model, mdp, policy)
            values = [r.value_estimate for r in model.trace]
            # same estimator as the training command: tail mean when the run
            # recorded a value trace, terminal ensembles otherwise
            if values and all(v is not None for v in values):
                estimate = _tail_mean(values)
            else:
                estimate = terminal
            last = model.trace[-1]
            metrics.update({"f2": last.f2, "gap": last.gap, "value_final": terminal})
        else:
            model = ope.load_bellman_dfiv(path)
            estimate = ope.policy_value(model.q_values(), mdp, policy)
            metrics["value_final"] = estimate
        oracle = _oracle_value(mdp, policy)
        metrics.update({"value_estimate": estimate, "oracle_value": oracle,
                        "rel_err": _rel_err(estimate, oracle)})
    else:
        raise DataFormatError(f"no evaluator for checkpoint kind {kind!r}")

    if spec is not None and predict_rows is not None:
        metrics.update(structural_metrics(predict_rows, spec))
    out = _out_dir(args)
    manifest = new_manifest("evaluate", path, stored_config, out)
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
    manifest.add("metrics", out / "metrics.json")
    if spec is not None and predict_rows is not None:
        write_predictions_csv(out / "predictions.csv", predict_rows, spec)
        manifest.add("predictions", out / "predictions.csv")
    manifest.save(out / "manifest.json")
    log.info("evaluate wrote %s", out)
    _emit({"command": "evaluate", "out": str(out), **metrics})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Sweeps


def _parse_axis(text, name):
    if text is None:
        return None
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError:
        raise ConfigError(f"--{name} expects comma-separated numbers, got {text!r}") from None
    if not values:
        raise ConfigError(f"--{name} expects at least one value")
    return values


def _cell_name(lam, sigma, seed):
    return f"lam{lam:g}_sig{sigma:g}_seed{seed}"


def _run_sweep_cell(payload: dict) -> dict:
    """Executed in a worker process; must stay top-level picklable."""
    resolved = payload["resolved"]
    cell_dir = Path(payload["cell_dir"])
    cell_dir.mkdir(parents=True, exist_ok=True)
    cfg = build_train_config(resolved)
    manifest = new_manifest("sweep-cell", payload["config_path"], resolved, cell_dir)
    row = {
        "lam": cfg.reg.lam, "sigma1": cfg.reg.sigma1, "sigma2": cfg.reg.sigma2,
        "seed": cfg.seed, "cell": cell_dir.name,
    }
    if payload["kind"] == "npiv":
        ds = npiv_data.load_dataset(payload["data"])
        model = bilevel.train(cfg, ds)
        bilevel.save_model(cell_dir / "model.ckpt", model)
        manifest.add("model", cell_dir / "model.ckpt")
        bilevel.save_trace(cell_dir / "trace.csv", model.trace)
        manifest.add("trace", cell_dir / "trace.csv")
        last = model.trace[-1]
        row.update({"f1": last.f1, "f2": last.f2, "gap": last.gap,
                    "lagrangian": last.lagrangian})
        spec = _spec_from_meta(ds.meta)
        row["projected_risk"] = (
            structural_metrics(lambda rows: bilevel.predict_batch(model, rows), spec)[
                "projected_risk"
            ]
            if spec is not None
            else ""
        )
    else:
        mdp = ope.load_mdp(payload["mdp"])
        ds = ope.load_ope_dataset(payload["data"])
        model = ope.train_q(cfg, ds, mdp.discount, mdp=mdp)
        ope.save_q_model(cell_dir / "model.ckpt", model)
        manifest.add("model", cell_dir / "model.ckpt")
        bilevel.save_trace(cell_dir / "trace.csv", model.trace)
        manifest.add("trace", cell_dir / "trace.csv")
        last = model.trace[-1]
        estimate = _tail_mean([r.value_estimate for r in model.trace])
        oracle = _oracle_value(mdp, ds.target_policy)
        row.update({"f2": last.f2, "gap": last.gap,
                    "value_estimate": estimate, "oracle_value": oracle,
                    "rel_err": _rel_err(estimate, oracle)})
    manifest.save(cell_dir / "manifest.json")
    return row


_SWEEP_COLUMNS = {
    "npiv": ("lam", "sigma1", "sigma2", "seed", "f1", "f2", "gap",
             "lagrangian", "projected_risk", "cell"),
    "ope": ("lam", "sigma1", "sigma2", "seed", "f2", "gap",
            "value_estimate", "oracle_value", "rel_err", "cell"),
}


def cmd_sweep(args) -> int:
    resolved = resolve_config(load_config(_require(args, "config")), args.seed, args.cold_start)
    kind = resolved["run"]["kind"]
    base_cfg = build_train_config(resolved)
    lambdas = _parse_axis(args.lam, "lambda") or [base_cfg.reg.lam]
    sigmas = _parse_axis(args.sigma, "sigma")
    n_seeds = args.seeds
    if n_seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {n_seeds}")
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
    base_seed = resolved["run"]["seed"]

    cells = []
    for lam in lambdas:
        for sigma in (sigmas if sigmas is not None else [None]):
            for offset in range(n_seeds):
                cells.append((lam, sigma, base_seed + offset))
    if args.dry_run:
        log.info("sweep dry run: %d cells", len(cells))
        _emit({"command": "sweep", "dry_run": True, "cells": len(cells),
               "config_hash": config_hash(resolved)})
        return EXIT_OK

    out = _out_dir(args)
    manifest = new_manifest("sweep", args.config, resolved, out)
    if kind == "npiv":
        data_path = Path(_require(args, "data"))
        npiv_data.load_dataset(data_path)  # fail fast before spawning workers
        mdp_path = None
    else:
        mdp_path = Path(_require(args, "mdp"))
        mdp = ope.load_mdp(mdp_path)
        if args.data is not None:
            data_path = Path(args.data)
            ope.load_ope_dataset(data_path)
        else:
            # one shared rollout for every cell, drawn with the base seed
            ds = _ope_dataset(args, resolved, mdp)
            data_path = out / "tuples.csv"
            ope.save_ope_dataset(data_path, ds)
            manifest.add("tuples", data_path)

    payloads = []
    for lam, sigma, seed in cells:
        cell_resolved = json.loads(json.dumps(resolved))
        reg = cell_resolved.setdefault("reg", {})
        reg["lam"] = lam
        if sigma is not None:
            reg["sigma1"] = sigma
            reg["sigma2"] = sigma
        cell_resolved["run"]["seed"] = seed
        sig_eff = sigma if sigma is not None else build_train_config(cell_resolved).reg.sigma1
        payloads.append({
            "resolved": cell_resolved,
            "config_path": str(args.config),
            "kind": kind,
            "data": str(data_path),
            "mdp": str(mdp_path) if mdp_path is not None else None,
            "cell_dir": str(out / "cells" / _cell_name(lam, sig_eff, seed)),
        })

    if args.jobs == 1:
        rows = [_run_sweep_cell(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_run_sweep_cell, payloads))

    columns = _SWEEP_COLUMNS[kind]
    table = [
        tuple(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in columns)
        for row in rows
    ]
    _write_csv(out / "sweep.csv", columns, table)
    manifest.add("sweep_table", out / "sweep.csv")
    manifest.save(out / "manifest.json")
    log.info("sweep wrote %d rows to %s", len(rows), out / "sweep.csv")
    _emit({"command": "sweep", "out": str(out), "cells": len(rows),
           "config_hash": manifest.config_hash})
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mfldiv",
        description="Particle-ensemble instrumental-variable regression and "
                    "offline policy evaluation.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, default=None, help="override [run].seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, default=1,
                        help="parallel worker limit (used by sweep)")
    common.add_argument("--cold-start", action="store_true",
                        help="re-draw inner ensembles every outer step")
    common.add_argument("--dry-run", action="store_true",
                        help="validate inputs, write nothing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common],
                       help="draw a dataset (and, for ope, the MDP and exact value table)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", parents=[common],
                       help="run the particle trainer on a generated dataset")
    p.add_argument("--data", help="dataset CSV from `generate`")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", parents=[common],
                       help="fit a fixed-feature or learned-feature two-stage baseline")
    p.add_argument("--data", help="dataset CSV (or tuples CSV for run.kind = 'ope')")
    p.add_argument("--mdp", help="MDP JSON (ope baselines; enables value metrics)")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("evaluate", parents=[common],
                       help="compute metrics for an existing checkpoint")
    p.add_argument("--checkpoint", help="checkpoint file to evaluate")
    p.add_argument("--data", help="dataset CSV for risk metrics / target policy")
    p.add_argument("--mdp", help="MDP JSON for value oracles")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ope", parents=[common],
                       help="train the particle value estimator on offline tuples")
    p.add_argument("--mdp", help="MDP JSON from `generate`")
    p.add_argument("--data", help="tuples CSV; synthesized from the config when omitted")
    p.set_defaults(func=cmd_ope)

    p = sub.add_parser("sweep", parents=[common],
                       help="grid of runs over lambda/sigma/seed, metrics to one CSV")
    p.add_argument("--data", help="dataset CSV shared by every cell")
    p.add_argument("--mdp", help="MDP JSON (run.kind = 'ope')")
    p.add_argument("--lambda", dest="lam",
                   help="comma-separated penalty weights, e.g. 0.1,0.3,1,3")
    p.add_argument("--sigma", help="comma-separated noise levels applied to both stages")
    p.add_argument("--seeds", type=int, default=1,
                   help="number of consecutive seeds starting at [run].seed")
    p.set_defaults(func=cmd_sweep)
    return parser


def _fail(code: int, category: str, exc: Exception) -> int:
    log.error("%s", exc)
    print(json.dumps({"error": category, "exit_code": code, "message": str(exc)}),
          file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        _setup_logging()
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "invalid-config", exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_MISSING_FILE, "missing-file", exc)
    except DataFormatError as exc:
        return _fail(EXIT_DATA_FORMAT, "data-format", exc)
    except NumericalFailure as exc:
        return _fail(EXIT_NUMERICAL, "numerical-failure", exc)


if __name__ == "__main__":
    sys.exit(main())
