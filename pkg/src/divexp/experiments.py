"""Experiment configuration, multi-seed runs, metrics files and run comparison.

Config files are flat ``key = value`` documents. Keys are dotted
(``env.kind``, ``de.k``, ``trpo.max_kl``, ``policy.hidden``); values are
JSON literals, and bare words are read as strings. Lines starting with
``#`` are comments.

Output layout under the experiment directory::

    <strategy>/seed_<s>.csv     one row per iteration
    <strategy>/manifest.json    config snapshot, provenance, seeds, accounting
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy import stats

from . import __version__
from .envs import make_env
from .trpo import STRATEGIES, DeConfig, IterationRecord, TrpoConfig, run

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DIVEXP_OUTPUT_ROOT"
COLUMNS = IterationRecord.columns()
NAN = "nan"

PAPER = "paper-default"
ARTIFACT = "artifact-default"
USER = "user"


class ConfigError(ValueError):
    pass


def _steps_default(cfg: dict) -> int:
    return 8400 if cfg.get("env.kind") == "pendulum" else 4200


def _int(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != int(v):
        raise TypeError("expected an integer")
    return int(v)


def _float(v):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise TypeError("expected a number")
    return float(v)


def _bool(v):
    if not isinstance(v, bool):
        raise TypeError("expected true or false")
    return v


def _str(v):
    if not isinstance(v, str):
        raise TypeError("expected a string")
    return v


def _int_list(v):
    if not isinstance(v, list) or not v:
        raise TypeError("expected a nonempty list of integers")
    return [_int(x) for x in v]


def _seeds(v):
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        n = _int(v)
        if n < 1:
            raise ValueError("seed count must be positive")
        return list(range(n))
    seeds = _int_list(v)
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    return seeds


@dataclass(frozen=True)
class Key:
    parse: Callable[[Any], Any]
    default: Any  # value or callable(partial config)
    source: str
    check: Callable[[Any], bool] | None = None
    doc: str = ""


SCHEMA: dict[str, Key] = {
    "env.kind": Key(lambda v: _str(v).lower(), None, USER, lambda v: v in ("lqr", "pointmass", "pendulum"),
                    "lqr | pointmass | pendulum"),
    "strategy": Key(lambda v: _str(v).upper(), None, USER, lambda v: v in STRATEGIES, "DE | RP | TRPO"),
    "name": Key(_str, lambda c: c["env.kind"], ARTIFACT, lambda v: bool(v) and "/" not in v),
    "output_dir": Key(_str, "runs", ARTIFACT),
    "seeds": Key(_seeds, list(range(10)), PAPER, None, "list of seeds, or a count"),
    "iterations": Key(_int, 150, ARTIFACT, lambda v: v >= 0),
    "de.k": Key(_int, 20, PAPER, lambda v: v >= 0 and v % 2 == 0, "even, non-negative (symmetric sampling)"),
    "de.total_steps": Key(_int, _steps_default, ARTIFACT, lambda v: v > 0, "N, env steps per iteration"),
    "de.delta_p": Key(_float, 0.2, PAPER, lambda v: v > 0),
    "de.delta_p_floor": Key(_float, 0.01, ARTIFACT, lambda v: 0 <= v <= 1, "fraction of de.delta_p"),
    "de.gamma": Key(_float, 0.99, ARTIFACT, lambda v: 0 < v <= 1),
    "de.vf_epochs": Key(_int, 5, ARTIFACT, lambda v: v >= 0),
    "de.vf_lr": Key(_float, 1e-2, ARTIFACT, lambda v: v > 0),
    "de.vf_batch": Key(_int, 64, ARTIFACT, lambda v: v > 0),
    "trpo.max_kl": Key(_float, 0.01, ARTIFACT, lambda v: v > 0),
    "trpo.cg_iters": Key(_int, 20, ARTIFACT, lambda v: v > 0),
    "trpo.cg_damping": Key(_float, 1e-3, ARTIFACT, lambda v: v >= 0),
    "trpo.cg_tol": Key(_float, 1e-6, ARTIFACT, lambda v: v >= 0),
    "trpo.backtrack_coef": Key(_float, 0.5, ARTIFACT, lambda v: 0 < v < 1),
    "trpo.max_backtracks": Key(_int, 10, ARTIFACT, lambda v: v >= 0),
    "trpo.fisher": Key(_str, "empirical", ARTIFACT, lambda v: v in ("empirical", "expected")),
    "trpo.exact_kl_check": Key(_bool, True, ARTIFACT),
    "policy.hidden": Key(_int_list, [32, 32], ARTIFACT, lambda v: all(h > 0 for h in v)),
    "policy.layer_norm": Key(_bool, True, ARTIFACT),
    "policy.log_std_min": Key(_float, -2.5, ARTIFACT),
    "policy.log_std_max": Key(_float, -0.5, ARTIFACT),
    "policy.init_log_std": Key(_float, -1.0, ARTIFACT),
    "policy.value_hidden": Key(_int_list, [32, 32], ARTIFACT, lambda v: all(h > 0 for h in v)),
}

ENV_PARAMS = {
    "lqr": {"A", "B", "Q", "R", "start_mean", "start_std", "horizon"},
    "pointmass": {"horizon", "dt", "friction", "arena"},
    "pendulum": {"horizon", "dt", "g_over_l", "max_torque", "max_speed", "reward_scale"},
}


@dataclass
class ExperimentConfig:
    values: dict
    provenance: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def env_params(self) -> dict:
        return {k[4:]: v for k, v in self.values.items() if k.startswith("env.") and k != "env.kind"}

    @property
    def seeds(self) -> list[int]:
        return list(self.values["seeds"])

    @property
    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.values["output_dir"])

    @property
    def directory(self) -> Path:
        return self.output_root / self.values["name"]

    def de_config(self) -> DeConfig:
        v = self.values
        return DeConfig(
            strategy=v["strategy"], k=v["de.k"], total_steps=v["de.total_steps"], iterations=v["iterations"],
            delta_p=v["de.delta_p"], delta_p_floor=v["de.delta_p_floor"], gamma=v["de.gamma"],
            vf_epochs=v["de.vf_epochs"], vf_lr=v["de.vf_lr"], vf_batch=v["de.vf_batch"],
        )

    def trpo_config(self) -> TrpoConfig:
        v = self.values
        return TrpoConfig(
            max_kl=v["trpo.max_kl"], cg_iters=v["trpo.cg_iters"], cg_damping=v["trpo.cg_damping"],
            cg_tol=v["trpo.cg_tol"], backtrack_coef=v["trpo.backtrack_coef"],
            max_backtracks=v["trpo.max_backtracks"], fisher=v["trpo.fisher"],
            exact_kl_check=v["trpo.exact_kl_check"],
        )

    def policy_kwargs(self) -> dict:
        v = self.values
        return dict(
            hidden=tuple(v["policy.hidden"]), layer_norm=v["policy.layer_norm"],
            log_std_bounds=(v["policy.log_std_min"], v["policy.log_std_max"]),
            init_log_std=v["policy.init_log_std"], value_hidden=tuple(v["policy.value_hidden"]),
        )

    def replace(self, **updates) -> "ExperimentConfig":
        """Copy with dotted keys overridden (pass ``de_k=4`` for ``de.k``)."""
        raw = {k: v for k, v in self.values.items() if self.provenance[k] == USER}
        raw.update({k.replace("_", ".", 1) if k.split("_", 1)[0] in ("de", "trpo", "env", "policy") else k: v
                    for k, v in updates.items()})
        return build_config(raw)


def _parse_value(text: str):
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_text(text: str) -> dict:
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        raw[key] = _parse_value(value)
    return raw


def build_config(raw: dict, strict: bool = True) -> ExperimentConfig:
    """Validate user values and fill defaults, recording where each value came from."""
    for required in ("env.kind", "strategy"):
        if required not in raw:
            raise ConfigError(f"{required}: required key is missing")
    values: dict = {}
    provenance: dict = {}
    for key in ("env.kind", "strategy"):
        values[key] = _validated(key, raw[key])
        provenance[key] = USER
    kind = values["env.kind"]
    for key, value in raw.items():
        if key in SCHEMA or key in values:
            continue
        if key.startswith("env.") and key[4:] in ENV_PARAMS[kind]:
            values[key] = value
            provenance[key] = USER
        elif strict:
            raise ConfigError(f"{key}: unknown key")
        else:
            log.warning("ignoring unknown config key %s", key)
    for key, spec in SCHEMA.items():
        if key in values:
            continue
        if key in raw:
            values[key] = _validated(key, raw[key])
            provenance[key] = USER
        else:
            values[key] = spec.default(values) if callable(spec.default) else spec.default
            provenance[key] = spec.source
    if values["strategy"] == "TRPO" and provenance["de.k"] != USER:
        values["de.k"] = 0
    if values["strategy"] == "TRPO" and values["de.k"] != 0:
        raise ConfigError("de.k: strategy TRPO deploys no perturbations; use k = 0")
    if values["policy.log_std_min"] >= values["policy.log_std_max"]:
        raise ConfigError("policy.log_std_min: must be below policy.log_std_max")
    if values["strategy"] == "DE" and values["de.k"] // 2 > values["trpo.cg_iters"]:
        raise ConfigError(f"de.k: k={values['de.k']} needs at least k/2 = {values['de.k'] // 2} CG iterations")
    k, n = values["de.k"], values["de.total_steps"]
    if n < k + 1:
        raise ConfigError("de.total_steps: fewer steps than deployed policies")
    if k and n % (k + 1):
        log.warning("N=%d is not divisible by k+1=%d; the main policy takes the remainder", n, k + 1)
    cfg = ExperimentConfig(values, provenance)
    try:
        make_env(kind, **cfg.env_params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"env: {exc}") from exc
    return cfg


def _validated(key: str, value):
    spec = SCHEMA[key]
    try:
        out = spec.parse(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc} (got {value!r})") from exc
    if spec.check is not None and not spec.check(out):
        hint = f"; {spec.doc}" if spec.doc else ""
        raise ConfigError(f"{key}: value {value!r} is out of range{hint}")
    return out


def parse_config(path: str | Path, strict: bool = True) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return build_config(parse_text(path.read_text()), strict)


def serialize_config(cfg: ExperimentConfig, only_user: bool = False) -> str:
    lines = []
    for key in sorted(cfg.values):
        if only_user and cfg.provenance[key] != USER:
            continue
        lines.append(f"{key} = {json.dumps(cfg.values[key])}")
    return "\n".join(lines) + "\n"


# --- metrics files -----------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return NAN if math.isnan(v) else repr(v)


def metrics_text(records: list[IterationRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for rec in records:
        row = rec.row()
        w.writerow([_cell(row[c]) for c in COLUMNS])
    return buf.getvalue()


def read_metrics(path: str | Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != COLUMNS:
        raise ValueError(f"{path}: unexpected metrics header")
    body = rows[1:]
    if any(len(r) != len(COLUMNS) or "" in r for r in body):
        raise ValueError(f"{path}: malformed row")
    data = np.array([[float(x) for x in r] for r in body]).reshape(len(body), len(COLUMNS))
    return {c: data[:, i] for i, c in enumerate(COLUMNS)}


def _code_stamp() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def run_experiment(cfg: ExperimentConfig, directory: str | Path | None = None,
                   progress: Callable[[int, IterationRecord], None] | None = None) -> dict:
    """Train every seed of ``cfg`` and write per-seed metrics plus a manifest.

    A failing seed is recorded in the manifest and the remaining seeds still
    run. Rows are flushed as iterations finish, so a failed seed leaves its
    partial metrics behind.
    """
    out = Path(directory) if directory is not None else cfg.directory / cfg["strategy"]
    out.mkdir(parents=True, exist_ok=True)
    env = make_env(cfg["env.kind"], **cfg.env_params)
    de, trpo = cfg.de_config(), cfg.trpo_config()
    manifest = {
        "strategy": cfg["strategy"],
        "config": serialize_config(cfg),
        "provenance": dict(sorted(cfg.provenance.items())),
        "seeds": cfg.seeds,
        "beta": de.beta,
        "beta_k": de.beta_k,
        "version": __version__,
        "code": _code_stamp(),
        "columns": COLUMNS,
        "files": {},
        "env_steps": {},
        "errors": {},
    }
    started = time.time()
    for seed in cfg.seeds:
        path = out / f"seed_{seed}.csv"
        manifest["files"][str(seed)] = path.name
        steps = 0
        records: list[IterationRecord] = []
        with open(path, "w", newline="") as fh:
            fh.write(",".join(COLUMNS) + "\n")

            def sink(rec, fh=fh):
                fh.write(metrics_text([rec]).split("\n", 1)[1])
                fh.flush()
                records.append(rec)
                if progress is not None:
                    progress(seed, rec)

            try:
                run(env, de, trpo, seed, callback=sink, **cfg.policy_kwargs())
            except Exception as exc:  # recorded, other seeds continue
                log.error("seed %d failed: %s", seed, exc)
                manifest["errors"][str(seed)] = "".join(traceback.format_exception_only(type(exc), exc)).strip()
        steps = sum(r.env_steps for r in records)
        manifest["env_steps"][str(seed)] = steps
    manifest["total_env_steps"] = sum(manifest["env_steps"].values())
    manifest["timing"] = {"wall_clock_seconds": round(time.time() - started, 3)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_runs(directory: str | Path) -> list[dict[str, np.ndarray]]:
    """Metrics of every seed listed in ``directory/manifest.json``, in seed order."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text())
        files = [directory / manifest["files"][str(s)] for s in manifest["seeds"]]
    else:
        files = sorted(directory.glob("seed_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        raise FileNotFoundError(f"no metrics files in {directory}")
    return [read_metrics(f) for f in files]


# --- comparison --------------------------------------------------------------


@dataclass
class CurveSummary:
    mean: np.ndarray
    q25: np.ndarray
    median: np.ndarray
    q75: np.ndarray


@dataclass
class PairedTest:
    metric: str
    mean_difference: float
    t_p_value: float
    sign_p_value: float
    degenerate: bool


@dataclass
class RunSummary:
    strategy_a: str
    strategy_b: str
    iterations: int
    seeds_a: int
    seeds_b: int
    returns_a: CurveSummary
    returns_b: CurveSummary
    pairwise_kl_a: np.ndarray
    pairwise_kl_b: np.ndarray
    cov_trace_a: np.ndarray
    cov_trace_b: np.ndarray
    performance: PairedTest
    pairwise_kl: PairedTest
    cov_trace: PairedTest
    notes: list = field(default_factory=list)

    @property
    def p_value(self) -> float:
        return self.performance.t_p_value

    def kl_table(self) -> str:
        a = np.nanmean(self.pairwise_kl_a) if np.any(np.isfinite(self.pairwise_kl_a)) else math.nan
        b = np.nanmean(self.pairwise_kl_b) if np.any(np.isfinite(self.pairwise_kl_b)) else math.nan
        return (
            f"| total pairwise KL (mean over iterations) | {self.strategy_a} | {self.strategy_b} | p (paired t) |\n"
            f"|---|---|---|---|\n"
            f"| | {a:.4g} | {b:.4g} | {self.pairwise_kl.t_p_value:.3g} |\n"
        )

    def report(self) -> str:
        lines = [
            f"{self.strategy_a} vs {self.strategy_b}: {self.iterations} iterations, "
            f"{self.seeds_a}/{self.seeds_b} seeds",
        ]
        for test in (self.performance, self.pairwise_kl, self.cov_trace):
            flag = " (zero-variance differences)" if test.degenerate else ""
            lines.append(
                f"{test.metric}: mean difference {test.mean_difference:.6g}, "
                f"paired t p = {test.t_p_value:.4g}, sign test p = {test.sign_p_value:.4g}{flag}"
            )
        lines.extend(self.notes)
        lines.append("")
        lines.append(self.kl_table())
        return "\n".join(lines)


def curve_summary(matrix: np.ndarray) -> CurveSummary:
    """Cross-seed statistics of a (seeds, iterations) matrix."""
    q25, median, q75 = np.percentile(matrix, [25, 50, 75], axis=0)
    return CurveSummary(matrix.mean(axis=0), q25, median, q75)


def paired_test(a: np.ndarray, b: np.ndarray, metric: str) -> PairedTest:
    """Two-sided paired t-test of ``a - b`` with a sign-test companion; NaN pairs are dropped."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    keep = np.isfinite(a) & np.isfinite(b)
    d = a[keep] - b[keep]
    if len(d) == 0:
        return PairedTest(metric, math.nan, math.nan, math.nan, True)
    mean = float(d.mean())
    spread = float(d.std()) if len(d) > 1 else 0.0
    if len(d) < 2 or spread <= 1e-12 * max(1.0, abs(mean)):
        p = 1.0 if mean == 0 else 0.0
        degenerate = True
    else:
        p = float(stats.ttest_rel(a[keep], b[keep]).pvalue)
        degenerate = False
    nonzero = d[d != 0]
    if len(nonzero):
        sign_p = float(stats.binomtest(int(np.sum(nonzero > 0)), len(nonzero), 0.5).pvalue)
    else:
        sign_p = 1.0
    return PairedTest(metric, mean, p, sign_p, degenerate)


def _stack(runs: list[dict], column: str) -> np.ndarray:
    return np.stack([r[column] for r in runs])


def _nanmean_rows(m: np.ndarray) -> np.ndarray:
    out = np.full(m.shape[1], math.nan)
    ok = np.any(np.isfinite(m), axis=0)
    out[ok] = np.nanmean(m[:, ok], axis=0)
    return out


def summarize(runs_a: list[dict], runs_b: list[dict], strategy_a: str = "A", strategy_b: str = "B") -> RunSummary:
    if len(runs_a) < 2 or len(runs_b) < 2:
        raise ValueError("comparison needs at least two seeds per strategy")
    lengths = {len(r["iteration"]) for r in runs_a + runs_b}
    if len(lengths) != 1:
        raise ValueError(f"misaligned iteration counts {sorted(lengths)}")
    for r in runs_a + runs_b:
        if not np.array_equal(r["iteration"], runs_a[0]["iteration"]):
            raise ValueError("misaligned iteration indices")
    ret_a, ret_b = _stack(runs_a, "avg_return"), _stack(runs_b, "avg_return")
    kl_a, kl_b = _nanmean_rows(_stack(runs_a, "pairwise_kl")), _nanmean_rows(_stack(runs_b, "pairwise_kl"))
    ct_a, ct_b = _nanmean_rows(_stack(runs_a, "cov_trace")), _nanmean_rows(_stack(runs_b, "cov_trace"))
    ra, rb = curve_summary(ret_a), curve_summary(ret_b)
    notes = ["sign-test p-values are a robustness companion to the paired t-tests"]
    return RunSummary(
        strategy_a, strategy_b, lengths.pop(), len(runs_a), len(runs_b), ra, rb, kl_a, kl_b, ct_a, ct_b,
        performance=paired_test(ra.mean, rb.mean, "aggregate return"),
        pairwise_kl=paired_test(kl_a, kl_b, "pairwise KL"),
        cov_trace=paired_test(ct_a, ct_b, "cov trace"),
        notes=notes,
    )


def compare_runs(directory: str | Path, strategy_a: str, strategy_b: str) -> RunSummary:
    """Compare two strategies stored under ``directory/<strategy>/``."""
    directory = Path(directory)
    a, b = strategy_a.upper(), strategy_b.upper()
    return summarize(load_runs(directory / a), load_runs(directory / b), a, b)


# --- k ablation --------------------------------------------------------------


ABLATION_COLUMNS = ["k", "iteration", "mean_return", "q25_return", "q75_return", "mean_main_return", "env_steps"]


def ablate_k(cfg: ExperimentConfig, k_values: list[int], directory: str | Path | None = None,
             progress=None) -> dict:
    """One experiment per ``k`` with shared seeds and a fixed budget N, plus a combined curve table."""
    if not k_values:
        raise ConfigError("k list is empty")
    out = Path(directory) if directory is not None else cfg.directory / f"ablate_{cfg['strategy']}"
    out.mkdir(parents=True, exist_ok=True)
    manifests = {}
    rows = []
    for k in k_values:
        sub = cfg.replace(de_k=int(k))
        target = out / f"k{k}"
        manifests[k] = run_experiment(sub, target, progress)
        runs = load_runs(target)
        ret = _stack(runs, "avg_return")
        summary = curve_summary(ret)
        main = _stack(runs, "main_return").mean(axis=0)
        steps = _stack(runs, "env_steps").mean(axis=0)
        for i in range(ret.shape[1]):
            rows.append([k, i, summary.mean[i], summary.q25[i], summary.q75[i], main[i], steps[i]])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for r in rows:
        w.writerow([str(r[0]), str(r[1])] + [_cell(x) for x in r[2:]])
    (out / "ablation.csv").write_text(buf.getvalue())
    return manifests
