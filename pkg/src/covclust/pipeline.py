"""End-to-end orchestration.

Stages run in a fixed order (ingest, sample, importance, classes,
transform, cluster, quality), each persisting its artifacts into the output
directory. A state file records a fingerprint per completed stage —
a 64-bit content hash over the tool version, the stage's configuration
subset and its input artifacts — so reruns skip any stage whose
fingerprint and outputs are unchanged. Runs with identical config and
input produce bit-identical artifacts.
"""

import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__
from ._lloyd import BinaryRowsDesign, lloyd
from .classes import ClassSet, select_classes
from .clustering import (
    ClusterModel,
    compute_quality,
    kmeans_fit,
    select_cluster_count,
)
from .errors import ConfigError, NotReadyError
from .importance import CrossValidatedLambda, FixedLambda, ImportanceMatrix, estimate_importance
from .sampler import SamplePlan, sample_training_rows
from .sparse import EntityCatalog, ingest_triplets, load_matrix, parse_triplet_lines, save_matrix
from .transform import FeatureMatrix, transform

log = logging.getLogger("covclust")

STAGES = ("ingest", "sample", "importance", "classes", "transform", "cluster", "quality")

ARTIFACTS = {
    "ingest": ("matrix.cvc", "users.json", "categories.json"),
    "sample": ("sample.json",),
    "importance": ("importance.cvw", "importance_meta.json"),
    "classes": ("classes.json",),
    "transform": ("features.cvf",),
    "cluster": ("model.cvm", "cluster_selection.json"),
    "quality": ("quality.json",),
}

_STAGE_CONFIG_KEYS = {
    "ingest": ("input", "min_count"),
    "sample": ("m", "seed", "min_corr", "max_attempts"),
    "importance": (
        "lambda_policy", "lam", "cv_grid", "cv_folds", "cv_per_row",
        "cv_probe_rows", "lasso_tol", "lasso_max_iter", "link", "seed",
    ),
    "classes": ("tau", "k_grid", "eps_impurity", "eps_entropy", "restarts", "seed"),
    "transform": (),
    "cluster": ("l_grid", "restarts", "kmeans_tol", "kmeans_max_iter", "seed"),
    "quality": (),
}


def content_hash(path):
    """64-bit content hash of a file, hex-encoded."""
    h = hashlib.blake2b(digest_size=8)
    with open(path, "rb") as fh:
        while chunk := fh.read(1 << 16):
            h.update(chunk)
    return h.hexdigest()


def _hash_text(text):
    return hashlib.blake2b(text.encode("utf-8"), digest_size=8).hexdigest()


@dataclass
class PipelineConfig:
    input: str = None
    out_dir: str = "covclust-out"
    seed: int = 7
    threads: int = 1
    min_count: int = 1
    # sampler
    m: int = None
    min_corr: float = 0.9
    max_attempts: int = 20
    # importance
    lambda_policy: str = "cv"     # "cv" or "fixed"
    lam: float = None
    cv_grid: tuple = None         # None derives the grid from the data
    cv_folds: int = 5
    cv_per_row: bool = False
    cv_probe_rows: int = 50
    lasso_tol: float = 1e-7
    lasso_max_iter: int = 2000
    link: str = "identity"
    # classes
    tau: float = 0.5
    k_grid: tuple = None
    eps_impurity: float = None
    eps_entropy: float = None
    # clustering
    l_grid: tuple = None
    restarts: int = 8
    kmeans_tol: float = 1e-9
    kmeans_max_iter: int = 300

    _REQUIRED = {
        "ingest": ("input",),
        "sample": ("m",),
        "importance": (),
        "classes": ("k_grid", "eps_impurity", "eps_entropy"),
        "transform": (),
        "cluster": ("l_grid",),
        "quality": (),
    }

    def validate(self, through_stage="quality"):
        for stage in STAGES[: STAGES.index(through_stage) + 1]:
            for key in self._REQUIRED[stage]:
                if getattr(self, key) is None:
                    raise ConfigError(f"stage '{stage}' requires config key '{key}'")
        if self.lambda_policy not in ("cv", "fixed"):
            raise ConfigError(f"lambda_policy must be 'cv' or 'fixed', got {self.lambda_policy!r}")
        if self.lambda_policy == "fixed" and (self.lam is None or self.lam <= 0):
            raise ConfigError("fixed lambda policy requires a positive 'lambda'")
        for key in ("lasso_tol", "kmeans_tol"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("eps_impurity", "eps_entropy"):
            v = getattr(self, key)
            if v is not None and v <= 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("k_grid", "l_grid"):
            g = getattr(self, key)
            if g is not None and (len(g) == 0 or list(g) != sorted(g)):
                raise ConfigError(f"{key} must be a non-empty ascending grid")
        return self

    def stage_fingerprint(self, stage, input_hashes):
        parts = [__version__, stage]
        for key in _STAGE_CONFIG_KEYS[stage]:
            parts.append(f"{key}={getattr(self, key)!r}")
        parts.extend(input_hashes)
        return _hash_text("\n".join(parts))

    def config_hash(self):
        parts = [f"{f.name}={getattr(self, f.name)!r}" for f in fields(self)]
        return _hash_text("\n".join(parts))

    def lambda_policy_obj(self):
        if self.lambda_policy == "fixed":
            return FixedLambda(self.lam)
        return CrossValidatedLambda(
            grid=self.cv_grid,
            folds=self.cv_folds,
            per_row=self.cv_per_row,
            probe_rows=self.cv_probe_rows,
        )


def parse_grid(text):
    """Parse 'a:b:s' (inclusive range) or 'v1,v2,...' into an int tuple."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) not in (2, 3):
            raise ConfigError(f"bad grid spec {text!r}")
        try:
            start, stop = int(parts[0]), int(parts[1])
            step = int(parts[2]) if len(parts) == 3 else 1
        except ValueError:
            raise ConfigError(f"bad grid spec {text!r}") from None
        if step < 1 or stop < start:
            raise ConfigError(f"bad grid spec {text!r}")
        return tuple(range(start, stop + 1, step))
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"bad grid spec {text!r}") from None


_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

_CONFIG_PARSERS = {
    "input": str,
    "out_dir": str,
    "seed": int,
    "threads": int,
    "min_count": int,
    "m": int,
    "min_corr": float,
    "max_attempts": int,
    "lambda_policy": str,
    "lambda": float,
    "cv_grid": lambda s: None if s == "auto" else tuple(float(v) for v in s.split(",")),
    "cv_folds": int,
    "cv_per_row": lambda s: _BOOL[s.lower()],
    "cv_probe_rows": int,
    "lasso_tol": float,
    "lasso_max_iter": int,
    "link": str,
    "tau": float,
    "k_grid": parse_grid,
    "eps_impurity": float,
    "eps_entropy": float,
    "l_grid": parse_grid,
    "restarts": int,
    "kmeans_tol": float,
    "kmeans_max_iter": int,
}

_KEY_ALIASES = {"lambda": "lam"}


def load_config(path):
    """Read a flat key = value config file."""
    cfg = PipelineConfig()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            parser = _CONFIG_PARSERS.get(key)
            if parser is None:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                parsed = parser(value)
            except (ValueError, KeyError) as err:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {err}") from None
            setattr(cfg, _KEY_ALIASES.get(key, key), parsed)
    return cfg


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    stages: list = field(default_factory=list)

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(
                {
                    "config_hash": self.config_hash,
                    "tool_version": self.tool_version,
                    "stages": self.stages,
                },
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")


class _State:
    """Per-stage completion records backing the resume logic."""

    def __init__(self, out_dir):
        self.path = os.path.join(out_dir, "state.json")
        self.data = {}
        if os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as fh:
                self.data = json.load(fh)

    def is_current(self, stage, fingerprint, out_dir):
        rec = self.data.get(stage)
        if rec is None or rec["fingerprint"] != fingerprint:
            return False
        for name, digest in rec["outputs"].items():
            path = os.path.join(out_dir, name)
            if not os.path.exists(path) or content_hash(path) != digest:
                return False
        return True

    def record(self, stage, fingerprint, out_dir):
        outputs = {
            name: content_hash(os.path.join(out_dir, name))
            for name in ARTIFACTS[stage]
        }
        self.data[stage] = {"fingerprint": fingerprint, "outputs": outputs}
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return outputs


def _artifact(out_dir, name):
    return os.path.join(out_dir, name)


def _require(out_dir, stage):
    for name in ARTIFACTS[stage]:
        if not os.path.exists(_artifact(out_dir, name)):
            raise NotReadyError(
                f"artifact {name} missing; run the '{stage}' stage first"
            )


# ---------------------------------------------------------------------------
# stage bodies (each loads its inputs from disk and persists its outputs)

def stage_ingest(config):
    out = config.out_dir
    with open(config.input, encoding="utf-8") as fh:
        matrix, users, categories = ingest_triplets(
            parse_triplet_lines(fh), min_count=config.min_count
        )
    save_matrix(_artifact(out, "matrix.cvc"), matrix)
    users.to_json(_artifact(out, "users.json"))
    categories.to_json(_artifact(out, "categories.json"))
    log.info("ingest: %d users x %d categories, %d cells", matrix.n_rows,
             matrix.n_cols, matrix.nnz)


def stage_sample(config):
    out = config.out_dir
    D = load_matrix(_artifact(out, "matrix.cvc"))
    plan = sample_training_rows(
        D, config.m, seed=config.seed, min_corr=config.min_corr,
        max_attempts=config.max_attempts,
    )
    plan.to_json(_artifact(out, "sample.json"))
    log.info("sample: m=%d corr=%.4f ratio=%.3f", plan.m,
             plan.col_avg_correlation, plan.row_avg_ratio)


def stage_importance(config):
    out = config.out_dir
    D = load_matrix(_artifact(out, "matrix.cvc"))
    plan = SamplePlan.from_json(_artifact(out, "sample.json"))
    Dstar = D.take_rows(plan.row_ids)
    W, failures = estimate_importance(
        Dstar,
        config.lambda_policy_obj(),
        tol=config.lasso_tol,
        max_iter=config.lasso_max_iter,
        seed=config.seed,
        threads=config.threads,
        link=config.link,
    )
    W.save(_artifact(out, "importance.cvw"), _artifact(out, "importance_meta.json"))
    log.info("importance: %d rows fitted, %d failures", W.m, len(failures))


def stage_classes(config):
    out = config.out_dir
    W = ImportanceMatrix.load(
        _artifact(out, "importance.cvw"), _artifact(out, "importance_meta.json")
    )
    cs, quality, diagnostics = select_classes(
        W, W.p, config.k_grid, config.eps_impurity, config.eps_entropy,
        tau=config.tau, seed=config.seed, restarts=config.restarts,
    )
    cs.to_json(_artifact(out, "classes.json"), quality=quality, diagnostics=diagnostics)
    log.info("classes: K=%d coverage=%.1f%% impurity=%.4f entropy=%.4f",
             cs.K, 100 * cs.coverage, quality.impurity, quality.entropy_difference)


def stage_transform(config):
    out = config.out_dir
    D = load_matrix(_artifact(out, "matrix.cvc"))
    cs = ClassSet.from_json(_artifact(out, "classes.json"))
    F = transform(D, cs)
    F.save(_artifact(out, "features.cvf"))
    log.info("transform: %d x %d feature matrix", F.n_rows, F.K)


def stage_cluster(config):
    out = config.out_dir
    D = load_matrix(_artifact(out, "matrix.cvc"))
    F = FeatureMatrix.load(_artifact(out, "features.cvf"))
    l_star, diagnostics = select_cluster_count(
        F, D, config.l_grid, seed=config.seed, restarts=config.restarts,
        max_iter=config.kmeans_max_iter, tol=config.kmeans_tol,
    )
    model = kmeans_fit(
        F, l_star, seed=config.seed, restarts=config.restarts,
        max_iter=config.kmeans_max_iter, tol=config.kmeans_tol,
    )
    model.save(_artifact(out, "model.cvm"))
    with open(_artifact(out, "cluster_selection.json"), "w", encoding="utf-8") as fh:
        json.dump({"L": l_star, "diagnostics": diagnostics}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("cluster: L=%d inertia=%.6f", l_star, model.inertia)


def stage_quality(config):
    out = config.out_dir
    D = load_matrix(_artifact(out, "matrix.cvc"))
    model = ClusterModel.load(_artifact(out, "model.cvm"))
    q = compute_quality(model, D)
    cum = q.cumulative_cooccurrence()
    payload = {
        "L": model.L,
        "entropy_change": q.entropy_change,
        "impurity": q.impurity,
        "similarity_linf": q.similarity_linf,
        "cluster_sizes": [int(v) for v in q.cluster_sizes],
        "cooccurrence": [int(v) for v in q.cooccurrence],
        "cumulative_cooccurrence": [float(v) for v in cum],
    }
    with open(_artifact(out, "quality.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("quality: M=%.4f I=%.4f linf=%.4f", q.entropy_change, q.impurity,
             q.similarity_linf)


_STAGE_BODIES = {
    "ingest": stage_ingest,
    "sample": stage_sample,
    "importance": stage_importance,
    "classes": stage_classes,
    "transform": stage_transform,
    "cluster": stage_cluster,
    "quality": stage_quality,
}


def run_pipeline(config, stop_after="quality"):
    """Run (or resume) the staged pipeline; returns the RunManifest.

    Stages whose fingerprint and outputs are unchanged are skipped. Partial
    outputs from failed runs are retained, so a rerun resumes after the last
    completed stage.
    """
    if stop_after not in STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}")
    config.validate(through_stage=stop_after)
    os.makedirs(config.out_dir, exist_ok=True)
    state = _State(config.out_dir)
    manifest = RunManifest(config_hash=config.config_hash(), tool_version=__version__)

    upstream_hashes = [content_hash(config.input)]
    for stage in STAGES[: STAGES.index(stop_after) + 1]:
        fingerprint = config.stage_fingerprint(stage, upstream_hashes)
        entry = {"name": stage, "fingerprint": fingerprint, "recomputed": False,
                 "duration_s": 0.0}
        if state.is_current(stage, fingerprint, config.out_dir):
            log.info("%s: up to date, skipping", stage)
            outputs = state.data[stage]["outputs"]
        else:
            t0 = time.monotonic()
            _STAGE_BODIES[stage](config)
            entry["duration_s"] = round(time.monotonic() - t0, 6)
            entry["recomputed"] = True
            outputs = state.record(stage, fingerprint, config.out_dir)
        entry["outputs"] = outputs
        manifest.stages.append(entry)
        upstream_hashes = [fingerprint] + sorted(outputs.values())

    manifest.to_json(_artifact(config.out_dir, "manifest.json"))
    return manifest


def baseline_kmeans_raw(D, L, seed, restarts=4, max_iter=300, tol=1e-9):
    """K-means directly on the raw 0/1 rows, with the same quality metrics.

    Exists for comparison: on heavy-tailed usage data it tends to collapse
    into one dominant cluster, which the feature-space pipeline avoids.
    """
    design = BinaryRowsDesign(D)
    centroids, labels, inertia, history = lloyd(
        design, L, seed=seed, restarts=restarts, max_iter=max_iter, tol=tol,
        empty_rule="split_max_inertia",
    )
    model = ClusterModel(
        L=L, centroids=centroids, assignments=labels, inertia=inertia,
        inertia_history=history,
    )
    return model, compute_quality(model, D)


def export_diagnostics(out_dir):
    """Write the four diagnostic CSVs from the persisted artifacts.

    Returns the list of written paths. Raises NotReadyError when the
    backing stage has not completed.
    """
    written = []

    _require(out_dir, "classes")
    with open(_artifact(out_dir, "classes.json"), encoding="utf-8") as fh:
        class_diag = json.load(fh).get("diagnostics", [])
    path = _artifact(out_dir, "class_selection.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("K,impurity,entropy_difference,objective\n")
        for row in class_diag:
            fh.write(
                f"{row['K']},{_csv_num(row['impurity'])},"
                f"{_csv_num(row['entropy_difference'])},{_csv_num(row['objective'])}\n"
            )
    written.append(path)

    _require(out_dir, "cluster")
    with open(_artifact(out_dir, "cluster_selection.json"), encoding="utf-8") as fh:
        cluster_diag = json.load(fh)["diagnostics"]
    path = _artifact(out_dir, "cluster_selection.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("L,impurity,entropy_difference,similarity_linf\n")
        for row in cluster_diag:
            fh.write(
                f"{row['L']},{_csv_num(row['impurity'])},"
                f"{_csv_num(row['entropy_change'])},{_csv_num(row['similarity_linf'])}\n"
            )
    written.append(path)

    _require(out_dir, "quality")
    with open(_artifact(out_dir, "quality.json"), encoding="utf-8") as fh:
        quality = json.load(fh)
    path = _artifact(out_dir, "cluster_sizes.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("cluster,size\n")
        for j, size in enumerate(quality["cluster_sizes"]):
            fh.write(f"{j},{size}\n")
    written.append(path)

    path = _artifact(out_dir, "cooccurrence.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("f,count\n")
        for f_val, count in enumerate(quality["cooccurrence"], start=1):
            fh.write(f"{f_val},{count}\n")
    written.append(path)
    return written


def _csv_num(v):
    return "" if v is None else repr(float(v))
