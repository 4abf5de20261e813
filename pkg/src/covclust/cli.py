"""Command-line interface.

Subcommands mirror the pipeline stages plus recommendation, the raw-rows
baseline, the full run and the diagnostics export. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import logging
import sys

from . import __version__
from .clustering import ClusterModel
from .errors import CONFIG_ERRORS, DATA_ERRORS, NUMERICAL_ERRORS
from .pipeline import (
    STAGES,
    PipelineConfig,
    baseline_kmeans_raw,
    export_diagnostics,
    load_config,
    parse_grid,
    run_pipeline,
)
from .recommend import recommend as _recommend
from .sparse import EntityCatalog, load_matrix
from .transform import FeatureMatrix

log = logging.getLogger("covclust")


def _float_grid(text):
    if text == "auto":
        return None
    return tuple(float(v) for v in text.split(","))


def build_parser():
    p = argparse.ArgumentParser(prog="covclust", description=__doc__)
    p.add_argument("--version", action="version", version=f"covclust {__version__}")
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--out-dir", help="artifact directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--log-level", default="info",
                   choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="parse triplets into the binary matrix")
    s.add_argument("--input", help="TSV triplet file (user, item, count)")
    s.add_argument("--min-count", type=int)

    s = sub.add_parser("sample", help="draw the training-row sample")
    s.add_argument("--m", type=int)
    s.add_argument("--min-corr", type=float)

    s = sub.add_parser("importance", help="fit per-row importance supports")
    s.add_argument("--lambda-policy", choices=["cv", "fixed"])
    s.add_argument("--lambda", dest="lam", type=float)
    s.add_argument("--grid", type=_float_grid, help="comma floats or 'auto'")
    s.add_argument("--folds", type=int)
    s.add_argument("--per-row", action="store_true", default=None)

    s = sub.add_parser("classes", help="discover covariate classes")
    s.add_argument("--k-grid", type=parse_grid, help="start:stop:step or comma list")
    s.add_argument("--eps-impurity", type=float)
    s.add_argument("--eps-entropy", type=float)
    s.add_argument("--tau", type=float)

    s = sub.add_parser("transform", help="project users onto class loadings")
    s.add_argument("--format", choices=["binary", "csv"], default="binary")

    s = sub.add_parser("cluster", help="select L and fit the cluster model")
    s.add_argument("--l-grid", type=parse_grid)
    s.add_argument("--restarts", type=int)

    sub.add_parser("quality", help="compute the cluster quality record")

    s = sub.add_parser("recommend", help="top-k categories for one user")
    s.add_argument("--user", required=True)
    s.add_argument("--top-k", type=int, default=10)
    s.add_argument("--exclude-used", action="store_true")

    s = sub.add_parser("baseline", help="k-means on the raw 0/1 rows")
    s.add_argument("--l", type=int, required=True)
    s.add_argument("--restarts", type=int)

    s = sub.add_parser("run", help="run the full pipeline")
    s.add_argument("--stop-after", choices=list(STAGES))

    sub.add_parser("export", help="write the diagnostic CSV bundle")
    return p


_OVERRIDES = (
    ("out_dir", "out_dir"),
    ("seed", "seed"),
    ("threads", "threads"),
    ("input", "input"),
    ("min_count", "min_count"),
    ("m", "m"),
    ("min_corr", "min_corr"),
    ("lambda_policy", "lambda_policy"),
    ("lam", "lam"),
    ("grid", "cv_grid"),
    ("folds", "cv_folds"),
    ("per_row", "cv_per_row"),
    ("k_grid", "k_grid"),
    ("eps_impurity", "eps_impurity"),
    ("eps_entropy", "eps_entropy"),
    ("tau", "tau"),
    ("l_grid", "l_grid"),
    ("restarts", "restarts"),
)


def _config_from_args(args):
    cfg = load_config(args.config) if args.config else PipelineConfig()
    for arg_name, cfg_name in _OVERRIDES:
        value = getattr(args, arg_name, None)
        if value is not None:
            setattr(cfg, cfg_name, value)
    return cfg


def _cmd_recommend(cfg, args):
    out = cfg.out_dir
    D = load_matrix(f"{out}/matrix.cvc")
    users = EntityCatalog.from_json(f"{out}/users.json", "user")
    categories = EntityCatalog.from_json(f"{out}/categories.json", "category")
    F = FeatureMatrix.load(f"{out}/features.cvf")
    model = ClusterModel.load(f"{out}/model.cvm")
    try:
        i = users.index_of(args.user)
    except KeyError:
        raise SystemExit(f"unknown user {args.user!r}") from None
    items, truncated = _recommend(
        D, F, model, i, top_k=args.top_k, exclude_used=args.exclude_used,
        catalog=categories,
    )
    payload = {
        "user": args.user,
        "cluster": int(model.assignments[i]),
        "truncated": truncated,
        "items": [
            {"id": it.category, "score": it.score, "used": it.used} for it in items
        ],
    }
    print(json.dumps(payload, indent=2, sort_keys=True))


def _cmd_baseline(cfg, args):
    out = cfg.out_dir
    D = load_matrix(f"{out}/matrix.cvc")
    model, quality = baseline_kmeans_raw(
        D, args.l, seed=cfg.seed, restarts=cfg.restarts,
        max_iter=cfg.kmeans_max_iter, tol=cfg.kmeans_tol,
    )
    payload = {
        "L": model.L,
        "inertia": model.inertia,
        "entropy_change": quality.entropy_change,
        "impurity": quality.impurity,
        "similarity_linf": quality.similarity_linf,
        "cluster_sizes": [int(v) for v in quality.cluster_sizes],
    }
    path = f"{out}/baseline.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(path)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _config_from_args(args)
        if args.command == "run":
            stop = args.stop_after or "quality"
            run_pipeline(cfg, stop_after=stop)
            print(f"{cfg.out_dir}/manifest.json")
        elif args.command in STAGES:
            run_pipeline(cfg, stop_after=args.command)
            if args.command == "transform" and args.format == "csv":
                F = FeatureMatrix.load(f"{cfg.out_dir}/features.cvf")
                F.save_csv(f"{cfg.out_dir}/features.csv")
            print(f"{cfg.out_dir}/manifest.json")
        elif args.command == "recommend":
            _cmd_recommend(cfg, args)
        elif args.command == "baseline":
            _cmd_baseline(cfg, args)
        elif args.command == "export":
            for path in export_diagnostics(cfg.out_dir):
                print(path)
        else:  # pragma: no cover
            raise AssertionError(args.command)
    except CONFIG_ERRORS as err:
        log.error("%s", err)
        return 2
    except DATA_ERRORS as err:
        log.error("%s", err)
        return 3
    except NUMERICAL_ERRORS as err:
        log.error("%s", err)
        return 4
    except OSError as err:
        log.error("%s", err)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
