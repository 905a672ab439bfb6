"""Command-line entry point.

Subcommands: `synth` (generate a synthetic cohort), `preprocess` (dump
preprocessed images), `extract-features` (LBP histogram CSV per ROI),
`run` (execute an experiment config), `compare` (DeLong between two
prediction files), `report` (rebuild report artifacts from stored
predictions). Exit codes: 0 success, 1 usage error, 2 data error.

The `TEXROI_LOG` environment variable sets log verbosity (DEBUG/INFO/...).
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import load_manifest, validate_dataset
from .errors import DataError
from .experiment import (ExperimentConfig, MODEL_SPECS, build_report,
                         load_predictions, run_experiment)
from .gbm import GbmConfig
from .cnn import CnnConfig, TrainConfig
from .imaging import dump_pgm, load_image, preprocess, DEFAULT_SPACING_MM
from .lbp import PROFILES
from .metrics import delong_test
from .synth import SynthConfig, generate_cohort

log = logging.getLogger("texroi")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _setup_logging():
    level = os.environ.get("TEXROI_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _build_parser() -> _Parser:
    parser = _Parser(prog="texroi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parser_class=_Parser,
                       help="generate a synthetic cohort")
    p.add_argument("--subjects", type=int, required=True)
    p.add_argument("--knees-per-subject", type=int, default=2, choices=(1, 2))
    p.add_argument("--prevalence", type=float, default=0.173)
    p.add_argument("--texture-effect", type=float, default=1.0)
    p.add_argument("--clinical-effect", type=float, default=1.0)
    p.add_argument("--image-size", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("preprocess", parser_class=_Parser,
                       help="dump preprocessed images as PGM")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--spacing", type=float, default=DEFAULT_SPACING_MM,
                   help="native pixel spacing of the input images (mm)")
    p.add_argument("--order", default="truncate-first",
                   choices=("truncate-first", "normalize-first"))

    p = sub.add_parser("extract-features", parser_class=_Parser,
                       help="write LBP histogram rows per knee")
    p.add_argument("--manifest", required=True)
    p.add_argument("--roi", default="superior",
                   choices=("superior", "inferior", "whole"))
    p.add_argument("--lbp-profile", default="paper", choices=sorted(PROFILES))
    p.add_argument("--spacing", type=float, default=DEFAULT_SPACING_MM)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--dump-preprocessed", metavar="DIR", default=None)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("run", parser_class=_Parser,
                       help="run an experiment config end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the output directory")
    p.add_argument("--seed", type=int, default=None, help="override the seed")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--dump-preprocessed", metavar="DIR", default=None)

    p = sub.add_parser("compare", parser_class=_Parser,
                       help="DeLong test between two prediction CSVs")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)

    p = sub.add_parser("report", parser_class=_Parser,
                       help="rebuild report artifacts from prediction CSVs")
    p.add_argument("--predictions", required=True,
                   help="directory of <model>.csv prediction files")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--n-boot", type=int, default=2000)
    return parser


def _cmd_synth(ns) -> int:
    cfg = SynthConfig(
        n_subjects=ns.subjects,
        knees_per_subject=ns.knees_per_subject,
        prevalence=ns.prevalence,
        texture_effect=ns.texture_effect,
        clinical_effect=ns.clinical_effect,
        image_size=ns.image_size,
        seed=ns.seed,
    )
    manifest = generate_cohort(cfg, ns.out)
    print(manifest)
    return EXIT_OK


def _cmd_preprocess(ns) -> int:
    ds = load_manifest(ns.manifest)
    out = Path(ns.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in ds.samples:
        img = load_image(s.image_path, ns.spacing)
        pre = preprocess(img, s.side, order=ns.order)
        dump_pgm(pre, out / f"{s.knee_id}.pgm")
        log.info("preprocessed %s -> %dx%d", s.knee_id, pre.width, pre.height)
    print(f"wrote {len(ds)} images to {out}")
    return EXIT_OK


def _cmd_extract_features(ns) -> int:
    from .experiment import prepare_features

    ds = load_manifest(ns.manifest)
    cfg = ExperimentConfig(
        manifest=Path(ns.manifest), output_dir=Path("."),
        models=("model1",), lbp_profile=ns.lbp_profile,
        image_spacing=ns.spacing, threads=ns.threads,
        dump_preprocessed=Path(ns.dump_preprocessed) if ns.dump_preprocessed else None,
    )
    store = prepare_features(ds, cfg, roi_kinds=(ns.roi,), with_patches=False)
    bins = cfg.lbp_config.bins
    lines = ["knee_id," + ",".join(f"bin_{i}" for i in range(bins))]
    for kid, row in zip(store.knee_ids, store.lbp[ns.roi]):
        lines.append(kid + "," + ",".join(repr(v) for v in row))
    Path(ns.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(store.knee_ids)} rows to {ns.out}")
    return EXIT_OK


_CONFIG_KEYS = {
    "manifest", "output_dir", "models", "k", "seed", "image_spacing",
    "preprocess_order", "lbp_profile", "roi_width_mode", "patch_size",
    "gbm", "cnn", "train", "ci_method", "n_boot", "ci_level", "threads",
}


def load_experiment_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(doc) - _CONFIG_KEYS
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    if "manifest" not in doc:
        raise DataError("config must name a manifest")
    base = path.parent
    kwargs = dict(doc)
    kwargs["manifest"] = base / doc["manifest"]
    kwargs["output_dir"] = base / doc.get("output_dir", "out")
    if "models" in kwargs:
        kwargs["models"] = tuple(kwargs["models"])
    try:
        for section, cls in (("gbm", GbmConfig), ("cnn", CnnConfig),
                             ("train", TrainConfig)):
            if section in kwargs:
                params = dict(kwargs[section])
                if "conv_channels" in params:
                    params["conv_channels"] = tuple(params["conv_channels"])
                kwargs[section] = cls(**params)
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad config value: {exc}") from exc


def _cmd_run(ns) -> int:
    cfg = load_experiment_config(ns.config)
    if ns.out is not None:
        cfg.output_dir = Path(ns.out)
    if ns.seed is not None:
        cfg.seed = ns.seed
    if ns.threads is not None:
        cfg.threads = ns.threads
    if ns.dump_preprocessed is not None:
        cfg.dump_preprocessed = Path(ns.dump_preprocessed)
    ds = load_manifest(cfg.manifest)
    issues = validate_dataset(ds).issues
    if issues:
        for issue in issues[:10]:
            print(f"invalid dataset: {issue.knee_id}: {issue.message}",
                  file=sys.stderr)
        raise DataError(f"{len(issues)} dataset validation issues")
    report, oofs, errors = run_experiment(ds, cfg)
    for mid, exc in errors.items():
        print(f"model {mid} failed: {exc}", file=sys.stderr)
    if report is not None:
        print(Path(cfg.output_dir) / "report.json")
    return EXIT_DATA if errors else EXIT_OK


def _cmd_compare(ns) -> int:
    a = load_predictions(ns.a)
    b = load_predictions(ns.b)
    r = delong_test(a, b)
    print(f"auc_a={r.auc_a:.6f} auc_b={r.auc_b:.6f} "
          f"z={r.z:.6f} p={r.p_value:.6g}")
    return EXIT_OK


def _cmd_report(ns) -> int:
    pred_dir = Path(ns.predictions)
    files = sorted(pred_dir.glob("*.csv"))
    if not files:
        raise DataError(f"no prediction CSVs found in {pred_dir}")
    preds = {f.stem: load_predictions(f) for f in files}
    first = next(iter(preds.values()))
    for mid, p in preds.items():
        if p.knee_ids != first.knee_ids:
            raise DataError(f"prediction files disagree on knees ({mid})")
    cfg = ExperimentConfig(manifest=Path("-"), output_dir=Path(ns.out),
                           seed=ns.seed, n_boot=ns.n_boot)
    build_report(preds, None, None, cfg, out_dir=Path(ns.out))
    print(Path(ns.out) / "report.json")
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "preprocess": _cmd_preprocess,
    "extract-features": _cmd_extract_features,
    "run": _cmd_run,
    "compare": _cmd_compare,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    _setup_logging()
    parser = _build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[ns.command](ns)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
