"""``mgc`` command-line harness.

Every command exits 0 on success. On failure it prints one machine-parsable
line to stderr, ``mgc-error: <kind>: <ExceptionType>: <message>``, and exits
with the code listed for ``<kind>`` in :data:`EXIT_CODES`.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import audio, maskgen, pipeline, train
from .models import ClassifierConfig, FingerprintError, SegConfig
from .tensorio import ChecksumError

logger = logging.getLogger("mgc")

EXIT_CODES = {
    "usage": 2,
    "missing-input": 3,
    "checksum": 4,
    "fingerprint": 5,
    "training": 6,
    "invalid": 7,
}


def _root(args) -> Path:
    return pipeline.data_root(args.data_dir)


def _under(root: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() or p.exists() else root / p


def _train_config(args, **overrides) -> train.TrainConfig:
    cfg = train.load_config(args.config) if args.config else train.TrainConfig(**overrides)
    updates = {k: getattr(args, k) for k in ("epochs", "batch_size", "learning_rate", "seed")
               if getattr(args, k, None) is not None}
    return replace(cfg, **updates)


def cmd_synth(args) -> None:
    if args.n is not None:
        n_train, n_val, n_test = pipeline.corpus_split(args.n)
    else:
        n_train, n_val, n_test = args.n_train, args.n_val, args.n_test
    cfg = audio.CorpusConfig(n_train=n_train, n_val=n_val, n_test=n_test, seed=args.seed,
                             snr_range=(args.snr_min, args.snr_max))
    out = _root(args) / args.out
    print(pipeline.synth(out, cfg, args.mask_preset, args.force))


def cmd_transform(args) -> None:
    root = _root(args)
    out = root / (args.out or f"spec_{args.preset}")
    print(pipeline.transform(_under(root, args.manifest), out, args.preset, args.force))


def cmd_maskgen(args) -> None:
    root = _root(args)
    params = maskgen.CandidateParams(args.k, args.c, args.closing_iterations, args.min_area)
    ckpt = _under(root, args.checkpoint) if args.checkpoint else None
    print(pipeline.maskgen_stage(_under(root, args.manifest), root / args.out, args.method, ckpt, params,
                                 args.force))


def cmd_softmask(args) -> None:
    root = _root(args)
    print(pipeline.softmask_stage(_under(root, args.manifest), root / args.out, args.sigma, args.force))


def cmd_train_seg(args) -> None:
    root = _root(args)
    cfg = _train_config(args, **train.SEG_DEFAULTS)
    seg_cfg = SegConfig(widths=tuple(args.widths), seed=cfg.seed)
    print(pipeline.train_seg_stage(_under(root, args.manifest), _under(root, args.masks), root / args.out, cfg,
                                   args.n_train, args.n_val, seg_cfg, args.force, args.name))


def cmd_train_cls(args) -> None:
    root = _root(args)
    cfg = _train_config(args)
    updates = {"fusion": None if args.fusion == "none" else args.fusion} if args.fusion else {}
    if args.mask_source:
        updates["mask_source"] = args.mask_source
    if args.sigma is not None:
        updates["soft_sigma"] = None if args.sigma <= 0 else args.sigma
    cfg = replace(cfg, **updates)
    ccfg = ClassifierConfig(fusion=cfg.fusion, head="multilabel" if cfg.task == "multilabel" else "joint",
                            seed=cfg.seed)
    masks = _under(root, args.masks) if args.masks else None
    seg = _under(root, args.seg_checkpoint) if args.seg_checkpoint else None
    print(pipeline.train_cls_stage(_under(root, args.manifest), root / args.out, cfg, args.name, masks, seg, ccfg,
                                   args.n_train, args.n_val, args.force))


def cmd_eval(args) -> None:
    root = _root(args)
    masks = _under(root, args.masks) if args.masks else None
    seg = _under(root, args.seg_checkpoint) if args.seg_checkpoint else None
    out = root / args.out if args.out else None
    rep = pipeline.evaluate_stage(_under(root, args.checkpoint), _under(root, args.manifest), args.split, masks, seg,
                                  args.allow_shift, out, args.mask_source)
    print(json.dumps({"joint_accuracy": rep.joint_accuracy, "macro_f1": rep.macro_f1, "n": rep.n_samples}))


def cmd_ood_eval(args) -> None:
    root = _root(args)
    reps = pipeline.ood_eval(_under(root, args.checkpoint), _under(root, args.seg_checkpoint),
                             _under(root, args.origin), _under(root, args.shifted), root / args.out, args.split)
    print("Method,Training,Evaluation,Accuracy")
    for r in reps:
        m = r.meta
        print(f"{m['model']},{m['training']},{m['evaluation']},{r.joint_accuracy:.4f}")


def cmd_report(args) -> None:
    root = _root(args)
    paths = [_under(root, p) for p in args.reports]
    out = root / args.out
    rows = pipeline.write_report(paths, out, out.with_suffix(".dat"))
    print(f"{out} ({len(rows)} rows)")


def cmd_suite(args) -> None:
    cfg = pipeline.DESK_SUITE if args.desk else pipeline.SuiteConfig()
    if args.n is not None:
        n_train, n_val, n_test = pipeline.corpus_split(args.n)
        cfg = replace(cfg, corpus=replace(cfg.corpus, n_train=n_train, n_val=n_val, n_test=n_test))
    if args.seed is not None:
        cfg = replace(cfg, corpus=replace(cfg.corpus, seed=args.seed), seg=replace(cfg.seg, seed=args.seed),
                      cls=replace(cfg.cls, seed=args.seed))
    if args.epochs is not None:
        cfg = replace(cfg, cls=replace(cfg.cls, epochs=args.epochs))
    if args.seg_epochs is not None:
        cfg = replace(cfg, seg=replace(cfg.seg, epochs=args.seg_epochs))
    print(pipeline.run_suite(_root(args), cfg, args.force))


def _add_train_flags(p) -> None:
    p.add_argument("--config", help="TOML file with TrainConfig keys")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--name")
    p.add_argument("--out", default="models")
    p.add_argument("--n-train", type=int)
    p.add_argument("--n-val", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mgc", description="Mask-guided classification of bioacoustic spectrograms")
    ap.add_argument("--data-dir", help=f"artifact root (default ${pipeline.DATA_ENV} or ./mgc_data)")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render the synthetic corpus")
    p.add_argument("--n", type=int, help="total clips, split 4:1:1 train/val/test")
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-val", type=int, default=500)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--snr-min", type=float, default=-5.0)
    p.add_argument("--snr-max", type=float, default=15.0)
    p.add_argument("--mask-preset", default="origin", choices=("origin", "alt"))
    p.add_argument("--out", default="corpus")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("transform", help="waveforms -> spectrogram MGCT files")
    p.add_argument("--manifest", default="corpus/manifest.csv")
    p.add_argument("--preset", default="origin", choices=("origin", "alt"))
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("maskgen", help="binary masks from candidates or a segmentation checkpoint")
    p.add_argument("--manifest", default="spec_origin/manifest.csv")
    p.add_argument("--method", default="candidate", choices=("candidate", "segmentation"))
    p.add_argument("--checkpoint")
    p.add_argument("--k", type=int, default=31)
    p.add_argument("--c", type=float, default=2.0)
    p.add_argument("--closing-iterations", type=int, default=2)
    p.add_argument("--min-area", type=int, default=20)
    p.add_argument("--out", default="masks")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_maskgen)

    p = sub.add_parser("softmask", help="Gaussian soft masks from binary masks")
    p.add_argument("--manifest", default="masks/manifest.csv")
    p.add_argument("--sigma", type=float, default=maskgen.DEFAULT_SIGMA)
    p.add_argument("--out", default="soft_masks")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_softmask)

    p = sub.add_parser("train-seg", help="few-shot segmentation training")
    _add_train_flags(p)
    p.add_argument("--manifest", default="spec_origin/manifest.csv")
    p.add_argument("--masks", default="corpus/gt_masks.csv")
    p.add_argument("--widths", type=int, nargs="+", default=list(SegConfig().widths))
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_seg, name="seg", n_train=200, n_val=100)

    p = sub.add_parser("train-cls", help="train a (mask-guided) classifier")
    _add_train_flags(p)
    p.add_argument("--manifest", default="spec_origin/manifest.csv")
    p.add_argument("--fusion", choices=("none", "concat", "gated", "xattn"))
    p.add_argument("--mask-source", choices=train.MASK_SOURCES)
    p.add_argument("--masks", help="mask manifest (ground-truth, generated or soft)")
    p.add_argument("--seg-checkpoint")
    p.add_argument("--sigma", type=float, help="soft-mask sigma in pixels; 0 keeps binary masks")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train_cls, name="cls")

    p = sub.add_parser("eval", help="evaluate a classifier checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", default="spec_origin/manifest.csv")
    p.add_argument("--split", default="test")
    p.add_argument("--masks")
    p.add_argument("--seg-checkpoint")
    p.add_argument("--mask-source", choices=train.MASK_SOURCES)
    p.add_argument("--allow-shift", action="store_true", help="permit a transform preset other than training's")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ood-eval", help="evaluate one checkpoint under both transform presets")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--seg-checkpoint", required=True)
    p.add_argument("--origin", default="spec_origin/manifest.csv")
    p.add_argument("--shifted", default="spec_alt/manifest.csv")
    p.add_argument("--split", default="test")
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_ood_eval)

    p = sub.add_parser("report", help="aggregate metric reports into CSV + gnuplot data")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", default="reports/report.csv")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("suite", help="run the whole default experiment")
    p.add_argument("--n", type=int, help="total corpus clips (default 3000)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int, help="classifier epochs")
    p.add_argument("--seg-epochs", type=int)
    p.add_argument("--desk", action="store_true", help="fast recipe used by the acceptance tests (about 30 min)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_suite)
    return ap


def _classify(exc: BaseException) -> str:
    if isinstance(exc, (FileNotFoundError, pipeline.StageError, train.MissingMasksError, audio.WavError)):
        return "missing-input"
    if isinstance(exc, ChecksumError):
        return "checksum"
    if isinstance(exc, FingerprintError):
        return "fingerprint"
    if isinstance(exc, train.TrainingError):
        return "training"
    return "invalid"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (OSError, ValueError, RuntimeError, audio.WavError) as exc:
        kind = _classify(exc)
        msg = " ".join(str(exc).split())
        print(f"mgc-error: {kind}: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_CODES[kind]
    return 0


if __name__ == "__main__":
    sys.exit(main())
