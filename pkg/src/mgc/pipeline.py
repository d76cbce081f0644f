"""Manifest-driven experiment stages and the single-call MGC pipeline.

Every stage reads CSV manifests listing artifact files with their SHA-256
hashes, writes its own files plus a manifest, and skips outputs that already
exist unless ``force`` is set. Artifact manifests share the columns in
:data:`ARTIFACT_FIELDS`; stage-specific extras are appended after them.

Directory layout produced by :func:`run_suite` under the data root::

    corpus/      wav/, gt_masks/, manifest.csv, gt_masks.csv, corpus.json
    spec_origin/ spec_alt/             spectrogram MGCT files + manifest.csv
    masks_gen_origin/ masks_gen_alt/   segmentation masks (PGM) + manifest.csv
    models/      seg.ckpt, <variant>.ckpt, *_log.csv
    reports/     <variant>_<split>_<dist>.json, report.csv, report.dat
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import audio, maskgen, metrics, spectro, tensorio, train
from .models import (ClassifierConfig, FingerprintError, MGCClassifier, SegConfig, SegNet,
                     load_checkpoint, save_checkpoint)

logger = logging.getLogger(__name__)

DATA_ENV = "MGC_DATA_DIR"
ARTIFACT_FIELDS = ("clip_id", "split", "y_whistle", "y_beluga", "y_porpoise", "path", "sha256", "fingerprint")
CORPUS_FIELDS = audio.MANIFEST_FIELDS + ("split", "sha256")
REPORT_FIELDS = ("model", "fusion", "mask_source", "training", "evaluation", "split", "joint_accuracy",
                 "macro_f1", "hamming_multilabel", "hamming_multiclass", "n_samples")


class StageError(RuntimeError):
    """Missing, inconsistent or stale stage inputs."""


class MissingSegmentationError(StageError):
    """A generated-mask model was requested without a segmentation checkpoint."""


def data_root(path=None) -> Path:
    """Explicit path, else ``$MGC_DATA_DIR``, else ``./mgc_data``."""
    return Path(path or os.environ.get(DATA_ENV) or "mgc_data")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(rows: Sequence[dict], path, fields: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(fields), lineterminator="\n", extrasaction="ignore")
        wr.writeheader()
        wr.writerows(rows)
    tmp.replace(path)


def _write_text(text: str, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def read_rows(manifest) -> list[dict]:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise StageError(f"missing manifest {manifest}")
    return audio.read_manifest(manifest)


def resolve(manifest, row: dict, key: str = "path") -> Path:
    return Path(manifest).parent / row[key]


def verify(manifest, row: dict, key: str = "path") -> Path:
    """Path of a manifest entry after checking it exists and matches its hash."""
    p = resolve(manifest, row, key)
    if not p.is_file():
        raise StageError(f"{manifest}: missing artifact {p}")
    if sha256_file(p) != row["sha256"]:
        raise tensorio.ChecksumError(f"{manifest}: hash mismatch for {p}")
    return p


def _label(row: dict) -> tuple[int, int, int]:
    return int(row["y_whistle"]), int(row["y_beluga"]), int(row["y_porpoise"])


def _artifact_row(src: dict, path: Path, base: Path, fingerprint: str, **extra) -> dict:
    return {"clip_id": src["clip_id"], "split": src["split"], "y_whistle": src["y_whistle"],
            "y_beluga": src["y_beluga"], "y_porpoise": src["y_porpoise"],
            "path": path.relative_to(base).as_posix(), "sha256": sha256_file(path),
            "fingerprint": fingerprint, **extra}


# -- synth --------------------------------------------------------------------------

def corpus_split(n: int) -> tuple[int, int, int]:
    """Split ``n`` clips 4:1:1 like the default 2000/500/500 corpus."""
    n_val = n_test = n // 6
    return n - n_val - n_test, n_val, n_test


def synth(out_dir, cfg: audio.CorpusConfig = audio.CorpusConfig(), mask_preset: str = "origin",
          force: bool = False) -> Path:
    """Render the corpus WAVs and ground-truth masks; returns the corpus manifest."""
    out = Path(out_dir)
    stamp = json.dumps({"corpus": asdict(cfg), "mask_preset": mask_preset}, sort_keys=True)
    stamp_path = out / "corpus.json"
    if stamp_path.exists() and not force and stamp_path.read_text() != stamp:
        raise StageError(f"{out} holds a different corpus configuration; rerun with --force")
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "gt_masks").mkdir(parents=True, exist_ok=True)
    fp = spectro.preset(mask_preset).fingerprint()
    rows, gt_rows = [], []
    for rec in audio.corpus_records(cfg):
        wav = out / "wav" / f"{rec.clip_id}.wav"
        pgm = out / "gt_masks" / f"{rec.clip_id}.pgm"
        if force or not (wav.is_file() and pgm.is_file()):
            w, _, gt = audio.synthesize_clip(rec.spec, rec.seed, mask_preset)
            audio.write_wav(w, wav, codec="float32")
            tensorio.save_pgm(gt, pgm)
        y = rec.label
        row = {"clip_id": rec.clip_id, "wav_path": wav.relative_to(out).as_posix(), "y_whistle": y[0],
               "y_beluga": y[1], "y_porpoise": y[2], "snr_db": f"{rec.spec.snr_db:.6f}", "seed": rec.seed,
               "split": rec.split, "sha256": sha256_file(wav)}
        rows.append(row)
        gt_rows.append(_artifact_row(row, pgm, out, fp, source="ground_truth", producer="synthetic"))
    write_csv(rows, out / "manifest.csv", CORPUS_FIELDS)
    write_csv(gt_rows, out / "gt_masks.csv", ARTIFACT_FIELDS + ("source", "producer"))
    _write_text(stamp, stamp_path)
    return out / "manifest.csv"


# -- transform ------------------------------------------------------------------------

def transform(corpus_manifest, out_dir, preset_name: str = "origin", force: bool = False) -> Path:
    cfg = spectro.preset(preset_name)
    fp = cfg.fingerprint()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for row in read_rows(corpus_manifest):
        dst = out / f"{row['clip_id']}.mgct"
        if force or not dst.is_file():
            w = audio.read_wav(verify(corpus_manifest, row, "wav_path"))
            tensorio.save(spectro.transform(w, preset_name).pixels, dst)
        rows.append(_artifact_row(row, dst, out, fp, preset=preset_name))
    write_csv(rows, out / "manifest.csv", ARTIFACT_FIELDS + ("preset",))
    return out / "manifest.csv"


# -- datasets -------------------------------------------------------------------------

@dataclass
class Dataset:
    ids: list[str]
    specs: np.ndarray
    labels: np.ndarray
    fingerprint: str
    masks: np.ndarray | None = None
    preset: str = ""


def _select(rows: list[dict], split: str | None, limit: int | None) -> list[dict]:
    rows = [r for r in rows if split is None or r["split"] == split]
    return rows[:limit] if limit is not None else rows


def load_specs(spec_manifest, split: str | None = None, limit: int | None = None) -> Dataset:
    rows = _select(read_rows(spec_manifest), split, limit)
    if not rows:
        raise StageError(f"{spec_manifest}: no clips in split {split!r}")
    fps = {r["fingerprint"] for r in rows}
    if len(fps) != 1:
        raise FingerprintError(f"{spec_manifest}: mixed spectrogram fingerprints {sorted(fps)}")
    specs = np.stack([tensorio.load(verify(spec_manifest, r)).astype(np.float64) for r in rows])
    return Dataset([r["clip_id"] for r in rows], specs, np.array([_label(r) for r in rows]), fps.pop(),
                   preset=rows[0].get("preset", ""))


def load_masks(mask_manifest, data: Dataset, sigma: float | None) -> np.ndarray:
    """Masks for exactly the clips of ``data``; binary masks are softened with ``sigma``."""
    rows = {r["clip_id"]: r for r in read_rows(mask_manifest)}
    missing = [c for c in data.ids if c not in rows]
    if missing:
        raise StageError(f"{mask_manifest}: no mask for {len(missing)} clip(s), e.g. {missing[0]}")
    sel = [rows[c] for c in data.ids]
    bad = {r["fingerprint"] for r in sel} - {data.fingerprint}
    if bad:
        raise FingerprintError(f"{mask_manifest}: masks were made for spectrograms {sorted(bad)}, "
                               f"data is {data.fingerprint}")
    out = []
    for r in sel:
        p = verify(mask_manifest, r)
        if p.suffix == ".pgm":
            out.append(tensorio.load_pgm(p))
        else:
            if sigma is not None and float(r.get("sigma", sigma)) != sigma:
                raise StageError(f"{mask_manifest}: soft masks use sigma {r['sigma']}, expected {sigma}")
            out.append(tensorio.load(p).astype(np.float64))
    masks = np.stack(out)
    if masks.shape != data.specs.shape:
        raise StageError(f"{mask_manifest}: mask shape {masks.shape[1:]} != spectrogram {data.specs.shape[1:]}")
    if masks.dtype == np.uint8:
        return maskgen.soften_batch(masks, sigma)
    return masks


def mask_producer(mask_manifest) -> str:
    prods = {r.get("producer", "") for r in read_rows(mask_manifest)}
    return prods.pop() if len(prods) == 1 else ""


# -- maskgen / softmask ------------------------------------------------------------------

def maskgen_stage(spec_manifest, out_dir, method: str = "candidate", checkpoint=None,
                  params: maskgen.CandidateParams = maskgen.CandidateParams(), force: bool = False,
                  batch_size: int = 16) -> Path:
    """Binary masks from signal processing (``candidate``) or a segmentation checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = read_rows(spec_manifest)
    if method == "segmentation":
        if checkpoint is None:
            raise MissingSegmentationError("maskgen --method segmentation needs --checkpoint")
        seg = load_checkpoint(checkpoint, expect="segmentation").model
        producer, source = seg.fingerprint(), "generated"
    elif method == "candidate":
        seg = None
        producer = hashlib.sha256(json.dumps(asdict(params), sort_keys=True).encode()).hexdigest()[:16]
        source = "candidate"
    else:
        raise ValueError(f"unknown mask method {method!r}")
    todo = [r for r in rows if force or not (out / f"{r['clip_id']}.pgm").is_file()]
    for i in range(0, len(todo), batch_size):
        chunk = todo[i:i + batch_size]
        specs = np.stack([tensorio.load(verify(spec_manifest, r)).astype(np.float64) for r in chunk])
        if seg is not None:
            masks = seg.predict_mask(specs)
        else:
            masks = np.stack([maskgen.candidate_mask(s, params) for s in specs])
        for r, m in zip(chunk, masks):
            tensorio.save_pgm(m, out / f"{r['clip_id']}.pgm")
    out_rows = [_artifact_row(r, out / f"{r['clip_id']}.pgm", out, r["fingerprint"], source=source,
                              producer=producer) for r in rows]
    write_csv(out_rows, out / "manifest.csv", ARTIFACT_FIELDS + ("source", "producer"))
    return out / "manifest.csv"


def softmask_stage(mask_manifest, out_dir, sigma: float = maskgen.DEFAULT_SIGMA, force: bool = False) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for r in read_rows(mask_manifest):
        dst = out / f"{r['clip_id']}.mgct"
        m = tensorio.load_pgm(verify(mask_manifest, r))
        sm = maskgen.soften(m, sigma)
        if force or not dst.is_file():
            tensorio.save(sm.pixels, dst)
        rows.append(_artifact_row(r, dst, out, r["fingerprint"], source=r.get("source", ""),
                                  producer=r.get("producer", ""), sigma=sigma, empty=int(sm.empty)))
    write_csv(rows, out / "manifest.csv", ARTIFACT_FIELDS + ("source", "producer", "sigma", "empty"))
    return out / "manifest.csv"


# -- training stages ----------------------------------------------------------------------

def train_seg_stage(spec_manifest, mask_manifest, out_dir, cfg: train.TrainConfig, n_train: int = 200,
                    n_val: int | None = 100, seg_cfg: SegConfig | None = None, force: bool = False,
                    name: str = "seg") -> Path:
    """Few-shot segmentation on the first ``n_train`` training clips; returns the checkpoint path."""
    out = Path(out_dir)
    ckpt = out / f"{name}.ckpt"
    if ckpt.is_file() and not force:
        return ckpt
    out.mkdir(parents=True, exist_ok=True)
    tr = load_specs(spec_manifest, "train", n_train)
    if len(tr.ids) < n_train:
        raise StageError(f"{spec_manifest}: only {len(tr.ids)} training clips, need {n_train}")
    tr_masks = load_masks(mask_manifest, tr, None).astype(np.uint8)
    val = None
    if n_val != 0:
        va = load_specs(spec_manifest, "val", n_val)
        val = (va.specs, load_masks(mask_manifest, va, None).astype(np.uint8))
    seg_cfg = seg_cfg or SegConfig(in_hw=tr.specs.shape[1:], seed=cfg.seed)
    res = train.train_segmentation(tr.specs, tr_masks, cfg, val=val, seg_cfg=seg_cfg,
                                   log_path=out / f"{name}_log.csv")
    meta = {"fingerprint": tr.fingerprint, "preset": tr.preset, "n_train": n_train}
    save_checkpoint(res.model, ckpt, res.best_epoch, {"val_iou": res.best_metric}, cfg.config_hash(), meta)
    return ckpt


def _generated_masks(seg_checkpoint, data: Dataset, sigma: float | None, mask_manifest=None) -> tuple:
    if seg_checkpoint is None or not Path(seg_checkpoint).is_file():
        raise MissingSegmentationError(f"generated masks need a segmentation checkpoint (got {seg_checkpoint})")
    seg = load_checkpoint(seg_checkpoint, expect="segmentation").model
    if mask_manifest is not None:
        if mask_producer(mask_manifest) != seg.fingerprint():
            raise FingerprintError(f"{mask_manifest}: masks were not produced by {seg_checkpoint}")
        return load_masks(mask_manifest, data, sigma), seg.fingerprint()
    return maskgen.soften_batch(train.seg_predict(seg, data.specs), sigma), seg.fingerprint()


def classifier_inputs(cfg_fusion, mask_source, sigma, data: Dataset, mask_manifest=None, seg_checkpoint=None):
    """Mask array for a classifier (or None for the baseline) plus its producer id."""
    if cfg_fusion is None:
        return None, ""
    if mask_source == "generated":
        return _generated_masks(seg_checkpoint, data, sigma, mask_manifest)
    if mask_manifest is None:
        raise train.MissingMasksError("ground-truth masks need a mask manifest")
    return load_masks(mask_manifest, data, sigma), mask_producer(mask_manifest)


def train_cls_stage(spec_manifest, out_dir, cfg: train.TrainConfig, name: str = "cls", mask_manifest=None,
                    seg_checkpoint=None, cls_cfg: ClassifierConfig | None = None, n_train: int | None = None,
                    n_val: int | None = None, force: bool = False) -> Path:
    out = Path(out_dir)
    ckpt = out / f"{name}.ckpt"
    if ckpt.is_file() and not force:
        return ckpt
    out.mkdir(parents=True, exist_ok=True)
    tr = load_specs(spec_manifest, "train", n_train)
    tr_masks, producer = classifier_inputs(cfg.fusion, cfg.mask_source, cfg.soft_sigma, tr, mask_manifest,
                                           seg_checkpoint)
    val = None
    if n_val != 0:
        va = load_specs(spec_manifest, "val", n_val)
        va_masks, _ = classifier_inputs(cfg.fusion, cfg.mask_source, cfg.soft_sigma, va, mask_manifest,
                                        seg_checkpoint)
        val = (va.specs, va_masks, va.labels)
    res = train.train_classifier(tr.specs, tr.labels, cfg, masks=tr_masks, val=val, cls_cfg=cls_cfg,
                                 log_path=out / f"{name}_log.csv")
    meta = {"name": name, "fingerprint": tr.fingerprint, "preset": tr.preset, "fusion": cfg.fusion,
            "mask_source": cfg.mask_source if cfg.fusion else "none", "sigma": cfg.soft_sigma,
            "threshold": cfg.threshold, "mask_producer": producer}
    save_checkpoint(res.model, ckpt, res.best_epoch, {"val_joint_acc": res.best_metric}, cfg.config_hash(), meta)
    return ckpt


# -- evaluation -----------------------------------------------------------------------------

def evaluate_stage(checkpoint, spec_manifest, split: str = "test", mask_manifest=None, seg_checkpoint=None,
                   allow_shift: bool = False, out_path=None, mask_source: str | None = None) -> metrics.MetricsReport:
    """Evaluate a classifier checkpoint; ``mask_source`` overrides the training-time source."""
    ck = load_checkpoint(checkpoint, expect="classifier")
    model: MGCClassifier = ck.model
    meta = ck.meta
    data = load_specs(spec_manifest, split)
    if data.fingerprint != meta.get("fingerprint") and not allow_shift:
        raise FingerprintError(f"{checkpoint} was trained on spectrograms {meta.get('fingerprint')}, "
                               f"{spec_manifest} holds {data.fingerprint}; pass --allow-shift for OOD evaluation")
    source = mask_source or meta.get("mask_source", "none")
    sigma = meta.get("sigma")
    masks, _ = classifier_inputs(model.cfg.fusion, source, sigma, data, mask_manifest, seg_checkpoint)
    logits = train.cls_logits(model, data.specs, masks)
    preds = train.predict_labels(logits, model.cfg.head, meta.get("threshold", 0.5))
    rep_meta = {"model": meta.get("name", Path(checkpoint).stem), "fusion": model.cfg.fusion or "none",
                "mask_source": meta.get("mask_source", "none"), "eval_masks": source if model.uses_mask else "none",
                "training": meta.get("preset", ""), "evaluation": data.preset, "split": split}
    rep = metrics.evaluate(preds, data.labels, rep_meta)
    if out_path is not None:
        _write_text(rep.to_json(), out_path)
    return rep


def ood_eval(checkpoint, seg_checkpoint, origin_manifest, shifted_manifest, out_dir, split: str = "test",
             origin_masks=None, shifted_masks=None) -> list[metrics.MetricsReport]:
    """Evaluate one origin-trained model on both presets.

    Mask-guided models get masks from the segmentation checkpoint applied to
    each preset's spectrograms (pass mask manifests to reuse stored ones).
    """
    ck = load_checkpoint(checkpoint, expect="classifier")
    name = ck.meta.get("name", Path(checkpoint).stem)
    reports = []
    for manifest, masks in ((origin_manifest, origin_masks), (shifted_manifest, shifted_masks)):
        data_preset = read_rows(manifest)[0].get("preset", "")
        path = Path(out_dir) / f"{name}_{split}_ood-{data_preset}.json"
        reports.append(evaluate_stage(checkpoint, manifest, split, masks, seg_checkpoint, allow_shift=True,
                                      out_path=path, mask_source="generated"))
    return reports


# -- report ------------------------------------------------------------------------------------

def report_rows(reports: Sequence[metrics.MetricsReport]) -> list[dict]:
    rows = []
    for r in reports:
        m = r.meta
        rows.append({"model": m.get("model", ""), "fusion": m.get("fusion", ""),
                     "mask_source": m.get("mask_source", ""), "training": m.get("training", ""),
                     "evaluation": m.get("evaluation", "") + ("" if m.get("eval_masks") in (None, "none",
                                                               m.get("mask_source")) else f"+{m['eval_masks']}"),
                     "split": m.get("split", ""), "joint_accuracy": f"{r.joint_accuracy:.6f}",
                     "macro_f1": f"{r.macro_f1:.6f}", "hamming_multilabel": f"{r.hamming_multilabel:.6f}",
                     "hamming_multiclass": f"{r.hamming_multiclass:.6f}", "n_samples": r.n_samples})
    rows.sort(key=lambda x: (x["model"], x["fusion"], x["mask_source"], x["evaluation"], x["split"]))
    return rows


def write_report(report_paths: Sequence, out_csv, out_dat=None) -> list[dict]:
    reports = []
    for p in report_paths:
        reports.append(metrics.MetricsReport.from_json(Path(p).read_text(), source=str(p)))
    rows = report_rows(reports)
    write_csv(rows, out_csv, REPORT_FIELDS)
    if out_dat is not None:
        lines = ["# gnuplot: plot 'report.dat' using 0:3:xtic(1) with boxes",
                 "# label evaluation joint_accuracy macro_f1"]
        for r in rows:
            lines.append(f"\"{r['model']}\" {r['evaluation'] or '-'} {r['joint_accuracy']} {r['macro_f1']}")
        _write_text("\n".join(lines) + "\n", out_dat)
    return rows


# -- single-call pipeline -------------------------------------------------------------------------

@dataclass
class MGCPipeline:
    """Waveform -> spectrogram -> (mask -> soft mask) -> fused classifier -> label vector."""

    classifier: MGCClassifier
    segmenter: SegNet | None = None
    preset: str = "origin"
    sigma: float | None = maskgen.DEFAULT_SIGMA
    threshold: float = 0.5

    @classmethod
    def from_checkpoints(cls, classifier_ckpt, seg_ckpt=None, preset: str | None = None) -> "MGCPipeline":
        ck = load_checkpoint(classifier_ckpt, expect="classifier")
        seg = load_checkpoint(seg_ckpt, expect="segmentation").model if seg_ckpt else None
        if ck.model.uses_mask and seg is None:
            raise MissingSegmentationError("a mask-guided pipeline needs a segmentation checkpoint")
        return cls(ck.model, seg, preset or ck.meta.get("preset") or "origin", ck.meta.get("sigma"),
                   ck.meta.get("threshold", 0.5))

    def logits(self, w: audio.Waveform) -> np.ndarray:
        # round through the stored artifact dtype so results match the staged pipeline
        spec = spectro.transform(w, self.preset).pixels[None].astype(tensorio.DTYPES[0]).astype(np.float64)
        mask = None
        if self.classifier.uses_mask:
            if self.segmenter is None:
                raise MissingSegmentationError("no segmentation model attached")
            mask = maskgen.soften_batch(self.segmenter.predict_mask(spec), self.sigma)
        return self.classifier(spec, mask).data[0]

    def predict(self, w: audio.Waveform) -> tuple[int, int, int]:
        return tuple(int(v) for v in train.predict_labels(self.logits(w)[None], self.classifier.cfg.head,
                                                           self.threshold)[0])


# -- default experiment suite ------------------------------------------------------------------------

@dataclass(frozen=True)
class Variant:
    name: str
    fusion: str | None
    mask_source: str = "generated"


DEFAULT_VARIANTS = (
    Variant("baseline", None, "ground_truth"),
    Variant("xattn_hq", "xattn", "ground_truth"),
    Variant("xattn_gen", "xattn", "generated"),
    Variant("concat_gen", "concat", "generated"),
    Variant("gated_gen", "gated", "generated"),
)


@dataclass(frozen=True)
class SuiteConfig:
    corpus: audio.CorpusConfig = audio.CorpusConfig()
    seg: train.TrainConfig = train.TrainConfig(**train.SEG_DEFAULTS)
    seg_widths: tuple[int, ...] = (4, 8, 16, 32)
    n_seg_train: int = 200
    n_seg_val: int | None = 100
    cls: train.TrainConfig = train.TrainConfig()
    cls_widths: tuple[int, ...] = (8, 16, 24, 32, 48)
    n_cls_val: int | None = None
    variants: tuple[Variant, ...] = DEFAULT_VARIANTS
    shifted_preset: str = "alt"


# Desk recipe: narrower classifier, fewer epochs, higher learning rate. About 30 min on one core.
DESK_SUITE = SuiteConfig(
    seg=replace(train.TrainConfig(**train.SEG_DEFAULTS), epochs=25),
    cls=train.TrainConfig(epochs=6, learning_rate=1e-3),
    cls_widths=(4, 8, 16, 24, 32),
)


def run_suite(root, cfg: SuiteConfig = SuiteConfig(), force: bool = False) -> Path:
    """Run every stage of the experiment and return the report CSV path.

    Stage wall-clock times go to ``reports/timings.json`` (kept out of the CSV
    so reruns stay byte-identical).
    """
    root = data_root(root)
    t0 = time.perf_counter()
    timings = {}

    def lap(name):
        timings[name] = time.perf_counter() - t0 - sum(timings.values())
    corpus = synth(root / "corpus", cfg.corpus, force=force)
    gt = root / "corpus" / "gt_masks.csv"
    specs = {p: transform(corpus, root / f"spec_{p}", p, force=force) for p in ("origin", cfg.shifted_preset)}
    lap("data")
    logger.info("data ready after %.1fs", time.perf_counter() - t0)
    models = root / "models"
    seg_cfg = SegConfig(widths=cfg.seg_widths, seed=cfg.seg.seed)
    seg = train_seg_stage(specs["origin"], gt, models, cfg.seg, cfg.n_seg_train, cfg.n_seg_val, seg_cfg, force)
    lap("segmentation")
    logger.info("segmentation ready after %.1fs", time.perf_counter() - t0)
    gen = {p: maskgen_stage(specs[p], root / f"masks_gen_{p}", "segmentation", seg, force=force) for p in specs}
    lap("maskgen")
    reports = []
    for v in cfg.variants:
        tcfg = replace(cfg.cls, fusion=v.fusion, mask_source=v.mask_source)
        ccfg = ClassifierConfig(fusion=v.fusion, head="multilabel" if tcfg.task == "multilabel" else "joint",
                                spec_widths=cfg.cls_widths, seed=tcfg.seed)
        masks = gt if v.mask_source == "ground_truth" else gen["origin"]
        ckpt = train_cls_stage(specs["origin"], models, tcfg, v.name, masks if v.fusion else None, seg, ccfg,
                               n_val=cfg.n_cls_val, force=force)
        out = root / "reports" / f"{v.name}_test_origin.json"
        evaluate_stage(ckpt, specs["origin"], "test", masks if v.fusion else None, seg, out_path=out)
        reports.append(out)
        if v.fusion is None or v.mask_source == "generated":
            ood_eval(ckpt, seg, specs["origin"], specs[cfg.shifted_preset], root / "reports",
                     origin_masks=gen["origin"], shifted_masks=gen[cfg.shifted_preset])
            reports.append(root / "reports" / f"{v.name}_test_ood-{cfg.shifted_preset}.json")
        lap(v.name)
        logger.info("variant %s done after %.1fs", v.name, time.perf_counter() - t0)
    out_csv = root / "reports" / "report.csv"
    write_report(reports, out_csv, root / "reports" / "report.dat")
    timings["total"] = time.perf_counter() - t0
    _write_text(json.dumps(timings, indent=2) + "\n", root / "reports" / "timings.json")
    return out_csv
