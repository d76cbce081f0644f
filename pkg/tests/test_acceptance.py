"""Acceptance criteria A1-A10.

The experiment criteria (A5-A7, A9, A10) share one run of the desk suite. It
takes about half an hour on one CPU core; set ``MGC_ACCEPT_DIR`` to reuse the
artifacts of an earlier run while iterating on the assertions (runtime checks
are then meaningless).
"""

import csv
import json
import math
import os
import shutil
import time

import numpy as np
import pytest

from conftest import record_note
from mgc import audio, metrics, pipeline, spectro, train
from mgc.maskgen import distance_transform, soft_mask
from mgc.models import (ClassifierConfig, Embedding, Fusion, Head, MaskEncoder, MGCClassifier, SegConfig, SegNet,
                        SpecEncoder, load_checkpoint, save_checkpoint)
from mgc.nn import Conv2d, ConvBlock, LayerNorm, Linear, Parameter, Tensor, grad_check
from mgc.nn import functional as F


# -- shared experiment run ----------------------------------------------------------------

@pytest.fixture(scope="session")
def suite(tmp_path_factory):
    reuse = os.environ.get("MGC_ACCEPT_DIR")
    root = pipeline.data_root(reuse) if reuse else tmp_path_factory.mktemp("suite")
    report = pipeline.run_suite(root, pipeline.DESK_SUITE)
    timings = json.loads((root / "reports" / "timings.json").read_text())
    with open(report, newline="") as f:
        rows = list(csv.DictReader(f))
    acc = {(r["model"], r["evaluation"]): float(r["joint_accuracy"]) for r in rows}
    return {"root": root, "report": report, "timings": timings, "acc": acc}


# -- A1 -----------------------------------------------------------------------------------

def _layer_checks():
    rng = np.random.default_rng(0)

    def p(*shape, scale=1.0):
        return Parameter(rng.normal(scale=scale, size=shape))

    def emb(t=4, d=6):
        return Embedding(p(2, d), p(2, t, d), "x")

    checks = {}
    x4 = p(2, 2, 6, 6)
    c4 = rng.normal(size=(2, 3, 6, 6))
    conv = Conv2d(rng, 2, 3, 3)
    checks["conv2d"] = (lambda: (conv(x4) * c4).sum(), [x4] + conv.parameters())
    conv_s = Conv2d(rng, 2, 3, 3, stride=2)
    c4s = rng.normal(size=(2, 3, 3, 3))
    checks["conv2d_stride2"] = (lambda: (conv_s(x4) * c4s).sum(), [x4] + conv_s.parameters())
    lin = Linear(rng, 4, 3)
    x2 = p(5, 4)
    c2 = rng.normal(size=(5, 3))
    checks["linear"] = (lambda: (lin(x2) * c2).sum(), [x2] + lin.parameters())
    ln = LayerNorm((2, 1, 1), n_axes=3)
    ln.gamma.data = rng.normal(size=(2, 1, 1))
    c4b = rng.normal(size=(2, 2, 6, 6))
    checks["layer_norm"] = (lambda: (ln(x4) * c4b).sum(), [x4] + ln.parameters())
    blk = ConvBlock(rng, 2, 3, pool=2)
    c4p = rng.normal(size=(2, 3, 3, 3))
    checks["conv_block"] = (lambda: (blk(x4) * c4p).sum(), [x4] + blk.parameters())
    r = rng.normal(size=(4, 5))
    xr = Parameter(np.where(np.abs(r) < 0.05, 0.5, r))  # stay off the kink
    cr = rng.normal(size=(4, 5))
    checks["relu"] = (lambda: (F.relu(xr) * cr).sum(), [xr])
    checks["sigmoid"] = (lambda: (F.sigmoid(x2 * 3.0) * x2).sum(), [x2])
    checks["softmax"] = (lambda: (F.softmax(x2, axis=1) * rng_c(5, 4)).sum(), [x2])
    checks["log_softmax"] = (lambda: (F.log_softmax(x2, axis=0) * rng_c(5, 4)).sum(), [x2])
    xp = p(2, 2, 4, 6)
    cp = rng.normal(size=(2, 2, 2, 3))
    checks["max_pool2d"] = (lambda: (F.max_pool2d(xp, 2) * cp).sum(), [xp])
    checks["avg_pool2d"] = (lambda: (F.avg_pool2d(xp, 2) * cp).sum(), [xp])
    cg = rng.normal(size=(2, 2))
    checks["global_avg_pool"] = (lambda: (F.global_avg_pool(xp) * cg).sum(), [xp])
    cu = rng.normal(size=(2, 2, 8, 12))
    checks["bilinear_upsample"] = (lambda: (F.bilinear_upsample(xp, 2) * cu).sum(), [xp])
    q, k, v = p(2, 4, 3), p(2, 5, 3), p(2, 5, 2)
    ca = rng.normal(size=(2, 4, 2))
    checks["scaled_dot_attention"] = (lambda: (F.scaled_dot_attention(q, k, v)[0] * ca).sum(), [q, k, v])
    z = p(6, 8)
    t = rng.integers(0, 8, size=6)
    checks["cross_entropy"] = (lambda: F.cross_entropy(z, t), [z])
    zp = p(2, 2, 3, 3)
    tp = rng.integers(0, 2, size=(2, 3, 3))
    checks["pixelwise_cross_entropy"] = (lambda: train.pixelwise_ce(zp, tp), [zp])
    yb = rng.integers(0, 2, size=(6, 3))
    zb = p(6, 3)
    checks["bce_with_logits"] = (lambda: F.bce_with_logits(zb, yb), [zb])
    for kind in ("concat", "gated", "xattn"):
        fu = Fusion(rng, kind, 6)
        es, em = emb(), emb(t=3)
        cf = rng.normal(size=(2, 6))
        checks[f"fusion_{kind}"] = (lambda fu=fu, es=es, em=em, cf=cf: (fu(es, em) * cf).sum(),
                                    fu.parameters() + [es.pooled, es.tokens, em.pooled, em.tokens])
    head = Head(rng, 6, 5, 8)
    fused, es = p(2, 6), p(2, 6)
    checks["head"] = (lambda: F.cross_entropy(head(fused, es) * 0.1, np.array([1, 4])),
                      head.parameters() + [fused, es])
    senc = SpecEncoder(rng, (2, 3, 3, 4, 4), 6)
    menc = MaskEncoder(rng, (2, 3, 3), 6)
    xi = Tensor(rng.normal(size=(2, 1, 16, 16)))
    ce = rng.normal(size=(2, 1, 6))
    checks["spec_encoder"] = (lambda: (senc(xi)[0] * ce).sum() + senc(xi)[1].sum(), senc.parameters())
    checks["mask_encoder"] = (lambda: (menc(xi)[0] * ce).sum() + menc(xi)[1].sum(), menc.parameters())
    return checks


_C_CACHE = {}


def rng_c(*shape):
    if shape not in _C_CACHE:
        _C_CACHE[shape] = np.random.default_rng(sum(shape)).normal(size=shape)
    return _C_CACHE[shape]


def test_a1_gradient_integrity():
    t0 = time.perf_counter()
    worst = {}
    for name, (f, params) in _layer_checks().items():
        worst[name] = grad_check(f, params, eps=1e-5)
    rng = np.random.default_rng(1)
    seg = SegNet(SegConfig(in_hw=(16, 16), widths=(2, 3, 4, 4)))
    xs = Tensor(rng.normal(size=(1, 1, 16, 16)))
    ys = rng.integers(0, 2, size=(1, 16, 16))
    worst["segnet_16x16"] = grad_check(lambda: train.pixelwise_ce(seg(xs), ys), seg.parameters())
    for fusion in (None, "concat", "gated", "xattn"):
        model = MGCClassifier(ClassifierConfig(fusion=fusion, in_hw=(16, 16), spec_widths=(2, 3, 3, 4, 4),
                                               mask_widths=(2, 3, 3), dim=6, hidden=5))
        model.head.fc2.weight.data *= 0.1  # unsaturated softmax, see test_models
        x = Tensor(rng.normal(size=(2, 1, 16, 16)))
        m = Tensor(rng.random((2, 1, 16, 16))) if fusion else None
        worst[f"classifier_{fusion or 'baseline'}_16x16"] = grad_check(
            lambda: train.joint_ce(model(x, m), np.array([3, 6])), model.parameters())
    elapsed = time.perf_counter() - t0
    record_note("A1", f"{len(worst)} checks, max rel err {max(worst.values()):.2e}, {elapsed:.0f}s")
    bad = {k: v for k, v in worst.items() if not v <= 1e-4}
    assert not bad, bad
    assert elapsed < 120


# -- A2 / A3 --------------------------------------------------------------------------------

def _brute_distance(mask):
    fg = np.argwhere(mask)
    h, w = mask.shape
    out = np.full((h, w), np.inf)
    for y in range(h):
        for x in range(w):
            if len(fg):
                out[y, x] = math.sqrt(min((y - a) ** 2 + (x - b) ** 2 for a, b in fg))
    return out


def test_a2_distance_transform_exact():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        density = rng.choice([0.002, 0.01, 0.05, 0.2, 0.6])
        mask = rng.random((32, 32)) < density
        if i == 0:
            mask[:] = False
            mask[rng.integers(32), rng.integers(32)] = True
        got, ref = distance_transform(mask), _brute_distance(mask)
        assert np.array_equal(np.isinf(got), np.isinf(ref))
        fin = np.isfinite(ref)
        worst = max(worst, float(np.abs(got[fin] - ref[fin]).max()) if fin.any() else 0.0)
    record_note("A2", f"max abs err {worst:.1e} over 50 masks")
    assert worst <= 1e-9


def test_a3_soft_mask_analytics():
    for sigma in (0.5, 1.0, 6.0, 17.3):
        s = soft_mask(np.array([0.0, sigma, 3 * sigma]), sigma).pixels
        assert s[0] == 1.0
        assert abs(s[1] - math.exp(-0.5)) <= 1e-12
        assert abs(s[2] - math.exp(-4.5)) <= 1e-12
    rng = np.random.default_rng(3)
    for _ in range(1000):
        sigma = float(rng.uniform(0.5, 20))
        d = rng.exponential(rng.uniform(1, 30), size=(16, 16))
        s = soft_mask(d, sigma).pixels
        assert np.all((s > 0) | (d > 30 * sigma)) and np.all(s <= 1)
        order = np.argsort(d, axis=None)
        assert np.all(np.diff(s.ravel()[order]) <= 0)
        assert np.all(s[d == 0] == 1)
    empty = soft_mask(np.full((4, 4), np.inf), 6.0)
    assert empty.empty and not empty.pixels.any()


# -- A4 ---------------------------------------------------------------------------------------

def _reference_metrics(preds, truth):
    n = len(preds)
    exact = sum(1 for p, t in zip(preds, truth) if list(p) == list(t))
    wrong = sum(1 for p, t in zip(preds, truth) for a, b in zip(p, t) if a != b)
    prf = []
    for k in range(3):
        tp = sum(1 for p, t in zip(preds, truth) if p[k] == 1 and t[k] == 1)
        fp = sum(1 for p, t in zip(preds, truth) if p[k] == 1 and t[k] == 0)
        fn = sum(1 for p, t in zip(preds, truth) if p[k] == 0 and t[k] == 1)
        pr = tp / (tp + fp) if tp + fp else 0.0
        rc = tp / (tp + fn) if tp + fn else 0.0
        prf.append((pr, rc, 2 * pr * rc / (pr + rc) if pr + rc else 0.0))
    cm = [[0] * 8 for _ in range(8)]
    for p, t in zip(preds, truth):
        cm[int("".join(map(str, t)), 2)][int("".join(map(str, p)), 2)] += 1
    return {"acc": exact / n, "ham_ml": wrong / (3 * n), "ham_mc": (n - exact) / n, "prf": prf,
            "macro": sum(f for _, _, f in prf) / 3, "cm": cm, "exact": exact}


def test_a4_metric_oracles():
    rng = np.random.default_rng(4)
    for _ in range(1000):
        n = int(rng.integers(1, 64))
        truth = rng.integers(0, 2, size=(n, 3))
        preds = np.where(rng.random((n, 3)) < rng.uniform(0, 0.7), 1 - truth, truth)
        ref = _reference_metrics(preds.tolist(), truth.tolist())
        rep = metrics.evaluate(preds, truth)
        assert rep.joint_accuracy == ref["acc"]
        assert rep.hamming_multilabel == ref["ham_ml"]
        assert rep.hamming_multiclass == ref["ham_mc"]
        assert list(zip(rep.precision, rep.recall, rep.f1)) == ref["prf"]
        assert rep.macro_f1 == ref["macro"]
        assert rep.confusion == ref["cm"]
        # joint accuracy = 1 - multiclass hamming: exact on counts, within one ulp as floats
        assert round(rep.joint_accuracy * n) + round(rep.hamming_multiclass * n) == n
        assert abs(rep.joint_accuracy - (1 - rep.hamming_multiclass)) <= 2.0 ** -52


# -- A5 - A7 ----------------------------------------------------------------------------------

def test_a5_few_shot_segmentation(suite):
    ck = load_checkpoint(suite["root"] / "models" / "seg.ckpt", expect="segmentation")
    cfg = pipeline.DESK_SUITE
    iou = ck.metrics["val_iou"]
    seconds = suite["timings"]["segmentation"]
    record_note("A5", f"val IoU {iou:.3f} at epoch {ck.epoch}/{cfg.seg.epochs}, {seconds:.0f}s")
    assert ck.meta["n_train"] == 200 and cfg.seg.augment_hflip
    assert cfg.seg.epochs <= 40
    assert iou >= 0.8
    assert seconds < 600


def test_a6_fusion_benefit(suite):
    acc = suite["acc"]
    base, hq, gen = acc[("baseline", "origin")], acc[("xattn_hq", "origin")], acc[("xattn_gen", "origin")]
    total = suite["timings"]["total"]
    record_note("A6", f"baseline {base:.3f}, xattn HQ {hq:.3f}, xattn gen {gen:.3f}, suite {total / 60:.1f} min")
    assert hq >= base + 0.05
    assert gen >= base
    assert total < 1800


def test_a7_ood_robustness(suite):
    acc = suite["acc"]
    base_alt = acc[("baseline", "alt")]
    drops = {}
    for name in ("concat_gen", "gated_gen", "xattn_gen"):
        assert acc[(name, "alt")] >= base_alt, name
        drops[name] = acc[(name, "origin")] - acc[(name, "alt")]
    record_note("A7", f"alt baseline {base_alt:.3f}, " + ", ".join(
        f"{k} alt {acc[(k, 'alt')]:.3f} drop {v:.3f}" for k, v in drops.items()))
    assert drops["concat_gen"] <= drops["xattn_gen"] + 0.05
    assert drops["gated_gen"] <= drops["xattn_gen"] + 0.05


# -- A8 ---------------------------------------------------------------------------------------

def _product_form(z, y):
    """-(1/n) log prod_i p_i[y_i] with p from an explicit softmax, computed in extended precision."""
    z = np.asarray(z, dtype=np.longdouble)
    e = np.exp(z - z.max(axis=0))
    p = e / e.sum(axis=0)
    picked = np.take_along_axis(p, y[None], axis=0)[0]
    return float(-np.sum(np.log(picked)) / y.size)


def test_a8_loss_form_equivalence():
    rng = np.random.default_rng(8)
    for i in range(200):
        scale = [1.0, 10.0, 100.0][i % 3]
        z = rng.normal(size=(2, 6, 7)) * scale
        y = rng.integers(0, 2, size=(6, 7))
        assert abs(train.pixelwise_ce(z, y).item() - _product_form(z, y)) <= 1e-9
    for mag in (1000.0, -1000.0):
        z = np.zeros((2, 4, 4))
        z[1] = mag
        y = rng.integers(0, 2, size=(4, 4))
        got = train.pixelwise_ce(z, y).item()
        assert math.isfinite(got)
        # exact value: mag for each pixel on the losing class, 0 on the winning one
        losing = (y == 0) if mag > 0 else (y == 1)
        assert abs(got - abs(mag) * losing.mean()) <= 1e-9


# -- A9 ---------------------------------------------------------------------------------------

def test_a9_determinism_and_persistence(suite, tmp_path):
    rng = np.random.default_rng(9)
    for name in ("seg", "xattn_gen", "baseline"):
        ck = load_checkpoint(suite["root"] / "models" / f"{name}.ckpt")
        save_checkpoint(ck.model, tmp_path / "again.ckpt", ck.epoch, ck.metrics, ck.config_hash, ck.meta)
        again = load_checkpoint(tmp_path / "again.ckpt")
        assert (tmp_path / "again.ckpt").read_bytes() == (suite["root"] / "models" / f"{name}.ckpt").read_bytes()
        for _ in range(5):
            x = rng.normal(size=(2, 128, 128))
            args = (x,) if name == "seg" or not ck.model.uses_mask else (x, rng.random((2, 128, 128)))
            assert np.array_equal(ck.model(*args).data, again.model(*args).data)
    rerun = tmp_path / "rerun"
    t0 = time.perf_counter()
    report = pipeline.run_suite(rerun, pipeline.DESK_SUITE)
    record_note("A9", f"suite rerun in {(time.perf_counter() - t0) / 60:.1f} min, report CSV byte-identical")
    assert report.read_bytes() == suite["report"].read_bytes()
    shutil.rmtree(rerun)


# -- A10 --------------------------------------------------------------------------------------

def test_a10_single_call_equals_stages(suite):
    models = suite["root"] / "models"
    pipe = pipeline.MGCPipeline.from_checkpoints(models / "xattn_gen.ckpt", models / "seg.ckpt")
    clf = load_checkpoint(models / "xattn_gen.ckpt").model
    seg = load_checkpoint(models / "seg.ckpt").model
    sigma = load_checkpoint(models / "xattn_gen.ckpt").meta["sigma"]
    rng = np.random.default_rng(10)
    cfg = audio.CorpusConfig()
    for i in range(20):
        spec = audio.random_spec(rng, int(rng.integers(8)), cfg)
        w, _, _ = audio.synthesize_clip(spec, 90_000 + i)
        # manual composition: T(x) -> seg -> distance transform -> soft mask -> encoders -> fuse -> classify
        x = spectro.transform(w, "origin").pixels.astype(np.float32).astype(np.float64)[None]
        binary = seg.predict_mask(x)[0]
        soft = soft_mask(distance_transform(binary), sigma).pixels
        e_spec = clf.encode_spectrogram(x)
        e_mask = clf.encode_mask(soft[None])
        logits = clf.classify(clf.fuse(e_spec, e_mask), e_spec).data
        manual = tuple(int(v) for v in train.predict_labels(logits, "joint")[0])
        assert np.array_equal(pipe.logits(w), logits[0])
        assert pipe.predict(w) == manual
