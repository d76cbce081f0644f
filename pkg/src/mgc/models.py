"""Desk-scale networks for mask-guided classification.

* :class:`SegNet` - small encoder/decoder producing 2-class per-pixel logits.
* :class:`SpecEncoder` / :class:`MaskEncoder` - CNN branches that emit an
  8×8 token grid and a pooled vector, both projected to a common width.
* :class:`Fusion` - ``concat``, ``gated`` or ``xattn`` mid-level fusion.
* :class:`MGCClassifier` - encoders + fusion + MLP head with a residual path
  from the spectrogram embedding. ``fusion=None`` gives the spectrogram-only
  baseline.

The gated variant is our own definition: ``e_spec + sigmoid(W_g[e_spec; e_mask]
+ b_g) * (W_m e_mask)``.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensorio
from .nn import Conv2d, ConvBlock, LayerNorm, Linear, Module, Tensor, concat
from .nn import functional as F

FUSION_KINDS = ("concat", "gated", "xattn")


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _as_batch(x) -> Tensor:
    """Accept (H, W), (N, H, W) or (N, 1, H, W) arrays/tensors."""
    if isinstance(x, Tensor):
        if x.ndim == 2:
            return x.reshape(1, 1, *x.shape)
        return x.reshape(x.shape[0], 1, *x.shape[1:]) if x.ndim == 3 else x
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = a[:, None]
    return Tensor(a)


# -- segmentation -------------------------------------------------------------------

@dataclass(frozen=True)
class SegConfig:
    in_hw: tuple[int, int] = (128, 128)
    widths: tuple[int, ...] = (4, 8, 16, 32)
    seed: int = 0


class SegNet(Module):
    kind = "segmentation"

    def __init__(self, cfg: SegConfig = SegConfig()):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 11])
        w = cfg.widths
        if any(d % 2 ** len(w) for d in cfg.in_hw):
            raise ValueError(f"input size {cfg.in_hw} must divide by {2 ** len(w)}")
        self.down = [ConvBlock(rng, cin, cout) for cin, cout in zip((1,) + w[:-1], w)]
        self.bottleneck = ConvBlock(rng, w[-1], w[-1])
        ups = []
        cin = w[-1]
        for skip, cout in zip(reversed(w), reversed((w[0],) + w[:-1])):
            ups.append(ConvBlock(rng, cin + skip, cout))
            cin = cout
        self.up = ups
        self.head = Conv2d(rng, w[0], 2, k=1)

    def fingerprint(self) -> str:
        return _hash({"class": "SegNet", **asdict(self.cfg)})

    def forward(self, x) -> Tensor:
        x = _as_batch(x)
        if tuple(x.shape[2:]) != tuple(self.cfg.in_hw):
            raise ValueError(f"SegNet expects {self.cfg.in_hw} inputs, got {x.shape[2:]}")
        skips = []
        h = x
        for blk in self.down:
            h = blk(h)
            skips.append(h)
            h = F.max_pool2d(h, 2)
        h = self.bottleneck(h)
        for blk, skip in zip(self.up, reversed(skips)):
            h = blk(concat([F.bilinear_upsample(h, 2), skip], axis=1))
        return self.head(h)

    def predict_mask(self, x) -> np.ndarray:
        """Binary masks (N, H, W) from the per-pixel argmax."""
        logits = self.forward(x).data
        return (logits[:, 1] > logits[:, 0]).astype(np.uint8)


# -- classifier branches --------------------------------------------------------------

class _Stem(Module):
    """Stride-2 3×3 conv -> layer norm -> relu (halves the resolution cheaply)."""

    def __init__(self, rng, cin, cout):
        self.conv = Conv2d(rng, cin, cout, 3, stride=2)
        self.norm = LayerNorm((cout, 1, 1), n_axes=3)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class SpecEncoder(Module):
    """Five conv blocks: 128 -> 64 -> 32 -> 16 -> 8 -> 8 (token grid)."""

    def __init__(self, rng, widths=(8, 16, 24, 32, 48), dim=128):
        c1, c2, c3, c4, c5 = widths
        self.blocks = [_Stem(rng, 1, c1), ConvBlock(rng, c1, c2, pool=2), ConvBlock(rng, c2, c3, pool=2),
                       ConvBlock(rng, c3, c4, pool=2), ConvBlock(rng, c4, c5)]
        self.token_proj = Linear(rng, c5, dim)
        self.pool_proj = Linear(rng, c5, dim)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        h = _as_batch(x)
        for blk in self.blocks:
            h = blk(h)
        n, c, gh, gw = h.shape
        tokens = self.token_proj(h.reshape(n, c, gh * gw).transpose(0, 2, 1))
        return tokens, self.pool_proj(F.global_avg_pool(h))


class MaskEncoder(Module):
    """Three light conv blocks: 128 -> 32 -> 16 -> 8 (token grid)."""

    def __init__(self, rng, widths=(4, 8, 16), dim=128):
        c1, c2, c3 = widths
        self.stem = _Stem(rng, 1, c1)
        self.blocks = [ConvBlock(rng, c1, c2, pool=2), ConvBlock(rng, c2, c3, pool=2)]
        self.token_proj = Linear(rng, c3, dim)
        self.pool_proj = Linear(rng, c3, dim)

    def forward(self, x) -> tuple[Tensor, Tensor]:
        h = F.max_pool2d(self.stem(_as_batch(x)), 2)
        for blk in self.blocks:
            h = blk(h)
        n, c, gh, gw = h.shape
        tokens = self.token_proj(h.reshape(n, c, gh * gw).transpose(0, 2, 1))
        return tokens, self.pool_proj(F.global_avg_pool(h))


@dataclass
class Embedding:
    """Pooled vector (N, dim) plus token grid (N, T, dim) from one branch."""

    pooled: Tensor
    tokens: Tensor
    source: str


class Fusion(Module):
    def __init__(self, rng, kind: str, dim: int = 128):
        if kind not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {kind!r}")
        self.kind = kind
        self.dim = dim
        if kind == "concat":
            self.proj = Linear(rng, 2 * dim, dim)
        elif kind == "gated":
            self.gate = Linear(rng, 2 * dim, dim)
            self.mask_proj = Linear(rng, dim, dim)
        else:
            self.q = Linear(rng, dim, dim, bias=False)
            self.k = Linear(rng, dim, dim, bias=False)
            self.v = Linear(rng, dim, dim, bias=False)
        self.last_attention: np.ndarray | None = None

    def forward(self, e_spec: Embedding, e_mask: Embedding) -> Tensor:
        if e_spec.pooled.shape != e_mask.pooled.shape:
            raise ValueError(f"fusion shape mismatch: {e_spec.pooled.shape} vs {e_mask.pooled.shape}")
        s, m = e_spec.pooled, e_mask.pooled
        if self.kind == "concat":
            return self.proj(concat([s, m], axis=1))
        if self.kind == "gated":
            g = F.sigmoid(self.gate(concat([s, m], axis=1)))
            return s + g * self.mask_proj(m)
        # spectrogram tokens query, mask tokens supply keys and values
        out, weights = F.scaled_dot_attention(self.q(e_spec.tokens), self.k(e_mask.tokens), self.v(e_mask.tokens))
        self.last_attention = weights.data
        return s + out.mean(axis=1)


# -- full classifier ----------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    fusion: str | None = "xattn"
    head: str = "joint"  # joint: 8 logits, multilabel: 3 logits
    dim: int = 128
    hidden: int = 64
    spec_widths: tuple[int, ...] = (8, 16, 24, 32, 48)
    mask_widths: tuple[int, ...] = (4, 8, 16)
    in_hw: tuple[int, int] = (128, 128)
    seed: int = 0

    def __post_init__(self):
        if self.fusion is not None and self.fusion not in FUSION_KINDS:
            raise ValueError(f"unknown fusion kind {self.fusion!r}")
        if self.head not in ("joint", "multilabel"):
            raise ValueError(f"unknown head {self.head!r}")

    @property
    def n_out(self) -> int:
        return 8 if self.head == "joint" else 3


class Head(Module):
    """Residual path (W_r e_spec) added to the fused vector, then a 2-layer MLP."""

    def __init__(self, rng, dim, hidden, n_out):
        self.residual = Linear(rng, dim, dim, bias=False)
        self.fc1 = Linear(rng, dim, hidden)
        self.fc2 = Linear(rng, hidden, n_out)

    def forward(self, fused: Tensor | None, e_spec: Tensor) -> Tensor:
        h = self.residual(e_spec)
        if fused is not None:
            if fused.shape != h.shape:
                raise ValueError(f"head dim mismatch: {fused.shape} vs {h.shape}")
            h = fused + h
        return self.fc2(F.relu(self.fc1(h)))


class MGCClassifier(Module):
    kind = "classifier"

    def __init__(self, cfg: ClassifierConfig = ClassifierConfig()):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 12])
        self.spec_enc = SpecEncoder(rng, cfg.spec_widths, cfg.dim)
        if cfg.fusion is not None:
            self.mask_enc = MaskEncoder(rng, cfg.mask_widths, cfg.dim)
            self.fusion = Fusion(rng, cfg.fusion, cfg.dim)
        self.head = Head(rng, cfg.dim, cfg.hidden, cfg.n_out)

    @property
    def uses_mask(self) -> bool:
        return self.cfg.fusion is not None

    def fingerprint(self) -> str:
        return _hash({"class": "MGCClassifier", **asdict(self.cfg)})

    def _check(self, x: Tensor, what: str) -> None:
        if tuple(x.shape[2:]) != tuple(self.cfg.in_hw):
            raise ValueError(f"{what} resolution {x.shape[2:]} does not match {self.cfg.in_hw}")

    def encode_spectrogram(self, spec) -> Embedding:
        x = _as_batch(spec)
        self._check(x, "spectrogram")
        tokens, pooled = self.spec_enc(x)
        return Embedding(pooled, tokens, "spectrogram")

    def encode_mask(self, mask) -> Embedding:
        if not self.uses_mask:
            raise ValueError("spectrogram-only model has no mask encoder")
        x = _as_batch(mask)
        self._check(x, "mask")
        tokens, pooled = self.mask_enc(x)
        return Embedding(pooled, tokens, "mask")

    def fuse(self, e_spec: Embedding, e_mask: Embedding) -> Tensor:
        return self.fusion(e_spec, e_mask)

    def classify(self, fused: Tensor | None, e_spec: Embedding) -> Tensor:
        return self.head(fused, e_spec.pooled)

    def forward(self, spec, mask=None) -> Tensor:
        e_spec = self.encode_spectrogram(spec)
        if not self.uses_mask:
            return self.classify(None, e_spec)
        if mask is None:
            raise ValueError("mask-guided model needs a mask input")
        return self.classify(self.fuse(e_spec, self.encode_mask(mask)), e_spec)


# -- checkpoints ------------------------------------------------------------------------

CKPT_MAGIC = b"MGCK"


class FingerprintError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: Module
    epoch: int = 0
    metrics: dict = field(default_factory=dict)
    config_hash: str = ""
    meta: dict = field(default_factory=dict)


def build_model(kind: str, config: dict) -> Module:
    if kind == "segmentation":
        return SegNet(SegConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in config.items()}))
    if kind == "classifier":
        return MGCClassifier(ClassifierConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in config.items()}))
    raise FingerprintError(f"unknown model kind {kind!r}")


def save_checkpoint(model: Module, path, epoch: int = 0, metrics: dict | None = None,
                    config_hash: str = "", meta: dict | None = None) -> None:
    """Write a JSON header followed by one float64 MGCT block per parameter.

    ``meta`` carries provenance such as the spectrogram preset fingerprint the
    model was trained on.
    """
    state = model.state_dict()
    header = {
        "kind": model.kind,
        "fingerprint": model.fingerprint(),
        "config": asdict(model.cfg),
        "config_hash": config_hash,
        "epoch": epoch,
        "metrics": metrics or {},
        "meta": meta or {},
        "params": list(state.keys()),
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = CKPT_MAGIC + struct.pack("<I", len(hb)) + hb
    body += b"".join(tensorio.encode(arr, "<f8") for arr in state.values())
    body += struct.pack("<Q", tensorio.fnv1a64(body))
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body)
    tmp.replace(path)


def load_checkpoint(path, expect: str | None = None, fingerprint: str | None = None) -> Checkpoint:
    """Load a checkpoint; ``expect`` is 'segmentation' or 'classifier'."""
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != CKPT_MAGIC:
        raise tensorio.ChecksumError(f"{path}: not a checkpoint or truncated")
    if struct.unpack("<Q", raw[-8:])[0] != tensorio.fnv1a64(raw[:-8]):
        raise tensorio.ChecksumError(f"{path}: checkpoint checksum mismatch (corrupt or truncated)")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen])
    if expect is not None and header["kind"] != expect:
        raise FingerprintError(f"{path}: checkpoint holds a {header['kind']} model, expected {expect}")
    model = build_model(header["kind"], header["config"])
    if model.fingerprint() != header["fingerprint"]:
        raise FingerprintError(f"{path}: architecture fingerprint mismatch")
    if fingerprint is not None and fingerprint != header["fingerprint"]:
        raise FingerprintError(f"{path}: fingerprint {header['fingerprint']} != expected {fingerprint}")
    buf = io.BytesIO(raw[8 + hlen:-8])
    model.load_state_dict({name: tensorio.decode_from(buf) for name in header["params"]})
    return Checkpoint(model, header["epoch"], header["metrics"], header["config_hash"], header.get("meta", {}))
