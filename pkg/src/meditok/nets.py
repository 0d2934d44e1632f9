"""Desk-scale networks around the quantizer.

Residual conv encoder/decoder with stride-2 blocks, a small patch
discriminator, a frozen random-feature net for the perceptual loss, and the
semantic encoder stand-ins: a conv classifier pretrained on phantom
attributes (vision side) and a deterministic attribute-embedding table
(text side). Forward passes are pure functions of (input, params).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .ndgrad import Tensor

# paper-scale reference configuration; documented, not exercised by tests
PAPER_SCALE = {
    "image_size": 256,
    "downsample_factor": 16,
    "codebook": {"n_codebooks": 8, "codebook_size": 4096, "code_dim": 8},
}


@dataclass(frozen=True)
class EncoderConfig:
    downsample_factor: int = 8
    channels: tuple = (8, 16, 24, 32)
    latent_dim: int = 16
    in_channels: int = 1

    def __post_init__(self):
        if self.downsample_factor not in (2, 4, 8, 16):
            raise ValueError(f"downsample factor must be in {{2,4,8,16}}, got {self.downsample_factor}")
        blocks = int(math.log2(self.downsample_factor))
        if len(self.channels) != blocks + 1:
            raise ValueError(
                f"need {blocks + 1} channel widths for downsample {self.downsample_factor}, "
                f"got {len(self.channels)}"
            )

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.downsample_factor))


def _conv_weight(rng, c_out: int, c_in: int, k: int) -> Tensor:
    std = math.sqrt(2.0 / (c_in * k * k))
    return ng.tensor(rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True)


def _bias(c: int) -> Tensor:
    return ng.tensor(np.zeros(c), requires_grad=True)


def _rename(params: dict, prefix: str) -> dict:
    return {f"{prefix}.{k}": v for k, v in params.items()}


class _Net:
    """Common parameter plumbing for the small conv nets."""

    params: dict

    def param_list(self) -> list:
        return list(self.params.values())

    def freeze(self) -> None:
        for t in self.params.values():
            t.requires_grad = False

    def param_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return digest.hexdigest()


def _conv(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return ng.conv2d_nhwc(x, w, stride=stride, padding=padding) + b


class Encoder(_Net):
    """Image -> (h, w, d) latent grid, h = H / downsample_factor."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        p = {"stem.w": _conv_weight(rng, ch[0], cfg.in_channels, 3), "stem.b": _bias(ch[0])}
        for i in range(cfg.n_blocks):
            p[f"down{i}.w"] = _conv_weight(rng, ch[i + 1], ch[i], 3)
            p[f"down{i}.b"] = _bias(ch[i + 1])
            p[f"res{i}.w"] = _conv_weight(rng, ch[i + 1], ch[i + 1], 3)
            p[f"res{i}.b"] = _bias(ch[i + 1])
        p["head.w"] = _conv_weight(rng, cfg.latent_dim, ch[-1], 1)
        p["head.b"] = _bias(cfg.latent_dim)
        self.params = p

    def encode(self, x: Tensor) -> Tensor:
        """Channel-last image (h, w, c) or (n, h, w, c) -> latent grid (..., h', w', d)."""
        squeeze = x.ndim == 3
        if squeeze:
            x = ng.reshape(x, (1,) + x.shape)
        n, h, w, c = x.shape
        f = self.cfg.downsample_factor
        if h % f or w % f:
            raise ValueError(f"resolution {h}x{w} not divisible by downsample factor {f}")
        p = self.params
        out = ng.relu(_conv(x, p["stem.w"], p["stem.b"], padding=1))
        for i in range(self.cfg.n_blocks):
            out = ng.relu(_conv(out, p[f"down{i}.w"], p[f"down{i}.b"], stride=2, padding=1))
            out = ng.relu(out + _conv(out, p[f"res{i}.w"], p[f"res{i}.b"], padding=1))
        grid = _conv(out, p["head.w"], p["head.b"])        # (n, h', w', d)
        return ng.reshape(grid, grid.shape[1:]) if squeeze else grid


class Decoder(_Net):
    """(h, w, d) latent grid -> image in [-1, 1] via a final tanh."""

    def __init__(self, cfg: EncoderConfig, seed: int):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        p = {"head.w": _conv_weight(rng, ch[-1], cfg.latent_dim, 1), "head.b": _bias(ch[-1])}
        for i in reversed(range(cfg.n_blocks)):
            p[f"up{i}.w"] = _conv_weight(rng, ch[i], ch[i + 1], 3)
            p[f"up{i}.b"] = _bias(ch[i])
            p[f"res{i}.w"] = _conv_weight(rng, ch[i], ch[i], 3)
            p[f"res{i}.b"] = _bias(ch[i])
        p["out.w"] = _conv_weight(rng, cfg.in_channels, ch[0], 3)
        p["out.b"] = _bias(cfg.in_channels)
        self.params = p

    def decode(self, grid: Tensor) -> Tensor:
        """Latent grid (..., h, w, d) -> channel-last image in [-1, 1]."""
        squeeze = grid.ndim == 3
        if squeeze:
            grid = ng.reshape(grid, (1,) + grid.shape)
        if grid.shape[-1] != self.cfg.latent_dim:
            raise ValueError(f"latent dim {grid.shape[-1]} != configured {self.cfg.latent_dim}")
        p = self.params
        out = ng.relu(_conv(grid, p["head.w"], p["head.b"]))
        for i in reversed(range(self.cfg.n_blocks)):
            out = ng.upsample_nearest2x_nhwc(out)
            out = ng.relu(_conv(out, p[f"up{i}.w"], p[f"up{i}.b"], padding=1))
            out = ng.relu(out + _conv(out, p[f"res{i}.w"], p[f"res{i}.b"], padding=1))
        img = ng.tanh(_conv(out, p["out.w"], p["out.b"], padding=1))
        return ng.reshape(img, img.shape[1:]) if squeeze else img

    def final_layer(self) -> Tensor:
        """Weight the adaptive adversarial balance is anchored to."""
        return self.params["out.w"]


class PatchDiscriminator(_Net):
    """Three stride-2 conv blocks emitting a real-valued logit per patch."""

    def __init__(self, in_channels: int, seed: int, widths: tuple = (8, 16, 16)):
        rng = np.random.default_rng(seed)
        p = {}
        prev = in_channels
        for i, width in enumerate(widths):
            p[f"c{i}.w"] = _conv_weight(rng, width, prev, 3)
            p[f"c{i}.b"] = _bias(width)
            prev = width
        p["out.w"] = _conv_weight(rng, 1, prev, 1)
        p["out.b"] = _bias(1)
        self.params = p
        self.n_blocks = len(widths)

    def discriminate(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = ng.reshape(x, (1,) + x.shape)
        p = self.params
        out = x
        for i in range(self.n_blocks):
            out = ng.leaky_relu(_conv(out, p[f"c{i}.w"], p[f"c{i}.b"], stride=2, padding=1))
        logits = _conv(out, p["out.w"], p["out.b"])
        return ng.reshape(logits, logits.shape[1:]) if squeeze else logits


class FeatureNet(_Net):
    """Frozen random conv features for the perceptual loss (two taps)."""

    def __init__(self, in_channels: int, seed: int, widths: tuple = (8, 16)):
        rng = np.random.default_rng(seed)
        self.params = {
            "c0.w": _conv_weight(rng, widths[0], in_channels, 3),
            "c0.b": _bias(widths[0]),
            "c1.w": _conv_weight(rng, widths[1], widths[0], 3),
            "c1.b": _bias(widths[1]),
        }
        self.freeze()

    def features(self, x: Tensor) -> list:
        squeeze = x.ndim == 3
        if squeeze:
            x = ng.reshape(x, (1,) + x.shape)
        p = self.params
        f1 = ng.relu(_conv(x, p["c0.w"], p["c0.b"], padding=1))
        f2 = ng.relu(_conv(f1, p["c1.w"], p["c1.b"], stride=2, padding=1))
        return [f1, f2]


class VisionEncoder(_Net):
    """Small conv classifier; its penultimate activation is the embedding."""

    def __init__(self, in_channels: int, embed_dim: int, n_classes: int, seed: int,
                 widths: tuple = (8, 16, 32)):
        # channel-last throughout, like the rest of the stack
        rng = np.random.default_rng(seed)
        p = {}
        prev = in_channels
        for i, width in enumerate(widths):
            p[f"c{i}.w"] = _conv_weight(rng, width, prev, 3)
            p[f"c{i}.b"] = _bias(width)
            prev = width
        p["fc.w"] = ng.tensor(rng.normal(0.0, math.sqrt(1.0 / prev), size=(prev, embed_dim)),
                              requires_grad=True)
        p["fc.b"] = ng.tensor(np.zeros(embed_dim), requires_grad=True)
        p["cls.w"] = ng.tensor(rng.normal(0.0, math.sqrt(1.0 / embed_dim), size=(embed_dim, n_classes)),
                               requires_grad=True)
        p["cls.b"] = ng.tensor(np.zeros(n_classes), requires_grad=True)
        self.params = p
        self.n_blocks = len(widths)
        self.embed_dim = embed_dim
        self.n_classes = n_classes

    def embed(self, x: Tensor) -> Tensor:
        squeeze = x.ndim == 3
        if squeeze:
            x = ng.reshape(x, (1,) + x.shape)
        p = self.params
        out = x
        for i in range(self.n_blocks):
            out = ng.relu(_conv(out, p[f"c{i}.w"], p[f"c{i}.b"], stride=2, padding=1))
        pooled = ng.mean(out, axis=(-3, -2))               # (n, c)
        emb = ng.tanh(ng.matmul(pooled, p["fc.w"]) + p["fc.b"])
        return ng.reshape(emb, (self.embed_dim,)) if squeeze else emb

    def logits(self, x: Tensor) -> Tensor:
        emb = self.embed(x)
        if emb.ndim == 1:
            emb = ng.reshape(emb, (1, self.embed_dim))
        return ng.matmul(emb, self.params["cls.w"]) + self.params["cls.b"]


class TextEncoder:
    """Deterministic attribute-embedding table over structured captions.

    One seeded row per attribute token ("lesion:present", ...); a caption
    embeds as the sum of its rows. Frozen by construction.
    """

    def __init__(self, vocabulary: list, embed_dim: int, seed: int):
        if not vocabulary:
            raise ValueError("text encoder needs a non-empty attribute vocabulary")
        self.vocabulary = sorted(set(vocabulary))
        self.embed_dim = embed_dim
        self.index = {tok: i for i, tok in enumerate(self.vocabulary)}
        rng = np.random.default_rng(seed)
        self.table = rng.normal(0.0, 1.0 / math.sqrt(embed_dim),
                                size=(len(self.vocabulary), embed_dim))

    def embed(self, caption: str) -> np.ndarray:
        out = np.zeros(self.embed_dim)
        for tok in caption.split(";"):
            if tok not in self.index:
                raise KeyError(f"unknown caption attribute {tok!r}")
            out += self.table[self.index[tok]]
        return out

    def embed_batch(self, captions: list) -> np.ndarray:
        return np.stack([self.embed(c) for c in captions])

    def param_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.table).tobytes()).hexdigest()


@dataclass
class Projector:
    """Affine map from a semantic embedding into the latent space."""

    weight: Tensor
    bias: Tensor

    @classmethod
    def create(cls, embed_dim: int, latent_dim: int, seed: int) -> "Projector":
        rng = np.random.default_rng(seed)
        w = rng.normal(0.0, math.sqrt(1.0 / embed_dim), size=(embed_dim, latent_dim))
        return cls(ng.tensor(w, requires_grad=True), ng.tensor(np.zeros(latent_dim), requires_grad=True))

    @property
    def params(self) -> dict:
        return {"w": self.weight, "b": self.bias}


def project(embedding, projector: Projector) -> Tensor:
    """Affine projection of one embedding or a batch of them."""
    emb = embedding if isinstance(embedding, Tensor) else ng.tensor(np.asarray(embedding, dtype=np.float64))
    squeeze = emb.ndim == 1
    if squeeze:
        emb = ng.reshape(emb, (1, emb.shape[0]))
    if emb.shape[1] != projector.weight.shape[0]:
        raise ValueError(f"embedding dim {emb.shape[1]} != projector input dim {projector.weight.shape[0]}")
    out = ng.matmul(emb, projector.weight) + projector.bias
    return ng.reshape(out, (out.shape[1],)) if squeeze else out


@dataclass
class SemanticEncoders:
    vision: VisionEncoder
    text: TextEncoder
    vision_hash: str = field(default="")
    text_hash: str = field(default="")

    def __post_init__(self):
        if not self.vision_hash:
            self.vision_hash = self.vision.param_hash()
        if not self.text_hash:
            self.text_hash = self.text.param_hash()


def pretrain_semantic_encoders(images: np.ndarray, labels, captions, *, embed_dim: int = 32,
                               seed: int = 0, steps: int = 400, batch_size: int = 32,
                               lr: float = 2e-3) -> SemanticEncoders:
    """Train the vision stand-in on attribute labels, build the text table, freeze both.

    ``images`` are model-ready channel-last arrays (n, h, w, c) in [-1, 1];
    ``labels`` are integer class ids; ``captions`` supply the attribute
    vocabulary.
    """
    if labels is None:
        raise ValueError("semantic pretraining needs a labelled dataset")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0 or len(images) != len(labels):
        raise ValueError("images and labels must be non-empty and aligned")
    n_classes = int(labels.max()) + 1
    if captions is None or not any(captions):
        raise ValueError("semantic pretraining needs captions for the attribute vocabulary")

    vis = VisionEncoder(images.shape[-1], embed_dim, n_classes, seed=seed)
    from .train import adamw_step  # late import; train builds on nets

    names = sorted(vis.params)
    moments = {k: (np.zeros_like(vis.params[k].data), np.zeros_like(vis.params[k].data)) for k in names}
    rng = np.random.default_rng(seed + 1)
    for t in range(1, steps + 1):
        pick = rng.choice(len(images), size=min(batch_size, len(images)), replace=False)
        x = ng.tensor(images[pick])
        loss = ng.softmax_cross_entropy(vis.logits(x), labels[pick])
        ng.zero_grads(vis.param_list())
        ng.backward(loss)
        grads = {k: vis.params[k].grad for k in names}
        params = {k: vis.params[k].data for k in names}
        adamw_step(params, grads, moments, t, lr=lr, betas=(0.9, 0.999), weight_decay=0.0)
        for k in names:
            vis.params[k].data = params[k]
    ng.zero_grads(vis.param_list())
    vis.freeze()

    vocab = sorted({tok for cap in captions if cap for tok in cap.split(";")})
    txt = TextEncoder(vocab, embed_dim, seed=seed + 2)
    return SemanticEncoders(vis, txt)
