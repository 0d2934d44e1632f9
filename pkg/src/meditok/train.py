"""Two-stage tokenizer training: optimizers, LR schedule, checkpointing.

Stage "s1" trains encoder/decoder/codebook plus the vision projector on
images alone; "s2" resumes and swaps the alignment target to caption
embeddings via the text projector; "combined" applies both at once and
"s2_only" trains from scratch with the caption objective. Batches,
augmentation, and parameter updates are all derived statelessly from
(seed, step), so an interrupted run resumes bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from . import vq as vqmod
from .datagen import Manifest, load_image
from .losses import LossWeights, stage_objective, mse_loss, perceptual_loss, adversarial_losses, adaptive_adv_weight
from .medprep import WINDOW_TABLE, Window, apply_window, sample_window
from .nets import (Decoder, Encoder, EncoderConfig, FeatureNet, PatchDiscriminator,
                   Projector, SemanticEncoders, TextEncoder, VisionEncoder,
                   pretrain_semantic_encoders, project)
from .util import canonical_json, derive_seed, hash_config, sha256_hex

STAGES = ("s1", "s2", "combined", "s2_only")
DIVERGENCE_LIMIT = 1e6
LOG_COLUMNS = ("step", "stage", "lr", "mse", "perceptual", "adversarial_g", "vq",
               "align_vis", "align_txt", "adv_weight", "total", "perplexity")


class DataError(Exception):
    """Input data violates a stage's requirements."""


class DivergenceError(RuntimeError):
    def __init__(self, step: int, breakdown: dict):
        super().__init__(f"loss diverged at step {step}: total={breakdown.get('total'):.3e}")
        self.step = step
        self.breakdown = breakdown


class CheckpointError(ValueError):
    """Malformed checkpoint container or incompatible resume."""


@dataclass(frozen=True)
class OptimizerConfig:
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.02
    lr_start: float = 5e-4
    lr_end: float = 5e-5

    def __post_init__(self):
        if self.lr_end > self.lr_start:
            raise ValueError(f"lr_end {self.lr_end} must be <= lr_start {self.lr_start}")
        if not (0 <= self.betas[0] < 1 and 0 <= self.betas[1] < 1):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")


@dataclass(frozen=True)
class AugmentConfig:
    resized_crop: bool = True
    flip: bool = True
    rotation: bool = True
    ct_windowing: bool = True


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "s1"
    steps_s1: int = 1500
    steps_s2: int = 300
    batch_size: int = 32
    image_size: int = 32
    encoder: EncoderConfig = EncoderConfig()
    n_codebooks: int = 4
    codebook_size: int = 64
    code_dim: int = 4
    embed_dim: int = 32
    tokenizer_opt: OptimizerConfig = OptimizerConfig()
    discriminator_opt: OptimizerConfig = OptimizerConfig(betas=(0.5, 0.9), weight_decay=0.2,
                                                         lr_start=2e-5, lr_end=2e-6)
    adv_warmup_fraction: float = 0.2
    weights: LossWeights = LossWeights()
    grad_clip: float = 1.0
    seed: int = 0
    augment: AugmentConfig = AugmentConfig()
    semantic_steps: int = 400
    dead_code_restart: bool = False

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.steps_s1 <= 0 or self.steps_s2 <= 0 or self.batch_size <= 0:
            raise ValueError("step and batch counts must be positive")
        if self.encoder.latent_dim != self.n_codebooks * self.code_dim:
            raise ValueError(
                f"latent dim {self.encoder.latent_dim} != "
                f"n_codebooks*code_dim = {self.n_codebooks * self.code_dim}"
            )
        if not 0.0 <= self.adv_warmup_fraction <= 1.0:
            raise ValueError("adversarial warmup fraction must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels"] = list(self.encoder.channels)
        d["tokenizer_opt"]["betas"] = list(self.tokenizer_opt.betas)
        d["discriminator_opt"]["betas"] = list(self.discriminator_opt.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "encoder" in d:
            enc = dict(d["encoder"])
            extra = set(enc) - set(EncoderConfig.__dataclass_fields__)
            if extra:
                raise ValueError(f"unknown encoder config keys: {sorted(extra)}")
            if "channels" in enc:
                enc["channels"] = tuple(enc["channels"])
            d["encoder"] = EncoderConfig(**enc)
        for key in ("tokenizer_opt", "discriminator_opt"):
            if key in d:
                opt = dict(d[key])
                extra = set(opt) - set(OptimizerConfig.__dataclass_fields__)
                if extra:
                    raise ValueError(f"unknown {key} config keys: {sorted(extra)}")
                if "betas" in opt:
                    opt["betas"] = tuple(opt["betas"])
                d[key] = OptimizerConfig(**opt)
        if "weights" in d and not isinstance(d["weights"], LossWeights):
            w = dict(d["weights"])
            extra = set(w) - set(LossWeights.__dataclass_fields__)
            if extra:
                raise ValueError(f"unknown loss weight keys: {sorted(extra)}")
            d["weights"] = LossWeights(**w)
        if "augment" in d and not isinstance(d["augment"], AugmentConfig):
            a = dict(d["augment"])
            extra = set(a) - set(AugmentConfig.__dataclass_fields__)
            if extra:
                raise ValueError(f"unknown augment config keys: {sorted(extra)}")
            d["augment"] = AugmentConfig(**a)
        return cls(**d)

    def config_hash(self) -> str:
        # the active stage is runtime state, not architecture
        return hash_config(self.to_dict(), exclude=("stage",))

    def stage_steps(self, stage: str = None) -> int:
        stage = stage or self.stage
        if stage == "s1":
            return self.steps_s1
        if stage == "s2":
            return self.steps_s2
        return self.steps_s1 + self.steps_s2  # budget-matched single-stage modes


# -- optimizer -----------------------------------------------------------

def adamw_step(params: dict, grads: dict, moments: dict, t: int, lr: float,
               betas: tuple, weight_decay: float, eps: float = 1e-8) -> None:
    """Decoupled-weight-decay Adam update with bias correction, in place.

    ``moments`` maps name -> (m, v) arrays and is updated alongside params.
    """
    if t < 1:
        raise ValueError(f"optimizer step counter must be >= 1, got {t}")
    b1, b2 = betas
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if np.isnan(g).any():
            raise RuntimeError(f"NaN gradient for parameter {name!r} at optimizer step {t}; step aborted")
        m, v = moments[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


def cosine_lr(step: int, total: int, lr_start: float, lr_end: float) -> float:
    """Cosine annealing from lr_start at step 0 to lr_end at step == total."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if step >= total:
        return lr_end
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + np.cos(np.pi * step / total))


def clip_global_norm(grads: dict, max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float((g * g).sum())
    norm = np.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            if g is not None:
                g *= scale
    return float(norm)


# -- model assembly --------------------------------------------------------

@dataclass
class TokenizerModel:
    encoder: Encoder
    decoder: Decoder
    codebook: vqmod.Codebook
    proj_vis: Projector
    proj_txt: Projector
    discriminator: PatchDiscriminator
    feat_net: FeatureNet

    @classmethod
    def build(cls, cfg: TrainConfig) -> "TokenizerModel":
        enc = Encoder(cfg.encoder, seed=derive_seed(cfg.seed, "encoder"))
        dec = Decoder(cfg.encoder, seed=derive_seed(cfg.seed, "decoder"))
        cb = vqmod.init_codebook(cfg.n_codebooks, cfg.codebook_size, cfg.code_dim,
                                 seed=derive_seed(cfg.seed, "codebook"))
        pv = Projector.create(cfg.embed_dim, cfg.encoder.latent_dim, derive_seed(cfg.seed, "proj_vis"))
        pt = Projector.create(cfg.embed_dim, cfg.encoder.latent_dim, derive_seed(cfg.seed, "proj_txt"))
        disc = PatchDiscriminator(cfg.encoder.in_channels, seed=derive_seed(cfg.seed, "disc"))
        feat = FeatureNet(cfg.encoder.in_channels, seed=derive_seed(cfg.seed, "feat"))
        return cls(enc, dec, cb, pv, pt, disc, feat)

    def named_params(self) -> dict:
        out = {}
        out.update({f"enc.{k}": v for k, v in self.encoder.params.items()})
        out.update({f"dec.{k}": v for k, v in self.decoder.params.items()})
        out["cb.entries"] = self.codebook.entries
        out.update({f"fvis.{k}": v for k, v in self.proj_vis.params.items()})
        out.update({f"ftxt.{k}": v for k, v in self.proj_txt.params.items()})
        out.update({f"disc.{k}": v for k, v in self.discriminator.params.items()})
        return out

    def group_params(self, groups: tuple) -> dict:
        return {k: v for k, v in self.named_params().items() if k.split(".", 1)[0] in groups}

    def load_arrays(self, arrays: dict) -> None:
        named = self.named_params()
        missing = set(named) - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
        for name, tensor in named.items():
            if tensor.data.shape != arrays[name].shape:
                raise CheckpointError(
                    f"parameter {name!r} shape {arrays[name].shape} != model shape {tensor.data.shape}"
                )
            tensor.data = arrays[name].copy()


TOKENIZER_GROUPS = {
    "s1": ("enc", "dec", "cb", "fvis"),
    "s2": ("enc", "dec", "cb", "ftxt"),
    "s2_only": ("enc", "dec", "cb", "ftxt"),
    "combined": ("enc", "dec", "cb", "fvis", "ftxt"),
}


# -- checkpoint container ---------------------------------------------------

CKPT_MAGIC = b"MTCK"
CKPT_VERSION = 1
_KIND_F64 = 0
_KIND_JSON = 1


@dataclass
class Checkpoint:
    params: dict
    moments: dict          # name -> (m, v)
    opt_steps: dict        # optimizer name -> step counter
    step: int
    stage: str
    stage_start: int
    rng_state: dict
    config: dict
    config_hash: str
    semantic_hash: str = ""
    kind: str = "tokenizer"


def _write_record(buf, name: str, kind: int, payload: bytes, dims: tuple = ()) -> None:
    encoded = name.encode()
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<BB", kind, len(dims)))
    for d in dims:
        buf.write(struct.pack("<I", d))
    buf.write(struct.pack("<Q", len(payload)))
    buf.write(payload)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    records = {}
    meta = {
        "version": CKPT_VERSION,
        "kind": ckpt.kind,
        "step": ckpt.step,
        "stage": ckpt.stage,
        "stage_start": ckpt.stage_start,
        "opt_steps": ckpt.opt_steps,
        "rng_state": ckpt.rng_state,
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "semantic_hash": ckpt.semantic_hash,
    }
    records["meta"] = (_KIND_JSON, canonical_json(meta).encode(), ())
    for name, arr in ckpt.params.items():
        a = np.ascontiguousarray(arr, dtype=np.float64)
        records[f"param/{name}"] = (_KIND_F64, a.tobytes(), a.shape)
    for name, (m, v) in ckpt.moments.items():
        records[f"moment/{name}.m"] = (_KIND_F64, np.ascontiguousarray(m).tobytes(), m.shape)
        records[f"moment/{name}.v"] = (_KIND_F64, np.ascontiguousarray(v).tobytes(), v.shape)

    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(records)))
    for name in sorted(records):
        kind, payload, dims = records[name]
        _write_record(buf, name, kind, payload, dims)
    return buf.getvalue()


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def _read_exact(blob: bytes, offset: int, n: int, what: str) -> tuple[bytes, int]:
    if offset + n > len(blob):
        raise CheckpointError(f"truncated checkpoint: needed {n} bytes for {what} at offset {offset}")
    return blob[offset:offset + n], offset + n


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic at offset 0: expected {CKPT_MAGIC!r}, got {blob[:4]!r}")
    header, offset = _read_exact(blob, 4, 8, "header")
    version, n_records = struct.unpack("<II", header)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays, meta = {}, None
    for _ in range(n_records):
        raw, offset = _read_exact(blob, offset, 2, "record name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _read_exact(blob, offset, name_len, "record name")
        name = raw.decode()
        raw, offset = _read_exact(blob, offset, 2, f"record {name!r} kind")
        kind, ndim = struct.unpack("<BB", raw)
        dims = []
        for _ in range(ndim):
            raw, offset = _read_exact(blob, offset, 4, f"record {name!r} dims")
            dims.append(struct.unpack("<I", raw)[0])
        raw, offset = _read_exact(blob, offset, 8, f"record {name!r} payload length")
        (nbytes,) = struct.unpack("<Q", raw)
        payload, offset = _read_exact(blob, offset, nbytes, f"record {name!r} payload")
        if kind == _KIND_JSON:
            meta = json.loads(payload.decode())
        elif kind == _KIND_F64:
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        else:
            raise CheckpointError(f"unknown record kind {kind} for {name!r}")
    if offset != len(blob):
        raise CheckpointError(f"trailing bytes after records at offset {offset}")
    if meta is None:
        raise CheckpointError("checkpoint has no meta record")

    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    moments: dict = {}
    for k, v in arrays.items():
        if k.startswith("moment/"):
            base = k[len("moment/"):]
            name, which = base[:-2], base[-1]
            moments.setdefault(name, [None, None])
            moments[name][0 if which == "m" else 1] = v
    moments = {k: (m, v) for k, (m, v) in moments.items()}
    return Checkpoint(params=params, moments=moments, opt_steps=meta["opt_steps"],
                      step=meta["step"], stage=meta["stage"], stage_start=meta["stage_start"],
                      rng_state=meta["rng_state"], config=meta["config"],
                      config_hash=meta["config_hash"], semantic_hash=meta["semantic_hash"],
                      kind=meta.get("kind", "tokenizer"))


def load_model_from_checkpoint(ckpt: Checkpoint) -> tuple[TrainConfig, TokenizerModel]:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = TokenizerModel.build(cfg)
    model.load_arrays(ckpt.params)
    return cfg, model


# -- semantic encoder persistence -------------------------------------------

def save_semantic(semantic: SemanticEncoders, path) -> None:
    records = {}
    meta = {
        "embed_dim": semantic.vision.embed_dim,
        "n_classes": semantic.vision.n_classes,
        "in_channels": semantic.vision.params["c0.w"].shape[1],
        "vocabulary": semantic.text.vocabulary,
        "vision_hash": semantic.vision_hash,
        "text_hash": semantic.text_hash,
    }
    records["meta"] = (_KIND_JSON, canonical_json(meta).encode(), ())
    for name, t in semantic.vision.params.items():
        a = np.ascontiguousarray(t.data)
        records[f"vision/{name}"] = (_KIND_F64, a.tobytes(), a.shape)
    table = np.ascontiguousarray(semantic.text.table)
    records["text/table"] = (_KIND_F64, table.tobytes(), table.shape)
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(records)))
    for name in sorted(records):
        kind, payload, dims = records[name]
        _write_record(buf, name, kind, payload, dims)
    Path(path).write_bytes(buf.getvalue())


def load_semantic(path) -> SemanticEncoders:
    # reuse the container reader via a fake checkpoint parse
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic at offset 0 in semantic file {path}")
    offset = 12
    (_, n_records) = struct.unpack("<II", blob[4:12])
    arrays, meta = {}, None
    for _ in range(n_records):
        raw, offset = _read_exact(blob, offset, 2, "name length")
        (name_len,) = struct.unpack("<H", raw)
        raw, offset = _read_exact(blob, offset, name_len, "name")
        name = raw.decode()
        raw, offset = _read_exact(blob, offset, 2, "kind")
        kind, ndim = struct.unpack("<BB", raw)
        dims = []
        for _ in range(ndim):
            raw, offset = _read_exact(blob, offset, 4, "dims")
            dims.append(struct.unpack("<I", raw)[0])
        raw, offset = _read_exact(blob, offset, 8, "payload length")
        (nbytes,) = struct.unpack("<Q", raw)
        payload, offset = _read_exact(blob, offset, nbytes, "payload")
        if kind == _KIND_JSON:
            meta = json.loads(payload.decode())
        else:
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    vis = VisionEncoder(meta["in_channels"], meta["embed_dim"], meta["n_classes"], seed=0)
    for name in vis.params:
        vis.params[name].data = arrays[f"vision/{name}"]
    vis.freeze()
    txt = TextEncoder(meta["vocabulary"], meta["embed_dim"], seed=0)
    txt.table = arrays["text/table"]
    sem = SemanticEncoders(vis, txt)
    if sem.vision_hash != meta["vision_hash"] or sem.text_hash != meta["text_hash"]:
        raise CheckpointError(f"semantic encoder hashes in {path} do not match contents")
    return sem


def semantic_bundle_hash(semantic: SemanticEncoders) -> str:
    return sha256_hex((semantic.vision_hash + semantic.text_hash).encode())


# -- data access and augmentation -------------------------------------------

class StageData:
    """Train-split records loaded into memory (raw HU or [-1, 1] arrays)."""

    def __init__(self, manifest: Manifest, root, split: str = "train"):
        self.records = manifest.split(split)
        if not self.records:
            raise DataError(f"manifest has no {split!r} records")
        loaded = [load_image(r, root) for r in self.records]
        self.images = [img for img, _ in loaded]
        self.is_hu = [hu for _, hu in loaded]
        self.captions = [r.caption for r in self.records]
        self.labels = np.array([int(r.labels["class_id"]) for r in self.records], dtype=np.int64)

    @property
    def n(self) -> int:
        return len(self.records)


FULL_WINDOW = WINDOW_TABLE[0]


def _nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape[0], img.shape[1]
    rows = np.floor(np.arange(out_h) * h / out_h).astype(np.int64)
    cols = np.floor(np.arange(out_w) * w / out_w).astype(np.int64)
    return img[rows][:, cols]


def prepare_batch(data: StageData, indices, rng: np.random.Generator,
                  aug: AugmentConfig) -> tuple[np.ndarray, list]:
    """Augment and normalize a batch of channel-last images.

    Returns (batch array, window name per image); non-HU images carry window
    name None. Every returned image lies in [-1, 1].
    """
    out, window_names = [], []
    for i in indices:
        img = data.images[i]
        if aug.resized_crop:
            h, w = img.shape[0], img.shape[1]
            scale = rng.uniform(0.8, 1.0)
            ch, cw = max(8, round(h * scale)), max(8, round(w * scale))
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            img = _nearest_resize(img[top:top + ch, left:left + cw], h, w)
        if aug.flip and rng.random() < 0.5:
            img = img[:, ::-1]
        if aug.rotation and img.shape[0] == img.shape[1]:
            img = np.rot90(img, k=int(rng.integers(0, 4)), axes=(0, 1))
        if data.is_hu[i]:
            window = sample_window(rng) if aug.ct_windowing else FULL_WINDOW
            img = apply_window(img, window)
            window_names.append(window.name)
        else:
            window_names.append(None)
        out.append(np.ascontiguousarray(img))
    return np.stack(out), window_names


def canonical_image(img: np.ndarray, is_hu: bool) -> np.ndarray:
    """Deterministic evaluation-time normalization (full window for HU data)."""
    return apply_window(img, FULL_WINDOW) if is_hu else img


# -- the training loop --------------------------------------------------------

def _batch_perplexity(tokens: vqmod.TokenGrid, codebook: vqmod.Codebook) -> float:
    _, perp = vqmod.codebook_stats([tokens], codebook)
    return float(perp.mean())


def build_semantic(cfg: TrainConfig, data: StageData) -> SemanticEncoders:
    """Pretrain the frozen semantic encoders on augmented phantom batches."""
    rng = np.random.default_rng(derive_seed(cfg.seed, "semantic-data"))
    batches = []
    per_batch = min(cfg.batch_size, data.n)
    for _ in range(max(1, 2048 // per_batch)):
        idx = rng.choice(data.n, size=per_batch, replace=False)
        x, _ = prepare_batch(data, idx, rng, cfg.augment)
        batches.append((x, data.labels[idx]))
    images = np.concatenate([b[0] for b in batches])
    labels = np.concatenate([b[1] for b in batches])
    captions = [c for c in data.captions if c is not None]
    if not captions:
        captions = [f"class:{c}" for c in sorted(set(int(v) for v in data.labels))]
    return pretrain_semantic_encoders(images, labels, captions, embed_dim=cfg.embed_dim,
                                      seed=derive_seed(cfg.seed, "semantic"),
                                      steps=cfg.semantic_steps, batch_size=cfg.batch_size)


def _restart_dead_codes(model: TokenizerModel, latents: np.ndarray, usage: np.ndarray,
                        step: int, seed: int) -> None:
    """Re-seed never-used codebook entries from current batch latent chunks."""
    cb = model.codebook
    chunks = latents.reshape(-1, cb.n_codebooks, cb.code_dim)
    rng = np.random.default_rng(derive_seed(seed, "restart", step))
    for sub in range(cb.n_codebooks):
        dead = np.where(usage[sub] == 0)[0]
        if dead.size == 0:
            continue
        pick = rng.integers(0, chunks.shape[0], size=dead.size)
        cb.entries.data[sub, dead] = chunks[pick, sub] + rng.normal(0, 1e-3, size=(dead.size, cb.code_dim))


def train_stage(cfg: TrainConfig, manifest: Manifest, root, *, init: Checkpoint = None,
                semantic: SemanticEncoders = None, out_dir=None,
                stop_after: int = None) -> tuple[Checkpoint, list]:
    """Run one training stage; returns the final checkpoint and per-step log rows."""
    stage = cfg.stage
    data = StageData(manifest, root)
    if stage in ("s2", "combined", "s2_only") and any(c is None for c in data.captions):
        raise DataError(f"stage {stage!r} needs captioned records, but the manifest under "
                        f"{root} contains caption-free entries")

    if semantic is None:
        semantic = build_semantic(cfg, data)
    sem_hash = semantic_bundle_hash(semantic)

    model = TokenizerModel.build(cfg)
    named = model.named_params()
    moments = {k: (np.zeros_like(v.data), np.zeros_like(v.data)) for k, v in named.items()}
    opt_steps = {"tokenizer": 0, "discriminator": 0}

    if init is not None:
        if init.config_hash != cfg.config_hash():
            raise CheckpointError(
                f"config hash mismatch on resume: checkpoint {init.config_hash[:12]} "
                f"vs current {cfg.config_hash()[:12]}"
            )
        if init.semantic_hash and init.semantic_hash != sem_hash:
            raise CheckpointError("semantic encoder mismatch on resume")
        model.load_arrays(init.params)
        for k in moments:
            if k in init.moments:
                moments[k] = (init.moments[k][0].copy(), init.moments[k][1].copy())
        opt_steps = dict(init.opt_steps)
        start = init.step
        stage_start = init.stage_start if init.stage == stage else init.step
    else:
        start = 0
        stage_start = 0

    stage_len = cfg.stage_steps(stage)
    end = stage_start + stage_len
    if stop_after is not None:
        end = min(end, start + stop_after)
    objective_stage = "s2" if stage == "s2_only" else stage
    trainable = model.group_params(TOKENIZER_GROUPS[stage])
    disc_params = model.group_params(("disc",))
    all_tensors = list(named.values())
    warmup_steps = int(round(cfg.adv_warmup_fraction * stage_len))
    usage_accum = np.zeros((cfg.n_codebooks, cfg.codebook_size), dtype=np.int64)

    rows = []
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "steps.csv"
        fresh = not log_path.exists()
        log_fh = open(log_path, "a", encoding="utf-8")
        if fresh:
            log_fh.write(",".join(LOG_COLUMNS) + "\n")

    try:
        for step in range(start, end):
            rng = np.random.default_rng(derive_seed(cfg.seed, "step", step))
            idx = rng.choice(data.n, size=cfg.batch_size, replace=data.n < cfg.batch_size)
            x_np, _ = prepare_batch(data, idx, rng, cfg.augment)
            x = ng.tensor(x_np)

            latents = model.encoder.encode(x)
            quant = vqmod.quantize(latents, model.codebook)
            st = vqmod.straight_through(latents, quant.quantized)
            recon = model.decoder.decode(st)

            step_in_stage = step - stage_start
            adv_active = cfg.weights.adv_mode != "off" and step_in_stage >= warmup_steps
            fake_logits, adv_weight = None, 0.0
            if adv_active:
                d_lr = cosine_lr(step_in_stage, stage_len, cfg.discriminator_opt.lr_start,
                                 cfg.discriminator_opt.lr_end)
                real_logits = model.discriminator.discriminate(x)
                fake_detached = model.discriminator.discriminate(ng.tensor(recon.data))
                d_loss, _ = adversarial_losses(real_logits, fake_detached)
                ng.zero_grads(all_tensors)
                ng.backward(d_loss)
                d_grads = {k: v.grad for k, v in disc_params.items()}
                clip_global_norm(d_grads, cfg.grad_clip)
                opt_steps["discriminator"] += 1
                adamw_step({k: v.data for k, v in disc_params.items()}, d_grads,
                           {k: moments[k] for k in disc_params}, opt_steps["discriminator"],
                           d_lr, cfg.discriminator_opt.betas, cfg.discriminator_opt.weight_decay)

                fake_logits = model.discriminator.discriminate(recon)
                if cfg.weights.adv_mode == "adaptive":
                    anchor = model.decoder.final_layer()
                    rec_anchor = mse_loss(recon, x) + cfg.weights.lambda_perc * perceptual_loss(
                        recon, x, model.feat_net)
                    g_anchor = -ng.mean(fake_logits)
                    g_rec, = ng.gradient(rec_anchor, [anchor])
                    g_adv, = ng.gradient(g_anchor, [anchor])
                    adv_weight = adaptive_adv_weight(float(np.linalg.norm(g_rec)),
                                                     float(np.linalg.norm(g_adv)))
                else:
                    adv_weight = cfg.weights.lambda_adv_fixed

            vis_target = None
            if objective_stage in ("s1", "combined"):
                emb = semantic.vision.embed(x)
                vis_target = project(emb, model.proj_vis)
            txt_target = None
            if objective_stage in ("s2", "combined"):
                caps = [data.captions[i] for i in idx]
                txt_target = project(semantic.text.embed_batch(caps), model.proj_txt)

            breakdown = stage_objective(objective_stage, cfg.weights, recon=recon, target=x,
                                        quant=quant, aligned_latents=st, feat_net=model.feat_net,
                                        vis_target=vis_target, txt_target=txt_target,
                                        fake_logits=fake_logits, adv_weight=adv_weight)
            floats = breakdown.floats()
            if not np.isfinite(floats["total"]) or floats["total"] > DIVERGENCE_LIMIT:
                raise DivergenceError(step, floats)

            lr = cosine_lr(step_in_stage, stage_len, cfg.tokenizer_opt.lr_start,
                           cfg.tokenizer_opt.lr_end)
            ng.zero_grads(all_tensors)
            ng.backward(breakdown.total)
            grads = {k: v.grad for k, v in trainable.items()}
            clip_global_norm(grads, cfg.grad_clip)
            opt_steps["tokenizer"] += 1
            adamw_step({k: v.data for k, v in trainable.items()}, grads,
                       {k: moments[k] for k in trainable}, opt_steps["tokenizer"],
                       lr, cfg.tokenizer_opt.betas, cfg.tokenizer_opt.weight_decay)

            flat_tokens = quant.tokens.indices.reshape(-1, cfg.n_codebooks)
            for sub in range(cfg.n_codebooks):
                usage_accum[sub] += np.bincount(flat_tokens[:, sub], minlength=cfg.codebook_size)
            if cfg.dead_code_restart and step_in_stage > 0 and step_in_stage % 100 == 0:
                _restart_dead_codes(model, latents.data, usage_accum, step, cfg.seed)
                usage_accum[:] = 0

            row = {"step": step, "stage": stage, "lr": lr, **floats,
                   "perplexity": _batch_perplexity(quant.tokens, model.codebook)}
            rows.append(row)
            if log_fh is not None:
                log_fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                                      for c in LOG_COLUMNS) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()

    master_rng = np.random.default_rng(derive_seed(cfg.seed, "master"))
    ckpt = Checkpoint(
        params={k: v.data.copy() for k, v in named.items()},
        moments={k: (m.copy(), v.copy()) for k, (m, v) in moments.items()},
        opt_steps=opt_steps,
        step=end,
        stage=stage,
        stage_start=stage_start,
        rng_state=master_rng.bit_generator.state,
        config=cfg.to_dict(),
        config_hash=cfg.config_hash(),
        semantic_hash=sem_hash,
    )
    if out_dir is not None:
        save_checkpoint(ckpt, Path(out_dir) / "checkpoint.mtck")
    return ckpt, rows
