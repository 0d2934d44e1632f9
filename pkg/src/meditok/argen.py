"""Class-conditioned autoregressive generation over tokenizer outputs.

A small decoder-only transformer predicts flattened sub-token sequences:
raster order over grid positions, sub-codebooks in order within each
position, ids offset by sub-codebook (id = sub * codebook_size + index),
and a leading class token. Sampling is ancestral at a fixed temperature
with range masking so every draw de-flattens into a valid token grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .ndgrad import Tensor
from .util import derive_seed
from .vq import TokenGrid

# paper-scale reference: 12 layers / 12 heads / 768 dims
PAPER_SCALE_AR = {"layers": 12, "heads": 12, "dim": 768}


@dataclass(frozen=True)
class ARConfig:
    grid_h: int
    grid_w: int
    n_codebooks: int
    codebook_size: int
    n_classes: int
    layers: int = 4
    heads: int = 4
    dim: int = 128
    mlp_ratio: int = 4
    temperature: float = 1.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"model dim {self.dim} must divide by heads {self.heads}")
        if min(self.grid_h, self.grid_w, self.n_codebooks, self.codebook_size, self.n_classes) < 1:
            raise ValueError("grid, codebook, and class extents must be positive")

    @property
    def context_len(self) -> int:
        return 1 + self.grid_h * self.grid_w * self.n_codebooks

    @property
    def token_vocab(self) -> int:
        return self.n_codebooks * self.codebook_size

    @property
    def vocab(self) -> int:
        return self.token_vocab + self.n_classes


@dataclass
class TokenSequence:
    """Leading class token followed by offset sub-token ids."""

    ids: np.ndarray
    config: ARConfig

    def __post_init__(self):
        ids = np.asarray(self.ids, dtype=np.int64)
        cfg = self.config
        if ids.shape != (cfg.context_len,):
            raise ValueError(f"sequence length {ids.shape} != context {cfg.context_len}")
        if ids.min() < 0 or ids.max() >= cfg.vocab:
            raise ValueError(f"token id out of range [0, {cfg.vocab})")
        if not cfg.token_vocab <= ids[0] < cfg.vocab:
            raise ValueError(f"leading id {ids[0]} is not a class token")
        self.ids = ids

    @property
    def class_id(self) -> int:
        return int(self.ids[0] - self.config.token_vocab)


def flatten_tokens(grid: TokenGrid, class_id: int, cfg: ARConfig) -> TokenSequence:
    """Raster order, sub-codebooks 0..M-1 within a position, offset ids."""
    idx = grid.indices
    if idx.ndim != 3:
        raise ValueError("flatten_tokens expects an unbatched token grid")
    if idx.shape != (cfg.grid_h, cfg.grid_w, cfg.n_codebooks):
        raise ValueError(f"grid shape {idx.shape} incompatible with config "
                         f"({cfg.grid_h}, {cfg.grid_w}, {cfg.n_codebooks})")
    if not 0 <= class_id < cfg.n_classes:
        raise ValueError(f"class id {class_id} out of range [0, {cfg.n_classes})")
    offsets = np.arange(cfg.n_codebooks, dtype=np.int64) * cfg.codebook_size
    flat = (idx + offsets[None, None, :]).reshape(-1)
    ids = np.concatenate([[cfg.token_vocab + class_id], flat])
    return TokenSequence(ids, cfg)


def unflatten_tokens(seq: TokenSequence) -> TokenGrid:
    """Inverse of flatten_tokens; validates the per-position offset grammar."""
    cfg = seq.config
    body = seq.ids[1:]
    subs = np.tile(np.arange(cfg.n_codebooks, dtype=np.int64), cfg.grid_h * cfg.grid_w)
    expected_lo = subs * cfg.codebook_size
    if np.any(body < expected_lo) or np.any(body >= expected_lo + cfg.codebook_size):
        bad = int(np.argmax((body < expected_lo) | (body >= expected_lo + cfg.codebook_size)))
        raise ValueError(f"token at position {bad} violates its sub-codebook range")
    indices = (body - expected_lo).reshape(cfg.grid_h, cfg.grid_w, cfg.n_codebooks)
    return TokenGrid(cfg.grid_h, cfg.grid_w, cfg.codebook_size, indices)


# -- the transformer -----------------------------------------------------------

def _linear_init(rng, fan_in: int, fan_out: int) -> Tensor:
    std = math.sqrt(1.0 / fan_in)
    return ng.tensor(rng.normal(0.0, std, size=(fan_in, fan_out)), requires_grad=True)


class ARModel:
    """Decoder-only transformer with learned absolute position embeddings."""

    def __init__(self, cfg: ARConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d, v, t = cfg.dim, cfg.vocab, cfg.context_len
        p = {
            "tok_emb": ng.tensor(rng.normal(0.0, 0.02, size=(v, d)), requires_grad=True),
            "pos_emb": ng.tensor(rng.normal(0.0, 0.02, size=(t, d)), requires_grad=True),
            "final_ln.g": ng.tensor(np.ones(d), requires_grad=True),
            "final_ln.b": ng.tensor(np.zeros(d), requires_grad=True),
            "head.w": _linear_init(rng, d, v),
            "head.b": ng.tensor(np.zeros(v), requires_grad=True),
        }
        for layer in range(cfg.layers):
            pre = f"l{layer}."
            p[pre + "ln1.g"] = ng.tensor(np.ones(d), requires_grad=True)
            p[pre + "ln1.b"] = ng.tensor(np.zeros(d), requires_grad=True)
            p[pre + "wq"] = _linear_init(rng, d, d)
            p[pre + "wk"] = _linear_init(rng, d, d)
            p[pre + "wv"] = _linear_init(rng, d, d)
            p[pre + "wo"] = _linear_init(rng, d, d)
            p[pre + "ln2.g"] = ng.tensor(np.ones(d), requires_grad=True)
            p[pre + "ln2.b"] = ng.tensor(np.zeros(d), requires_grad=True)
            p[pre + "w1"] = _linear_init(rng, d, d * cfg.mlp_ratio)
            p[pre + "b1"] = ng.tensor(np.zeros(d * cfg.mlp_ratio), requires_grad=True)
            p[pre + "w2"] = _linear_init(rng, d * cfg.mlp_ratio, d)
            p[pre + "b2"] = ng.tensor(np.zeros(d), requires_grad=True)
        self.params = p

    def param_list(self) -> list:
        return list(self.params.values())

    @staticmethod
    def _layernorm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
        mu = ng.mean(x, axis=-1, keepdims=True)
        centered = x - mu
        var = ng.mean(centered * centered, axis=-1, keepdims=True)
        return centered / ng.sqrt(var + 1e-6) * gain + bias

    @staticmethod
    def _softmax_last(x: Tensor) -> Tensor:
        shift = x - x.data.max(axis=-1, keepdims=True)
        e = ng.exp(shift)
        return e / ng.tensor_sum(e, axis=-1, keepdims=True)

    def forward(self, ids: np.ndarray) -> Tensor:
        """Logits (n, t, vocab) for integer sequences (n, t)."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2:
            raise ValueError(f"expected (n, t) ids, got {ids.shape}")
        n, t = ids.shape
        cfg = self.cfg
        if t > cfg.context_len:
            raise ValueError(f"sequence length {t} exceeds context {cfg.context_len}")
        p = self.params
        h_heads, dh = cfg.heads, cfg.dim // cfg.heads
        mask = np.triu(np.full((t, t), -1e9), k=1)

        x = ng.gather_rows(p["tok_emb"], ids) + ng.gather_rows(p["pos_emb"], np.arange(t))
        for layer in range(cfg.layers):
            pre = f"l{layer}."
            normed = self._layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
            flat = ng.reshape(normed, (n * t, cfg.dim))

            def heads_of(w):
                proj = ng.reshape(ng.matmul(flat, w), (n, t, h_heads, dh))
                return ng.reshape(ng.transpose(proj, (0, 2, 1, 3)), (n * h_heads, t, dh))

            q, k, v = heads_of(p[pre + "wq"]), heads_of(p[pre + "wk"]), heads_of(p[pre + "wv"])
            scores = ng.bmm(q, ng.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh)) + mask
            attn = self._softmax_last(scores)
            ctx = ng.bmm(attn, v)
            ctx = ng.transpose(ng.reshape(ctx, (n, h_heads, t, dh)), (0, 2, 1, 3))
            ctx = ng.reshape(ctx, (n * t, cfg.dim))
            x = x + ng.reshape(ng.matmul(ctx, p[pre + "wo"]), (n, t, cfg.dim))

            normed = self._layernorm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
            flat = ng.reshape(normed, (n * t, cfg.dim))
            hidden = ng.relu(ng.matmul(flat, p[pre + "w1"]) + p[pre + "b1"])
            mlp = ng.matmul(hidden, p[pre + "w2"]) + p[pre + "b2"]
            x = x + ng.reshape(mlp, (n, t, cfg.dim))

        x = self._layernorm(x, p["final_ln.g"], p["final_ln.b"])
        logits = ng.matmul(ng.reshape(x, (n * t, cfg.dim)), p["head.w"]) + p["head.b"]
        return ng.reshape(logits, (n, t, cfg.vocab))

    def next_token_loss(self, ids: np.ndarray) -> Tensor:
        """Mean cross-entropy of positions 1..t-1 under causal prediction."""
        ids = np.asarray(ids, dtype=np.int64)
        n, t = ids.shape
        logits = self.forward(ids)
        pred = ng.reshape(ng.narrow(logits, 1, 0, t - 1), (n * (t - 1), self.cfg.vocab))
        targets = ids[:, 1:].reshape(-1)
        return ng.softmax_cross_entropy(pred, targets)


def train_ar(cfg: ARConfig, sequences: np.ndarray, *, steps: int = 600, batch_size: int = 16,
             seed: int = 0, lr: float = 1e-4, betas: tuple = (0.9, 0.95),
             weight_decay: float = 0.05) -> tuple[ARModel, list]:
    """Next-token training over fixed-length sequences; returns (model, loss log)."""
    from .train import adamw_step  # shared optimizer

    seqs = np.asarray(sequences, dtype=np.int64)
    if seqs.ndim != 2:
        raise ValueError(f"expected (n, t) sequences, got {seqs.shape}")
    if seqs.shape[1] != cfg.context_len:
        raise ValueError(f"sequence length {seqs.shape[1]} != context {cfg.context_len}; "
                         "all sequences must match the flattened grid")
    model = ARModel(cfg, seed=derive_seed(seed, "ar-init"))
    names = sorted(model.params)
    moments = {k: (np.zeros_like(model.params[k].data), np.zeros_like(model.params[k].data))
               for k in names}
    losses = []
    for t in range(1, steps + 1):
        rng = np.random.default_rng(derive_seed(seed, "ar-step", t))
        idx = rng.choice(len(seqs), size=min(batch_size, len(seqs)), replace=len(seqs) < batch_size)
        loss = model.next_token_loss(seqs[idx])
        ng.zero_grads(model.param_list())
        ng.backward(loss)
        adamw_step({k: model.params[k].data for k in names},
                   {k: model.params[k].grad for k in names},
                   moments, t, lr, betas, weight_decay)
        losses.append(loss.item())
    ng.zero_grads(model.param_list())
    return model, losses


def _range_mask(cfg: ARConfig) -> np.ndarray:
    """Additive mask per body position restricting ids to the right sub-codebook."""
    body = cfg.context_len - 1
    mask = np.full((body, cfg.vocab), -np.inf)
    for pos in range(body):
        sub = pos % cfg.n_codebooks
        lo = sub * cfg.codebook_size
        mask[pos, lo:lo + cfg.codebook_size] = 0.0
    return mask


def _sample_step(model: ARModel, prefixes: np.ndarray, pos: int, temperature: float,
                 mask_row: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    logits = model.forward(prefixes).data[:, -1, :] + mask_row[None, :]
    scaled = (logits - logits.max(axis=1, keepdims=True)) / temperature
    probs = np.exp(scaled)
    probs /= probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    return (uniforms[:, None] > cum).sum(axis=1)


def sample_batch(model: ARModel, class_ids, temperature: float = 1.0,
                 seed: int = 0) -> list:
    """Ancestral sampling for many draws at once, one rng per draw."""
    cfg = model.cfg
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    class_ids = np.asarray(class_ids, dtype=np.int64)
    if class_ids.size and (class_ids.min() < 0 or class_ids.max() >= cfg.n_classes):
        raise ValueError(f"class id out of range [0, {cfg.n_classes})")
    rngs = [np.random.default_rng(derive_seed(seed, "draw", i)) for i in range(len(class_ids))]
    mask = _range_mask(cfg)
    seqs = np.empty((len(class_ids), cfg.context_len), dtype=np.int64)
    seqs[:, 0] = cfg.token_vocab + class_ids
    for pos in range(cfg.context_len - 1):
        uniforms = np.array([r.random() for r in rngs])
        seqs[:, pos + 1] = _sample_step(model, seqs[:, :pos + 1], pos, temperature,
                                        mask[pos], uniforms)
    return [TokenSequence(row.copy(), cfg) for row in seqs]


def sample(model: ARModel, class_id: int, temperature: float, rng: np.random.Generator) -> TokenSequence:
    """Draw one sequence token-by-token from softmax(logits / temperature)."""
    cfg = model.cfg
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    if not 0 <= class_id < cfg.n_classes:
        raise ValueError(f"class id {class_id} out of range [0, {cfg.n_classes})")
    mask = _range_mask(cfg)
    seq = np.empty(cfg.context_len, dtype=np.int64)
    seq[0] = cfg.token_vocab + class_id
    for pos in range(cfg.context_len - 1):
        u = np.array([rng.random()])
        seq[pos + 1] = _sample_step(model, seq[None, :pos + 1], pos, temperature, mask[pos], u)[0]
    return TokenSequence(seq, cfg)
