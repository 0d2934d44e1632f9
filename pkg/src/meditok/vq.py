"""Multi-codebook vector quantizer.

The latent vector at each grid position is split into contiguous chunks,
one per sub-codebook; each chunk is replaced by its L2-nearest entry.
The two quantization loss terms are

    codebook_term = mean over chunks of ||quantized - sg[latent]||^2
    commit_term   = mean over chunks of ||sg[quantized] - latent]||^2

where sg is the stop-gradient and the squared norm runs over the chunk
dims; their beta-weighted sum is the quantizer training loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .ndgrad import Tensor


@dataclass
class Codebook:
    """A bank of sub-codebooks; entries are trainable.

    latent dim = n_codebooks * code_dim, vocabulary = n_codebooks * codebook_size.
    """

    n_codebooks: int
    codebook_size: int
    code_dim: int
    entries: Tensor = field(repr=False, default=None)

    def __post_init__(self):
        if self.n_codebooks < 1 or self.codebook_size < 1 or self.code_dim < 1:
            raise ValueError("codebook extents must be positive")
        if self.entries is None:
            raise ValueError("entries must be provided; use init_codebook")
        expected = (self.n_codebooks, self.codebook_size, self.code_dim)
        if self.entries.shape != expected:
            raise ValueError(f"entries shape {self.entries.shape} != {expected}")
        if not np.all(np.isfinite(self.entries.data)):
            raise ValueError("codebook entries must be finite")

    @property
    def latent_dim(self) -> int:
        return self.n_codebooks * self.code_dim

    @property
    def vocab_size(self) -> int:
        return self.n_codebooks * self.codebook_size

    def flat_entries(self) -> Tensor:
        """Entries as a (vocab, code_dim) table, graph-connected."""
        return ng.reshape(self.entries, (self.vocab_size, self.code_dim))


def init_codebook(n_codebooks: int, codebook_size: int, code_dim: int, seed: int) -> Codebook:
    """Seeded uniform init in [-1/codebook_size, 1/codebook_size]."""
    rng = np.random.default_rng(seed)
    bound = 1.0 / codebook_size
    entries = rng.uniform(-bound, bound, size=(n_codebooks, codebook_size, code_dim))
    return Codebook(n_codebooks, codebook_size, code_dim, ng.tensor(entries, requires_grad=True))


@dataclass
class TokenGrid:
    """Integer sub-token indices on an h x w grid, one per sub-codebook.

    ``indices`` has shape (h, w, n_codebooks) or (batch, h, w, n_codebooks);
    every index lies in [0, codebook_size).
    """

    h: int
    w: int
    codebook_size: int
    indices: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        if idx.ndim not in (3, 4) or idx.shape[-3] != self.h or idx.shape[-2] != self.w:
            raise ValueError(f"indices shape {idx.shape} incompatible with {self.h}x{self.w} grid")
        if idx.size and (idx.min() < 0 or idx.max() >= self.codebook_size):
            raise ValueError(
                f"token index out of range [0, {self.codebook_size}): "
                f"min {idx.min()}, max {idx.max()}"
            )
        self.indices = idx

    @property
    def n_codebooks(self) -> int:
        return self.indices.shape[-1]


@dataclass
class QuantizeResult:
    quantized: Tensor          # raw codebook values, differentiable w.r.t. entries
    tokens: TokenGrid
    codebook_term: Tensor      # pulls entries toward (detached) latents
    commit_term: Tensor        # pulls latents toward (detached) entries


def quantize(latents: Tensor, codebook: Codebook) -> QuantizeResult:
    """Replace each latent chunk by the nearest entry of its sub-codebook.

    Ties break toward the lowest index. Accepts (h, w, d) or (n, h, w, d)
    latents with d = codebook.latent_dim.
    """
    if latents.ndim not in (3, 4):
        raise ValueError(f"latents must be (h,w,d) or (n,h,w,d), got {latents.shape}")
    d = latents.shape[-1]
    if d != codebook.latent_dim:
        raise ValueError(f"latent dim {d} != codebook latent dim {codebook.latent_dim}")
    m, k, dc = codebook.n_codebooks, codebook.codebook_size, codebook.code_dim
    lead = latents.shape[:-1]
    h, w = lead[-2], lead[-1]

    chunks = latents.data.reshape(-1, m, dc)
    indices = np.empty((chunks.shape[0], m), dtype=np.int64)
    for sub in range(m):
        # exact squared distances so equal distances tie exactly
        diff = chunks[:, sub, None, :] - codebook.entries.data[sub][None, :, :]
        indices[:, sub] = np.argmin((diff * diff).sum(axis=-1), axis=1)

    flat_ids = indices + np.arange(m, dtype=np.int64)[None, :] * k
    gathered = ng.gather_rows(codebook.flat_entries(), flat_ids)   # (P, m, dc)
    quantized = ng.reshape(gathered, lead + (d,))

    latent_chunks = ng.reshape(latents, (-1, m, dc))
    code_diff = gathered - ng.detach(latent_chunks)
    codebook_term = ng.mean(ng.tensor_sum(code_diff * code_diff, axis=-1))
    commit_diff = ng.detach(gathered) - latent_chunks
    commit_term = ng.mean(ng.tensor_sum(commit_diff * commit_diff, axis=-1))

    tokens = TokenGrid(h, w, k, indices.reshape(lead + (m,)))
    return QuantizeResult(quantized, tokens, codebook_term, commit_term)


def straight_through(latents: Tensor, quantized: Tensor) -> Tensor:
    """Forward value of ``quantized``; gradient flows entirely to ``latents``.

    Arranged as sg[quantized] + (latents - sg[latents]) so the forward value
    is bit-exactly the quantized grid (latents - latents cancels exactly);
    the gradient is identical to the usual latents + sg[quantized - latents]
    form.
    """
    if latents.shape != quantized.shape:
        raise ValueError(f"shape mismatch: {latents.shape} vs {quantized.shape}")
    return ng.detach(quantized) + (latents - ng.detach(latents))


def vq_loss(result: QuantizeResult, beta: float) -> Tensor:
    """codebook_term + beta * commit_term."""
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    return result.codebook_term + beta * result.commit_term


def lookup(tokens: TokenGrid, codebook: Codebook) -> Tensor:
    """Concatenate the selected entries per position; inverse of quantize's assignment."""
    if tokens.n_codebooks != codebook.n_codebooks:
        raise ValueError(
            f"token grid has {tokens.n_codebooks} sub-codebooks, codebook has {codebook.n_codebooks}"
        )
    if tokens.codebook_size > codebook.codebook_size:
        raise ValueError("token index bound exceeds codebook size")
    m, k = codebook.n_codebooks, codebook.codebook_size
    idx = tokens.indices
    flat_ids = idx.reshape(-1, m) + np.arange(m, dtype=np.int64)[None, :] * k
    gathered = ng.gather_rows(codebook.flat_entries(), flat_ids)
    return ng.reshape(gathered, idx.shape[:-1] + (codebook.latent_dim,))


def codebook_stats(token_history: list, codebook: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Usage fraction and perplexity per sub-codebook over a token history.

    usage = fraction of entries selected at least once; perplexity =
    exp(entropy) of the empirical index distribution.
    """
    if not token_history:
        raise ValueError("token history is empty")
    m, k = codebook.n_codebooks, codebook.codebook_size
    counts = np.zeros((m, k), dtype=np.int64)
    for grid in token_history:
        idx = grid.indices.reshape(-1, grid.n_codebooks)
        if idx.shape[1] != m:
            raise ValueError("token grid sub-codebook count mismatch")
        for sub in range(m):
            counts[sub] += np.bincount(idx[:, sub], minlength=k)
    usage = (counts > 0).mean(axis=1)
    totals = counts.sum(axis=1)
    probs = counts / totals[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(probs > 0, probs * np.log(probs), 0.0)
    perplexity = np.exp(-plogp.sum(axis=1))
    return usage, perplexity
