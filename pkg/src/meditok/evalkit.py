"""Reconstruction metrics, the linear-probing protocol, and report emission.

PSNR/SSIM follow the standard reference definitions (11x11 Gaussian window,
sigma 1.5, K1=0.01, K2=0.03). The distributional metric is the Frechet
distance between Gaussian moment fits of feature sets, computed via a
symmetric eigendecomposition; features come from the frozen vision
encoder's penultimate layer.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .datagen import Manifest, load_image, write_pgm
from .train import (Checkpoint, StageData, TokenizerModel, TrainConfig, adamw_step,
                    canonical_image, load_model_from_checkpoint)
from .util import sha256_hex
from . import vq as vqmod


def psnr(a: np.ndarray, b: np.ndarray, data_range: float) -> float:
    """10 log10(range^2 / MSE); identical inputs report +inf."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if data_range <= 0:
        raise ValueError(f"data range must be > 0, got {data_range}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    win = np.outer(g1, g1)
    return win / win.sum()


def _local_stats(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    k = win.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(img, (k, k))
    return np.einsum("ijkl,kl->ij", windows, win)


def ssim(a: np.ndarray, b: np.ndarray, data_range: float, k1: float = 0.01,
         k2: float = 0.03, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean local SSIM over valid Gaussian windows, channel-averaged."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected (h, w) or (h, w, c) images, got {a.shape}")
    if min(a.shape[0], a.shape[1]) < win_size:
        raise ValueError(f"image {a.shape[:2]} smaller than the {win_size}x{win_size} window")

    win = _gaussian_window(win_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = _local_stats(x, win)
        mu_y = _local_stats(y, win)
        xx = _local_stats(x * x, win) - mu_x * mu_x
        yy = _local_stats(y * y, win) - mu_y * mu_y
        xy = _local_stats(x * y, win) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + c1) * (2.0 * xy + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        values.append(float(np.mean(num / den)))
    return float(np.mean(values))


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    ||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2), covariances
    with 1/(n-1); negative eigenvalues from rounding are clamped to zero.
    """
    a = np.atleast_2d(np.asarray(feats_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(feats_b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 samples per side for covariance")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))

    evals, evecs = np.linalg.eigh(ca)
    root_a = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    middle = root_a @ cb @ root_a
    middle = 0.5 * (middle + middle.T)
    mid_evals = np.linalg.eigvalsh(middle)
    trace_root = float(np.sqrt(np.clip(mid_evals, 0.0, None)).sum())

    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(ca) + np.trace(cb) - 2.0 * trace_root)
    return max(value, 0.0)


# -- classification metrics ---------------------------------------------------

def _binary_average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")
    y = positives[order]
    s = scores[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # evaluate at distinct-threshold boundaries
    boundary = np.nonzero(np.diff(s))[0]
    idx = np.concatenate([boundary, [len(s) - 1]])
    precision = tp[idx] / (tp[idx] + fp[idx])
    recall = tp[idx] / tp[-1]
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def _binary_roc_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")
    y = positives[order]
    s = scores[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    boundary = np.nonzero(np.diff(s))[0]
    idx = np.concatenate([boundary, [len(s) - 1]])
    tpr = np.concatenate([[0.0], tp[idx] / tp[-1]])
    fpr = np.concatenate([[0.0], fp[idx] / fp[-1]])
    return float(np.trapezoid(tpr, fpr))


def average_precision_auc(scores: np.ndarray, labels) -> tuple[float, float, dict]:
    """Macro one-vs-rest average precision and trapezoidal ROC AUC.

    Degenerate classes (absent from the labels) are skipped with a warning
    and recorded in the returned notes.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} incompatible with {labels.shape[0]} labels")
    if scores.shape[0] < 2:
        raise ValueError("need at least 2 samples")
    aps, aucs, skipped = [], [], []
    for c in range(scores.shape[1]):
        pos = (labels == c).astype(np.int64)
        if pos.sum() == 0 or pos.sum() == len(pos):
            skipped.append(c)
            warnings.warn(f"class {c} is degenerate (all-positive or absent); skipped")
            continue
        aps.append(_binary_average_precision(scores[:, c], pos))
        aucs.append(_binary_roc_auc(scores[:, c], pos))
    if not aps:
        raise ValueError("every class was degenerate; AUC undefined")
    notes = {"skipped_classes": skipped}
    return float(np.mean(aps)), float(np.mean(aucs)), notes


# -- linear probe --------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 400
    patience: int = 10
    min_improvement: float = 1e-5
    seed: int = 0
    eval_on: str = "images"   # images | reconstructions


@dataclass
class ProbeResult:
    map: float
    auc: float
    accuracy: float
    epochs: int
    notes: dict


@dataclass
class ProbeHead:
    weight: np.ndarray
    bias: np.ndarray


def tokenizer_features(model: TokenizerModel, images: np.ndarray,
                       reconstruct: bool = False) -> np.ndarray:
    """Flattened quantized latent grids for a batch of canonical images."""
    feats = []
    for start in range(0, len(images), 64):
        x = ng.tensor(images[start:start + 64])
        latents = model.encoder.encode(x)
        if reconstruct:
            quant = vqmod.quantize(latents, model.codebook)
            recon = model.decoder.decode(quant.quantized)
            latents = model.encoder.encode(recon)
        quant = vqmod.quantize(latents, model.codebook)
        q = quant.quantized.data
        feats.append(q.reshape(q.shape[0], -1))
    return np.concatenate(feats)


def embedding_features(semantic, images: np.ndarray) -> np.ndarray:
    """Penultimate-layer features of the frozen vision encoder."""
    out = []
    for start in range(0, len(images), 64):
        out.append(semantic.vision.embed(ng.tensor(images[start:start + 64])).data)
    return np.concatenate(out)


def canonical_images(data: StageData) -> np.ndarray:
    return np.stack([canonical_image(img, hu) for img, hu in zip(data.images, data.is_hu)])


def train_probe_head(train_feats: np.ndarray, train_labels: np.ndarray,
                     test_feats: np.ndarray, test_labels: np.ndarray,
                     cfg: ProbeConfig = ProbeConfig()) -> tuple[ProbeHead, ProbeResult]:
    """Train a single linear layer to convergence; report peak test metrics.

    Convergence = train loss improving by less than ``min_improvement`` for
    ``patience`` consecutive epochs.
    """
    n, dim = train_feats.shape
    n_classes = int(max(train_labels.max(), test_labels.max())) + 1
    w = ng.tensor(np.zeros((dim, n_classes)), requires_grad=True)
    b = ng.tensor(np.zeros(n_classes), requires_grad=True)
    moments = {"w": (np.zeros_like(w.data), np.zeros_like(w.data)),
               "b": (np.zeros_like(b.data), np.zeros_like(b.data))}
    rng = np.random.default_rng(cfg.seed)

    best_loss = math.inf
    stale = 0
    peak_map = peak_auc = peak_acc = 0.0
    notes: dict = {}
    epochs_run = 0
    t = 0
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            x = ng.tensor(train_feats[idx])
            logits = ng.matmul(x, w) + b
            loss = ng.softmax_cross_entropy(logits, train_labels[idx])
            ng.zero_grads([w, b])
            ng.backward(loss)
            t += 1
            adamw_step({"w": w.data, "b": b.data}, {"w": w.grad, "b": b.grad},
                       moments, t, cfg.lr, (0.9, 0.999), 0.0)
            epoch_loss += loss.item() * len(idx)
        epoch_loss /= n
        epochs_run = epoch + 1

        test_logits = test_feats @ w.data + b.data
        m, a, notes = average_precision_auc(test_logits, test_labels)
        acc = float(np.mean(test_logits.argmax(axis=1) == test_labels))
        peak_map, peak_auc, peak_acc = max(peak_map, m), max(peak_auc, a), max(peak_acc, acc)

        if best_loss - epoch_loss < cfg.min_improvement:
            stale += 1
            if stale >= cfg.patience:
                break
        else:
            stale = 0
        best_loss = min(best_loss, epoch_loss)

    head = ProbeHead(w.data.copy(), b.data.copy())
    return head, ProbeResult(peak_map, peak_auc, peak_acc, epochs_run, notes)


def linear_probe(ckpt: Checkpoint, train_manifest: Manifest, test_manifest: Manifest,
                 root, cfg: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Freeze the tokenizer, fit the probe head on train features, report peaks."""
    _, model = load_model_from_checkpoint(ckpt)
    train_data = StageData(train_manifest, root, split="train")
    test_data = StageData(test_manifest, root, split="test")
    if len(set(test_data.labels.tolist())) < 2:
        raise ValueError("probe evaluation needs at least two classes in the test split")
    train_imgs = canonical_images(train_data)
    test_imgs = canonical_images(test_data)
    train_feats = tokenizer_features(model, train_imgs)
    test_feats = tokenizer_features(model, test_imgs, reconstruct=cfg.eval_on == "reconstructions")
    _, result = train_probe_head(train_feats, train_data.labels, test_feats,
                                 test_data.labels, cfg)
    return result


# -- reconstruction evaluation --------------------------------------------------

def reconstruct_images(model: TokenizerModel, images: np.ndarray) -> np.ndarray:
    out = []
    for start in range(0, len(images), 64):
        x = ng.tensor(images[start:start + 64])
        latents = model.encoder.encode(x)
        quant = vqmod.quantize(latents, model.codebook)
        out.append(model.decoder.decode(quant.quantized).data)
    return np.concatenate(out)


def reconstruction_metrics(ckpt: Checkpoint, manifest: Manifest, root, semantic,
                           split: str = "test") -> dict:
    """PSNR/SSIM/Frechet metrics of reconstructions over one manifest split."""
    _, model = load_model_from_checkpoint(ckpt)
    data = StageData(manifest, root, split=split)
    images = canonical_images(data)
    recons = reconstruct_images(model, images)
    psnrs = [psnr(r, x, data_range=2.0) for r, x in zip(recons, images)]
    ssims = [ssim(r, x, data_range=2.0) for r, x in zip(recons, images)]
    fd = frechet_distance(embedding_features(semantic, images),
                          embedding_features(semantic, recons))
    finite = [p for p in psnrs if math.isfinite(p)]
    return {
        "psnr": float(np.mean(finite)) if finite else math.inf,
        "ssim": float(np.mean(ssims)),
        "frechet": fd,
        "mse": float(np.mean((recons - images) ** 2)),
        "n_images": len(images),
    }


# -- report emission --------------------------------------------------------------

def error_map_u8(recon: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Absolute error scaled to the full 8-bit display range."""
    err = np.abs(np.asarray(recon) - np.asarray(target))
    if err.ndim == 3:
        err = err.max(axis=-1)
    peak = err.max()
    if peak <= 0:
        return np.zeros(err.shape, dtype=np.uint8)
    return np.round(err / peak * 255.0).astype(np.uint8)


def _to_display_u8(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.mean(axis=-1)
    return np.round((np.clip(arr, -1.0, 1.0) + 1.0) / 2.0 * 255.0).astype(np.uint8)


def emit_report(results: dict, out_dir, config_hash: str, checkpoint_hash: str,
                gallery: list = None) -> dict:
    """Write metrics.csv + metrics.json (and an optional reconstruction gallery).

    ``results`` maps dataset name -> {metric: value}. Returns written paths.
    """
    if not results:
        raise ValueError("no results to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValueError(f"cannot write report under {out}: {exc}") from None

    metrics = sorted({m for row in results.values() for m in row})
    csv_path = out / "metrics.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset"] + metrics)
        for name in sorted(results):
            writer.writerow([name] + [repr(float(results[name].get(m, math.nan))) for m in metrics])

    json_path = out / "metrics.json"
    payload = {"config_hash": config_hash, "checkpoint_hash": checkpoint_hash,
               "results": results}
    json_path.write_text(json.dumps(payload, sort_keys=True, indent=2))

    written = {"csv": str(csv_path), "json": str(json_path)}
    if gallery:
        gdir = out / "gallery"
        gdir.mkdir(exist_ok=True)
        for i, (target, recon) in enumerate(gallery):
            strip = np.concatenate([_to_display_u8(target), _to_display_u8(recon),
                                    error_map_u8(recon, target)], axis=1)
            write_pgm(gdir / f"recon_{i:03d}.pgm", strip)
        written["gallery"] = str(gdir)
    return written


def checkpoint_file_hash(path) -> str:
    return sha256_hex(Path(path).read_bytes())
