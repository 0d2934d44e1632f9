"""Deterministic synthetic phantom corpus.

Generates multi-style 2-D images and 3-D volumes with controlled
attributes (lesion presence/size/position, tissue class), structured
captions, and JSONL manifests with a stratified train/test split.
CT-style data stays in Hounsfield units on disk (16-bit raw) so the
windowing augmentation operates on genuine HU values; other styles are
stored as 8-bit PGM/PPM.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .util import derive_seed, make_rng

MODALITIES = ("ct_like", "mri_like", "derm_like")
MODALITY_SHORT = {"ct_like": "ct", "mri_like": "mri", "derm_like": "derm"}
SHORT_MODALITY = {v: k for k, v in MODALITY_SHORT.items()}
LESION_POSITIONS = ("ul", "ur", "ll", "lr", "center")
LESION_SIZES = ("small", "large")
CAPTION_KEYS = ("modality", "lesion", "size", "pos", "class")

AIR_HU = -1000.0
TISSUE_HU = 40.0
BONE_HU = 900.0
LESION_DELTA_HU = 160.0
HU_RANGE = (-1000.0, 2000.0)


@dataclass(frozen=True)
class PhantomSpec:
    modality_style: str
    lesion_present: bool
    lesion_size: str       # small | large | none
    lesion_position: str   # ul | ur | ll | lr | center | none
    tissue_class: int
    seed: int

    def __post_init__(self):
        if self.modality_style not in MODALITIES:
            raise ValueError(f"unknown modality style {self.modality_style!r}")
        if self.lesion_present:
            if self.lesion_size not in LESION_SIZES or self.lesion_position not in LESION_POSITIONS:
                raise ValueError("a present lesion needs a valid size and position")
        elif self.lesion_size != "none" or self.lesion_position != "none":
            raise ValueError("an absent lesion must have size/pos 'none'")
        if not 0 <= self.tissue_class <= 3:
            raise ValueError("tissue class must be in [0, 3]")

    def attributes(self) -> dict:
        return {
            "modality": MODALITY_SHORT[self.modality_style],
            "lesion": "present" if self.lesion_present else "absent",
            "size": self.lesion_size,
            "pos": self.lesion_position,
            "class": None,  # filled by the dataset renderer
        }


def caption_of(attributes: dict) -> str:
    """Canonical ordered attribute string, e.g. 'modality:ct;lesion:present;...'."""
    missing = [k for k in CAPTION_KEYS if k not in attributes or attributes[k] is None]
    if missing:
        raise KeyError(f"caption attributes missing: {missing}")
    return ";".join(f"{k}:{attributes[k]}" for k in CAPTION_KEYS)


def parse_caption(caption: str) -> dict:
    out = {}
    for part in caption.split(";"):
        key, _, value = part.partition(":")
        if not value:
            raise ValueError(f"malformed caption fragment {part!r}")
        out[key] = value
    missing = [k for k in CAPTION_KEYS if k not in out]
    if missing:
        raise ValueError(f"caption missing keys: {missing}")
    return out


# -- phantom geometry ---------------------------------------------------

_POSITION_OFFSETS = {
    "ul": (-0.38, -0.38), "ur": (-0.38, 0.38),
    "ll": (0.38, -0.38), "lr": (0.38, 0.38),
    "center": (0.0, 0.0),
}


def _coordinate_grid(shape):
    axes = [np.linspace(-1.0, 1.0, n) for n in shape]
    return np.meshgrid(*axes, indexing="ij")


def _texture(rng, coords, n_waves: int, amplitude: float, freq_scale: float) -> np.ndarray:
    out = np.zeros_like(coords[0])
    for _ in range(n_waves):
        freq = rng.uniform(1.0, 3.0) * freq_scale
        phase = rng.uniform(0.0, 2.0 * np.pi)
        direction = rng.normal(size=len(coords))
        direction /= np.linalg.norm(direction)
        arg = sum(f * c for f, c in zip(direction, coords)) * freq * np.pi
        out += np.cos(arg + phase)
    return out * (amplitude / max(n_waves, 1))


def _body_radius(rng, coords, tissue_class: int):
    """Normalized elliptical radius field; class shifts the eccentricity."""
    stretch = 1.0 + 0.12 * (tissue_class - 1.5)
    semi = [rng.uniform(0.62, 0.8) for _ in coords]
    semi[-1] *= stretch
    semi[-2] /= stretch
    centers = [rng.uniform(-0.05, 0.05) for _ in coords]
    return np.sqrt(sum(((c - c0) / s) ** 2 for c, c0, s in zip(coords, centers, semi)))


def _lesion_mask(spec: PhantomSpec, rng, coords, body_r) -> np.ndarray:
    oy, ox = _POSITION_OFFSETS[spec.lesion_position]
    radius = 0.13 if spec.lesion_size == "small" else 0.24
    jitter = rng.uniform(-0.05, 0.05, size=2)
    center = [0.0] * (len(coords) - 2) + [oy * 0.8 + jitter[0], ox * 0.8 + jitter[1]]
    r = np.sqrt(sum((c - c0) ** 2 for c, c0 in zip(coords, center)))
    return (r < radius) & (body_r < 0.78)


def make_phantom_volume(spec: PhantomSpec, shape: tuple) -> np.ndarray:
    """Render a (D, H, W) volume; bit-identical for identical specs."""
    if len(shape) != 3:
        raise ValueError(f"volume shape must be (D, H, W), got {shape}")
    if min(shape) < 8:
        raise ValueError(f"volume extents must all be >= 8, got {shape}")
    if spec.modality_style == "derm_like":
        raise ValueError("derm_like phantoms are 2-D colour images; use make_phantom_image")

    rng = make_rng(spec.seed, spec.modality_style, "volume")
    coords = _coordinate_grid(shape)
    body_r = _body_radius(rng, coords, spec.tissue_class)
    interior = body_r < 0.82
    shell = (body_r >= 0.82) & (body_r < 0.95)

    if spec.modality_style == "ct_like":
        vol = np.full(shape, AIR_HU)
        tex = _texture(rng, coords, 3, 28.0, 1.0 + 0.5 * spec.tissue_class)
        vol[interior] = TISSUE_HU + tex[interior]
        vol[shell] = BONE_HU + 60.0 * tex[shell] / 28.0
        if spec.lesion_present:
            lesion = _lesion_mask(spec, rng, coords, body_r)
            vol[lesion] = TISSUE_HU + LESION_DELTA_HU + tex[lesion] * 0.3
        vol += rng.normal(0.0, 4.0, size=shape)
        return np.clip(vol, HU_RANGE[0], HU_RANGE[1])

    # mri_like: arbitrary positive intensities
    vol = np.abs(rng.normal(0.0, 12.0, size=shape))
    tex = _texture(rng, coords, 3, 60.0, 1.0 + 0.5 * spec.tissue_class)
    vol[interior] = 420.0 + tex[interior]
    vol[shell] = 120.0 + 20.0 * tex[shell] / 60.0
    if spec.lesion_present:
        lesion = _lesion_mask(spec, rng, coords, body_r)
        vol[lesion] = 750.0 + tex[lesion] * 0.3
    vol += np.abs(rng.normal(0.0, 6.0, size=shape))
    return np.maximum(vol, 0.0)


def make_phantom_image(spec: PhantomSpec, hw: tuple):
    """Render a single 2-D image: HU floats (CT), positive floats (MRI),
    or an (H, W, 3) colour array in [0, 1] (derm)."""
    h, w = hw
    if spec.modality_style in ("ct_like", "mri_like"):
        vol = make_phantom_volume(spec, (8, h, w))
        return vol[4]
    if min(h, w) < 8:
        raise ValueError(f"image extents must be >= 8, got {hw}")
    rng = make_rng(spec.seed, spec.modality_style, "image")
    coords = _coordinate_grid((h, w))
    base = np.array([0.82, 0.64, 0.55]) * (1.0 + 0.05 * (spec.tissue_class - 1.5))
    tone = _texture(rng, coords, 3, 0.05, 1.5)
    img = np.clip(base[None, None, :] + tone[:, :, None], 0.0, 1.0)
    if spec.lesion_present:
        body_r = np.zeros((h, w))
        lesion = _lesion_mask(spec, rng, coords, body_r)
        img[lesion] = np.array([0.35, 0.2, 0.16]) + 0.2 * tone[lesion][:, None]
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


# -- file formats --------------------------------------------------------

def write_pgm(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise ValueError("PGM writer needs a 2-D uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM file")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 supported")
        w, h = int(dims[0]), int(dims[1])
        data = fh.read(h * w)
    if len(data) != h * w:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def write_ppm(path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError("PPM writer needs an (H, W, 3) uint8 array")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode())
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"P6":
            raise ValueError(f"{path}: not a binary PPM file")
        dims = fh.readline().split()
        maxval = int(fh.readline())
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 supported")
        w, h = int(dims[0]), int(dims[1])
        data = fh.read(h * w * 3)
    if len(data) != h * w * 3:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3)


HUV_MAGIC = b"HUV1"


def write_huv(path, volume: np.ndarray) -> None:
    """Raw signed 16-bit HU values; header = magic 'HUV1' + D, H, W as u16 LE."""
    arr = np.asarray(volume)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError("HUV writer needs a 2-D slice or 3-D volume")
    arr16 = np.round(arr).astype("<i2")
    d, h, w = arr16.shape
    if max(d, h, w) > 0xFFFF:
        raise ValueError("HUV extents exceed 16-bit header fields")
    with open(path, "wb") as fh:
        fh.write(HUV_MAGIC)
        fh.write(struct.pack("<HHH", d, h, w))
        fh.write(arr16.tobytes())


def read_huv(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != HUV_MAGIC:
        raise ValueError(f"{path}: bad magic at offset 0 (expected {HUV_MAGIC!r})")
    if len(blob) < 10:
        raise ValueError(f"{path}: truncated header at offset {len(blob)}")
    d, h, w = struct.unpack("<HHH", blob[4:10])
    expected = 10 + 2 * d * h * w
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated payload at offset {len(blob)} (expected {expected} bytes)")
    return np.frombuffer(blob[10:], dtype="<i2").reshape(d, h, w).astype(np.float64)


# -- manifests ------------------------------------------------------------

@dataclass
class Record:
    path: str
    caption: str | None
    labels: dict
    split: str
    tags: list = field(default_factory=list)

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be train/test, got {self.split!r}")


@dataclass
class Manifest:
    records: list

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if len(paths) != len(set(paths)):
            raise ValueError("manifest contains duplicate paths")

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        records = []
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ValueError(f"{path}:{line_no}: bad manifest line: {exc}") from None
                records.append(Record(**obj))
        return cls(records)


@dataclass(frozen=True)
class DatasetConfig:
    n_images: int = 512
    n_classes: int = 2
    modality: str = "ct_like"
    image_size: int = 32
    seed: int = 0
    captions: bool = True
    train_fraction: float = 0.8

    def __post_init__(self):
        if self.n_images <= 0:
            raise ValueError("n_images must be positive")
        if self.n_classes not in (2, 4):
            raise ValueError("supported class counts: 2 (lesion) or 4 (tissue)")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")


def _spec_for(cfg: DatasetConfig, index: int) -> tuple[PhantomSpec, int]:
    """Class-conditioned attribute sampling; class id = index % n_classes."""
    class_id = index % cfg.n_classes
    rng = make_rng(cfg.seed, "item", index)
    if cfg.n_classes == 2:
        lesion = class_id == 1
        tissue = int(rng.integers(0, 4))
    else:
        lesion = bool(rng.integers(0, 2))
        tissue = class_id
    size = str(rng.choice(LESION_SIZES)) if lesion else "none"
    pos = str(rng.choice(LESION_POSITIONS)) if lesion else "none"
    spec = PhantomSpec(cfg.modality, lesion, size, pos, tissue,
                       seed=derive_seed(cfg.seed, "phantom", index))
    return spec, class_id


def render_dataset(cfg: DatasetConfig, out_dir) -> Manifest:
    """Write images, captions, and a stratified-split manifest under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "images").mkdir(exist_ok=True)
    except OSError as exc:
        raise ValueError(f"output directory {out} is not writable: {exc}") from None

    per_class: dict[int, list[int]] = {}
    entries = []
    for i in range(cfg.n_images):
        spec, class_id = _spec_for(cfg, i)
        attrs = spec.attributes()
        attrs["class"] = class_id
        entries.append((i, spec, attrs, class_id))
        per_class.setdefault(class_id, []).append(i)

    test_ids = set()
    for class_id, ids in sorted(per_class.items()):
        order = make_rng(cfg.seed, "split", class_id).permutation(len(ids))
        n_train = int(len(ids) * cfg.train_fraction)
        test_ids.update(ids[j] for j in order[n_train:])

    records = []
    size = (cfg.image_size, cfg.image_size)
    for i, spec, attrs, class_id in entries:
        img = make_phantom_image(spec, size)
        if cfg.modality == "ct_like":
            name = f"images/{i:05d}.huv"
            write_huv(out / name, img)
        elif cfg.modality == "mri_like":
            lo, hi = img.min(), img.max()
            u8 = np.round((img - lo) / max(hi - lo, 1e-9) * 255).astype(np.uint8)
            name = f"images/{i:05d}.pgm"
            write_pgm(out / name, u8)
        else:
            name = f"images/{i:05d}.ppm"
            write_ppm(out / name, np.round(img * 255).astype(np.uint8))
        labels = {"class_id": class_id, "modality": attrs["modality"],
                  "lesion": attrs["lesion"], "size": attrs["size"],
                  "pos": attrs["pos"], "tissue": spec.tissue_class}
        records.append(Record(
            path=name,
            caption=caption_of(attrs) if cfg.captions else None,
            labels=labels,
            split="test" if i in test_ids else "train",
            tags=["clinical"],
        ))
    manifest = Manifest(records)
    manifest.save(out / "manifest.jsonl")
    return manifest


def load_image(record: Record, root) -> tuple[np.ndarray, bool]:
    """Load a record as channel-last (h, w, c) float64; returns (array, is_hounsfield).

    HU images come back in HU; everything else is mapped to [-1, 1].
    """
    path = Path(root) / record.path
    suffix = path.suffix.lower()
    if suffix == ".huv":
        vol = read_huv(path)
        sl = vol[0] if vol.shape[0] == 1 else vol[vol.shape[0] // 2]
        return sl[:, :, None], True
    if suffix == ".pgm":
        u8 = read_pgm(path)
        return (u8.astype(np.float64) / 255.0 * 2.0 - 1.0)[:, :, None], False
    if suffix == ".ppm":
        u8 = read_ppm(path)
        return u8.astype(np.float64) / 255.0 * 2.0 - 1.0, False
    raise ValueError(f"unsupported image format: {path}")


def audit_manifest(manifest: Manifest) -> None:
    """Raise if split/caption/label consistency is violated."""
    for r in manifest.records:
        if r.caption is not None:
            attrs = parse_caption(r.caption)
            if int(attrs["class"]) != int(r.labels["class_id"]):
                raise ValueError(f"{r.path}: caption class {attrs['class']} != label {r.labels['class_id']}")
            if attrs["lesion"] != r.labels["lesion"]:
                raise ValueError(f"{r.path}: caption lesion {attrs['lesion']} != label {r.labels['lesion']}")
    train = {r.path for r in manifest.split("train")}
    test = {r.path for r in manifest.split("test")}
    if train & test:
        raise ValueError("train/test splits overlap")
