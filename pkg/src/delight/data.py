"""Unpaired dataset ingestion, splitting and batch sampling.

Images are decoded with Pillow to float32 ``(3, H, W)`` tensors in [0, 1].
The manifest is built in lexicographic order so the same directories always
give the same records, and all randomness comes from a caller-owned
``numpy.random.Generator``.
"""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

from .errors import ConfigError, DataError
from .imaging import patch_origins

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
ROLES = ("low", "normal")
SPLITS = ("train", "val", "test")

log = logging.getLogger(__name__)


def load_image(path) -> torch.Tensor:
    with PILImage.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def to_uint8(img) -> np.ndarray:
    """HxWx3 uint8 from a [0, 1] image, rounding half to even."""
    if hasattr(img, "detach"):
        img = img.detach().cpu().numpy()
        if img.ndim == 3 and img.shape[0] in (1, 3):
            img = img.transpose(1, 2, 0)
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return np.rint(arr * 255.0).astype(np.uint8)


def save_png(img, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(to_uint8(img)).save(path, format="PNG")


def pad_to_multiple(img: torch.Tensor, k: int, mode="reflect"):
    """Pad the bottom/right edges up to multiples of ``k``; returns (padded, (h, w))."""
    h, w = img.shape[-2:]
    ph, pw = (-h) % k, (-w) % k
    if not (ph or pw):
        return img, (h, w)
    x = img.unsqueeze(0) if img.dim() == 3 else img
    if mode == "reflect" and (ph >= h or pw >= w):
        mode = "replicate"
    x = F.pad(x, (0, pw, 0, ph), mode=mode)
    return (x.squeeze(0) if img.dim() == 3 else x), (h, w)


def center_pad_to_multiple(img: torch.Tensor, k: int):
    h, w = img.shape[-2:]
    ph, pw = (-h) % k, (-w) % k
    if not (ph or pw):
        return img
    pad = (pw // 2, pw - pw // 2, ph // 2, ph - ph // 2)
    return F.pad(img.unsqueeze(0), pad, mode="replicate").squeeze(0)


def resize_long_side(img: torch.Tensor, long_side: int):
    h, w = img.shape[-2:]
    scale = long_side / max(h, w)
    if scale == 1:
        return img
    size = (max(1, round(h * scale)), max(1, round(w * scale)))
    out = F.interpolate(img.unsqueeze(0), size=size, mode="bilinear", align_corners=False, antialias=True)
    return out.squeeze(0).clamp(0, 1)


@dataclass(frozen=True)
class Record:
    path: str       # relative to the dataset root
    role: str
    split: str
    width: int
    height: int


@dataclass
class UnpairedDataset:
    root: Path
    records: list
    resize: str = "none"         # none | pad8 | long_side
    long_side: int = 1008
    rejects: list = field(default_factory=list)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def select(self, role, split="train"):
        return [r for r in self.records if r.role == role and r.split == split]

    def image(self, record: Record) -> torch.Tensor:
        img = self._cache.get(record.path)
        if img is None:
            img = load_image(self.root / record.path)
            if self.resize == "long_side":
                img = resize_long_side(img, self.long_side)
            elif self.resize == "pad8":
                img = center_pad_to_multiple(img, 8)
            self._cache[record.path] = img
        return img

    def manifest_lines(self):
        return [f"{r.path}\t{r.role}\t{r.split}\t{r.width}\t{r.height}" for r in self.records]

    def write_manifest(self, path):
        Path(path).write_text("\n".join(self.manifest_lines()) + "\n", encoding="utf-8")


def _scan(directory: Path, root: Path, role: str, split: str, rejects: list):
    if not directory.is_dir():
        raise ConfigError(f"{role} image directory does not exist: {directory}")
    out = []
    for p in sorted(directory.iterdir(), key=lambda q: q.name):
        if not p.is_file() or p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            with PILImage.open(p) as im:
                im.load()
                w, h = im.size
        except Exception as exc:  # noqa: BLE001 - any decoder failure rejects the file
            log.warning("rejecting undecodable image %s: %s", p, exc)
            rejects.append((str(p), str(exc)))
            continue
        out.append(Record(p.relative_to(root).as_posix(), role, split, w, h))
    if not out:
        raise ConfigError(f"no decodable images in {role} directory {directory}")
    return out


def load_dataset(low_dir, normal_dir, test_low_dir=None, test_normal_dir=None,
                 resize="none", long_side=1008) -> UnpairedDataset:
    """Scan image directories into a manifest; all records start in ``train`` (or ``test``)."""
    if resize not in ("none", "pad8", "long_side"):
        raise ConfigError(f"unknown resize policy {resize!r}")
    dirs = [(low_dir, "low", "train"), (normal_dir, "normal", "train"),
            (test_low_dir, "low", "test"), (test_normal_dir, "normal", "test")]
    dirs = [(Path(d).resolve(), role, split) for d, role, split in dirs if d]
    root = Path(_common_root([d for d, _, _ in dirs]))
    rejects, records = [], []
    for d, role, split in dirs:
        records += _scan(d, root, role, split, rejects)
    if len({r.path for r in records}) != len(records):
        raise ConfigError("the same image is listed under more than one role or split")
    return UnpairedDataset(root=root, records=records, resize=resize, long_side=long_side, rejects=rejects)


def _common_root(paths):
    return os.path.commonpath([str(p) for p in paths]) if len(paths) > 1 else str(paths[0].parent)


def split(dataset: UnpairedDataset, val_fraction: float, seed: int) -> UnpairedDataset:
    """Move a seeded ``val_fraction`` of each role's train records into ``val``."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    chosen = set()
    for role in ROLES:
        train = [r.path for r in dataset.records if r.role == role and r.split == "train"]
        n_val = int(math.floor(len(train) * val_fraction + 0.5))
        if n_val:
            chosen.update(train[i] for i in rng.permutation(len(train))[:n_val])
    records = [replace(r, split="val") if r.path in chosen else r for r in dataset.records]
    return replace(dataset, records=records, _cache=dataset._cache)


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int
    crop: int
    hflip: bool = True
    rot90: bool = False
    divisor: int = 8

    @classmethod
    def for_stage(cls, stage, batch_size, crop, hflip=True, rot90=None):
        """Stage I flips only and needs crops divisible by 8; Stage II also rotates and needs 4."""
        if stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {stage}")
        rot = (stage == 2) if rot90 is None else rot90
        return cls(batch_size, crop, hflip=hflip, rot90=rot, divisor=8 if stage == 1 else 4)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop % self.divisor:
            raise ValueError(f"crop {self.crop} must be divisible by {self.divisor}")


def augment(img: torch.Tensor, rng: np.random.Generator, hflip: bool, rot90: bool) -> torch.Tensor:
    if hflip and rng.random() < 0.5:
        img = torch.flip(img, dims=(-1,))
    if rot90:
        k = int(rng.integers(4))
        if k:
            img = torch.rot90(img, k, dims=(-2, -1))
    return img


def random_crop(img, size, rng, path="image"):
    h, w = img.shape[-2:]
    if size > min(h, w):
        raise ValueError(f"crop {size} larger than {path} ({h}x{w})")
    (r, c), = patch_origins(h, w, size, 1, rng)
    return img[..., r:r + size, c:c + size]


def sample_batch(dataset: UnpairedDataset, spec: BatchSpec, rng: np.random.Generator, split_name="train",
                 return_ids=False):
    """Independently drawn, cropped and augmented (low, normal) batches, each ``(B, 3, crop, crop)``.

    With ``return_ids`` a third element lists the source paths per item.
    """
    pools = {role: dataset.select(role, split_name) for role in ROLES}
    for role, pool in pools.items():
        if not pool:
            raise DataError(f"no {role} images in the {split_name} split")
    out = {role: [] for role in ROLES}
    ids = []
    for _ in range(spec.batch_size):
        for role in ROLES:
            rec = pools[role][int(rng.integers(len(pools[role])))]
            img = random_crop(dataset.image(rec), spec.crop, rng, rec.path)
            out[role].append(augment(img, rng, spec.hflip, spec.rot90))
            ids.append(rec.path)
    if return_ids:
        return torch.stack(out["low"]), torch.stack(out["normal"]), ids
    return torch.stack(out["low"]), torch.stack(out["normal"])
