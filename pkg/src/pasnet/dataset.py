"""Sample files, dataset manifests, resizing and stratified folds.

Sample file layout (little-endian)::

    b"PASB" | u32 version=1 | u16 n_in | u16 H | u16 W | u8 label
    | float32 image[n_in*H*W] | u8 mask[n_in*H*W]

A dataset directory holds ``manifest.json`` and ``samples/*.pasb``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from scipy.ndimage import zoom

from .phantom import CLASS_NAMES, VolumeSample, generate_sample, sample_seed

SAMPLE_MAGIC = b"PASB"
SAMPLE_VERSION = 1
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sIHHHB")


class SampleFormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# single sample files


def encode_sample(v: VolumeSample) -> bytes:
    n_in, h, w = v.image.shape
    head = _HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, n_in, h, w, v.label)
    return head + np.ascontiguousarray(v.image, dtype="<f4").tobytes() + v.mask.astype(np.uint8).tobytes()


def decode_sample(buf: bytes, sample_id: str = "") -> VolumeSample:
    if len(buf) < _HEADER.size:
        raise SampleFormatError(f"truncated header: file ends at offset {len(buf)}, header needs {_HEADER.size}")
    magic, version, n_in, h, w, label = _HEADER.unpack_from(buf, 0)
    if magic != SAMPLE_MAGIC:
        raise SampleFormatError(f"bad magic {magic!r} at offset 0")
    if version != SAMPLE_VERSION:
        raise SampleFormatError(f"unsupported version {version} at offset 4")
    if label > 3:
        raise SampleFormatError(f"label {label} out of range at offset 14")
    n = n_in * h * w
    img_end = _HEADER.size + 4 * n
    end = img_end + n
    if len(buf) < end:
        part = "image" if len(buf) < img_end else "mask"
        raise SampleFormatError(f"truncated {part} data: file ends at offset {len(buf)}, expected {end}")
    if len(buf) > end:
        raise SampleFormatError(f"unexpected trailing bytes after offset {end}")
    image = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).astype(np.float32).reshape(n_in, h, w)
    mask = np.frombuffer(buf, dtype=np.uint8, count=n, offset=img_end).reshape(n_in, h, w).copy()
    if mask.max(initial=0) > 1:
        raise SampleFormatError(f"non-binary mask value in block starting at offset {img_end}")
    return VolumeSample(image, mask, int(label), sample_id)


def write_sample(v: VolumeSample, path) -> None:
    Path(path).write_bytes(encode_sample(v))


def load_sample(path) -> VolumeSample:
    path = Path(path)
    return decode_sample(path.read_bytes(), path.stem)


def normalize(v: VolumeSample, target_hw: int) -> VolumeSample:
    """Min-max rescale intensities to [0, 1] and resize to target_hw x target_hw.

    Images are resized bilinearly, masks by nearest neighbour.
    """
    if target_hw < 32 or target_hw % 32:
        raise ValueError(f"target_hw must be a positive multiple of 32, got {target_hw}")
    img = v.image.astype(np.float64)
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.clip(img, 0.0, 1.0)
    _, h, w = img.shape
    if (h, w) != (target_hw, target_hw):
        factors = (1, target_hw / h, target_hw / w)
        img = zoom(img, factors, order=1, mode="nearest", grid_mode=True)
        mask = zoom(v.mask, factors, order=0, mode="nearest", grid_mode=True)
    else:
        mask = v.mask.copy()
    return VolumeSample(np.clip(img, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8), v.label, v.sample_id)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class VolumeDataset:
    """Stacked volumes held in memory, ready for batching."""

    images: np.ndarray  # [N, n_in, H, W] float32
    masks: np.ndarray  # [N, n_in, H, W] uint8
    labels: np.ndarray  # [N] int64
    ids: List[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def geometry(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "VolumeDataset":
        idx = np.asarray(idx)
        return VolumeDataset(self.images[idx], self.masks[idx], self.labels[idx], [self.ids[i] for i in idx])

    @classmethod
    def from_samples(cls, samples: Sequence[VolumeSample]) -> "VolumeDataset":
        return cls(np.stack([s.image for s in samples]), np.stack([s.mask for s in samples]),
                   np.array([s.label for s in samples], dtype=np.int64), [s.sample_id for s in samples])


def _sample_plan(counts: Sequence[int]) -> List[Tuple[int, str]]:
    if len(counts) != len(CLASS_NAMES) or any(int(c) < 0 for c in counts):
        raise ValueError(f"counts must be four non-negative integers, got {counts!r}")
    plan = []
    for label, count in enumerate(counts):
        plan.extend((label, f"c{label}_{j:04d}") for j in range(int(count)))
    return plan


def make_dataset(counts: Sequence[int], geometry: tuple = (10, 64, 64), seed: int = 0) -> VolumeDataset:
    """Generate a phantom dataset in memory (no files)."""
    samples = [generate_sample(label, geometry, sample_seed(seed, i), sid)
               for i, (label, sid) in enumerate(_sample_plan(counts))]
    return VolumeDataset.from_samples(samples)


@dataclass
class DatasetManifest:
    version: int
    n_in: int
    height: int
    width: int
    seed: int
    records: List[dict]
    counts: List[int]
    root: Path = Path(".")

    def to_json(self) -> str:
        body = {
            "version": self.version,
            "n_in": self.n_in,
            "H": self.height,
            "W": self.width,
            "seed": self.seed,
            "class_names": list(CLASS_NAMES),
            "counts": self.counts,
            "records": self.records,
        }
        return json.dumps(body, indent=1, sort_keys=True) + "\n"

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        body = json.loads(path.read_text())
        m = cls(body["version"], body["n_in"], body["H"], body["W"], body.get("seed", 0),
                body["records"], body["counts"], path.parent)
        m.validate()
        return m

    def validate(self) -> None:
        if sum(self.counts) != len(self.records):
            raise ValueError(f"manifest counts sum to {sum(self.counts)} but list {len(self.records)} records")
        tally = [0] * len(CLASS_NAMES)
        for r in self.records:
            tally[r["label"]] += 1
            if not (self.root / r["path"]).is_file():
                raise FileNotFoundError(f"manifest record {r['id']} points to missing {r['path']}")
        if tally != list(self.counts):
            raise ValueError(f"manifest counts {self.counts} disagree with record labels {tally}")


def generate_dataset(counts: Sequence[int], geometry: tuple, seed: int, out_dir) -> DatasetManifest:
    """Write ``manifest.json`` and one ``samples/<id>.pasb`` file per sample."""
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    n_in, h, w = (int(g) for g in geometry)
    records = []
    for i, (label, sid) in enumerate(_sample_plan(counts)):
        v = generate_sample(label, (n_in, h, w), sample_seed(seed, i), sid)
        rel = f"samples/{sid}.pasb"
        write_sample(v, out / rel)
        records.append({"id": sid, "label": label, "path": rel})
    manifest = DatasetManifest(MANIFEST_VERSION, n_in, h, w, int(seed), records, [int(c) for c in counts], out)
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_dataset(root, target_hw: int = None) -> VolumeDataset:
    """Load every sample listed in a manifest, optionally normalising to target_hw."""
    m = DatasetManifest.read(root)
    samples = []
    for r in m.records:
        v = load_sample(m.root / r["path"])
        if v.label != r["label"]:
            raise SampleFormatError(f"{r['path']}: label {v.label} disagrees with manifest {r['label']}")
        v.sample_id = r["id"]
        if target_hw is not None and (v.image.shape[1:] != (target_hw, target_hw)):
            v = normalize(v, target_hw)
        samples.append(v)
    return VolumeDataset.from_samples(samples)


# ---------------------------------------------------------------------------
# stratified folds


@dataclass
class FoldPlan:
    folds: List[np.ndarray]
    seed: int

    @property
    def k(self) -> int:
        return len(self.folds)

    def split(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        """(train indices, validation indices) for fold i."""
        train = np.sort(np.concatenate([f for j, f in enumerate(self.folds) if j != i]))
        return train, self.folds[i]


def stratified_kfold(labels, k: int, seed: int) -> FoldPlan:
    """Shuffle each class, then deal its members round-robin over the folds.

    Each class starts dealing where the previous one stopped, so fold sizes
    stay within one of each other as well. A class smaller than k simply leaves some folds without it; only a
    dataset too small to give every fold a sample is rejected.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if len(labels) < k:
        raise ValueError(f"{len(labels)} samples cannot fill k={k} folds")
    rng = np.random.default_rng(seed)
    buckets: List[list] = [[] for _ in range(k)]
    start = 0
    for c in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == c))
        for j, idx in enumerate(members):
            buckets[(start + j) % k].append(int(idx))
        start = (start + len(members)) % k
    return FoldPlan([np.sort(np.array(b, dtype=np.int64)) for b in buckets], int(seed))
