"""Preprocessing, procedural knee phantoms and the on-disk paired dataset format.

On-disk layout: each tensor is a raw little-endian float32 file with a JSON sidecar
(``<file>.json``: shape, dtype, sha256), and ``manifest.json`` lists the samples.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from scipy import ndimage

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1
T1_SLICES = 80
KEPT_SLICES = 50


class ChecksumError(ValueError):
    pass


# --------------------------------------------------------------------------
# preprocessing
# --------------------------------------------------------------------------

def normalize_intensity(img) -> np.ndarray:
    """Affine map of ``[min, max]`` onto ``[-1, 1]``; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float64)
    if img.size == 0:
        raise ValueError("cannot normalize an empty image")
    lo, hi = img.min(), img.max()
    if hi == lo:
        return np.zeros(img.shape, dtype=np.float32)
    out = (img - lo) / (hi - lo) * 2.0 - 1.0
    # pin the extremes exactly
    out[img == lo] = -1.0
    out[img == hi] = 1.0
    return out.astype(np.float32)


def triplicate_channels(img) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim == 3:
        if img.shape[0] != 1:
            raise ValueError(f"expected a single-channel image, got {img.shape[0]} channels")
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected (H, W) or (1, H, W), got shape {img.shape}")
    return np.stack([img, img, img])


def collapse_channels(img) -> np.ndarray:
    img = np.asarray(img)
    # identical channels come back bit-exact; a float mean of three copies may not
    if all(np.array_equal(img[0], c) for c in img[1:]):
        return img[0].copy()
    return img.mean(axis=0)


def extract_slice_range(vol, lo: float = 0.16, hi: float = 0.78, count: int = KEPT_SLICES,
                        generic: bool = False) -> np.ndarray:
    """Keep ``count`` consecutive slices starting at proportional position ``lo``.

    The default mode requires the 80-slice T1 layout and keeps 1-based slices 13..62.
    ``generic`` accepts any depth and starts at ``floor(lo * S)`` (0-based).
    """
    vol = np.asarray(vol)
    n = vol.shape[0]
    if not generic and n != T1_SLICES:
        raise ValueError(f"expected {T1_SLICES} slices, got {n} (pass generic=True for other depths)")
    if not 0 <= lo < hi <= 1:
        raise ValueError("need 0 <= lo < hi <= 1")
    start = math.floor(lo * n)
    if start + count > n:
        raise ValueError(f"cannot take {count} slices from index {start} of {n}")
    return vol[start:start + count]


# --------------------------------------------------------------------------
# volumes and samples
# --------------------------------------------------------------------------

@dataclass
class Volume:
    slices: np.ndarray
    depths: np.ndarray
    provenance: str = "real"

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.float32)
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.slices.ndim != 3:
            raise ValueError(f"volume slices must be (S, H, W), got {self.slices.shape}")
        if self.depths.shape != (self.slices.shape[0],):
            raise ValueError("one depth value per slice required")
        if self.depths.size and (self.depths.min() < 0 or self.depths.max() > 1 or np.any(np.diff(self.depths) <= 0)):
            raise ValueError("depths must be strictly increasing within [0, 1]")
        if self.provenance not in ("real", "generated"):
            raise ValueError(f"unknown provenance {self.provenance!r}")

    @classmethod
    def from_array(cls, slices, provenance: str = "real") -> "Volume":
        s = np.asarray(slices).shape[0]
        return cls(slices, uniform_depths(s), provenance)

    @property
    def depth_count(self) -> int:
        return self.slices.shape[0]


def uniform_depths(s: int) -> np.ndarray:
    if s < 1:
        raise ValueError("need at least one slice")
    return np.array([0.0]) if s == 1 else np.arange(s) / (s - 1)


@dataclass
class RegionSpec:
    """Half-open pixel box ``[row0, row1) x [col0, col1)``."""

    row0: int
    row1: int
    col0: int
    col1: int

    def crop(self, img: np.ndarray) -> np.ndarray:
        out = np.asarray(img)[..., self.row0:self.row1, self.col0:self.col1]
        if out.shape[-1] == 0 or out.shape[-2] == 0:
            raise ValueError(f"empty region {self}")
        return out

    def as_list(self) -> list[int]:
        return [self.row0, self.row1, self.col0, self.col1]


@dataclass
class PairedSample:
    id: str
    xray: np.ndarray
    volume: Volume
    grade: int
    region: Optional[RegionSpec] = None

    def __post_init__(self):
        if self.grade not in range(5):
            raise ValueError(f"grade must be 0..4, got {self.grade}")


# --------------------------------------------------------------------------
# phantoms
# --------------------------------------------------------------------------

@dataclass
class PhantomConfig:
    resolution: int = 64
    slices: int = 16
    gap_healthy: float = 0.22  # joint-gap width at grade 0, in normalized [-1, 1] units
    gap_step: float = 0.04  # narrowing per grade
    gap_jitter: float = 0.005
    osteophyte_step: float = 0.035  # lateral spur amplitude per grade
    texture_amplitude: float = 0.08
    noise_std: float = 0.01
    edge_softness_px: float = 1.5

    def gap_width(self, grade: int) -> float:
        return self.gap_healthy - self.gap_step * grade


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def generate_phantom(grade: int, rng: np.random.Generator, cfg: PhantomConfig = PhantomConfig()):
    """One phantom: ``(xray (H, W), volume (S, H, W), geometry dict)``, intensities in [-1, 1]."""
    R, S = cfg.resolution, cfg.slices
    center = rng.uniform(-0.08, 0.08)
    half_width = rng.uniform(0.45, 0.55)
    femur_curve = rng.uniform(0.5, 0.8)
    tibia_curve = rng.uniform(0.05, 0.12)
    gap = cfg.gap_width(grade) + rng.uniform(-cfg.gap_jitter, cfg.gap_jitter)
    spur = cfg.osteophyte_step * grade
    tau = 2.0 * cfg.edge_softness_px / R

    z = np.linspace(-1.0, 1.0, S)[:, None, None]
    v = np.linspace(-1.0, 1.0, R)[None, :, None]
    u = np.linspace(-1.0, 1.0, R)[None, None, :]

    width = half_width * np.sqrt(np.clip(1.0 - (z / 0.9) ** 2, 0.0, None))
    width = width + spur * np.exp(-((v - center) ** 2) / (2 * 0.08**2)) * (width > 0)
    lateral = _sigmoid((width - np.abs(u)) / tau)
    femur = _sigmoid(((center - gap / 2 - femur_curve * u**2) - v) / tau)
    tibia = _sigmoid((v - (center + gap / 2 + tibia_curve * u**2)) / tau)
    bone = lateral * np.clip(femur + tibia, 0.0, 1.0)

    soft = _sigmoid((0.85 - np.abs(u)) / tau) * np.ones_like(z * v)
    noise = ndimage.gaussian_filter(rng.standard_normal((S, R, R)), sigma=(1.5, 4.0, 4.0))
    texture = cfg.texture_amplitude * noise / (noise.std() + 1e-12)
    raw = soft * (0.35 + texture) * (1.0 - bone) + 0.9 * bone
    volume = normalize_intensity(raw)

    xray = volume.mean(axis=0) + cfg.noise_std * rng.standard_normal((R, R))
    xray = np.clip(xray, -1.0, 1.0).astype(np.float32)

    to_row = lambda val: int(np.clip(round((val + 1.0) / 2.0 * (R - 1)), 0, R - 1))
    # joint-gap extent includes the curved bone edges out to the lateral bone margin
    gap_top = center - gap / 2 - femur_curve * half_width**2
    gap_bottom = center + gap / 2 + tibia_curve * half_width**2
    bone_third = ((center - gap / 2) - (-1.0)) / 3.0
    region = RegionSpec(to_row(gap_top - bone_third), to_row(gap_bottom + bone_third) + 1, 0, R)
    geometry = {"center": center, "gap_width": gap, "osteophyte": spur, "half_width": half_width, "region": region}
    return xray, volume, geometry


# --------------------------------------------------------------------------
# raw tensor files
# --------------------------------------------------------------------------

def write_tensor(path, array) -> str:
    path = Path(path)
    data = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    raw = data.tobytes()
    digest = hashlib.sha256(raw).hexdigest()
    path.write_bytes(raw)
    Path(str(path) + ".json").write_text(json.dumps({"shape": list(data.shape), "dtype": "float32-le", "sha256": digest}))
    return digest


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    side = Path(str(path) + ".json")
    if not path.exists() or not side.exists():
        raise FileNotFoundError(f"missing tensor file or sidecar: {path}")
    meta = json.loads(side.read_text())
    if meta.get("dtype") != "float32-le":
        raise ValueError(f"unsupported dtype {meta.get('dtype')!r} in {side}")
    raw = path.read_bytes()
    if hashlib.sha256(raw).hexdigest() != meta["sha256"]:
        raise ChecksumError(f"checksum mismatch for {path}")
    shape = tuple(meta["shape"])
    if len(raw) != 4 * int(np.prod(shape)):
        raise ValueError(f"size of {path} does not match shape {shape}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


# --------------------------------------------------------------------------
# manifest
# --------------------------------------------------------------------------

@dataclass
class SampleEntry:
    id: str
    grade: int
    xray: str
    volume: str
    split: Optional[str] = None
    region: Optional[list[int]] = None


@dataclass
class DatasetManifest:
    root: Path
    resolution: int
    slices: int
    samples: list[SampleEntry]
    generator: Optional[dict] = None
    split: Optional[dict] = None
    extra: dict = field(default_factory=dict)

    def validate(self, check_files: bool = True) -> None:
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate sample ids in manifest")
        for s in self.samples:
            if s.grade not in range(5):
                raise ValueError(f"sample {s.id}: grade {s.grade} out of range")
            if s.split not in (None, "train", "val"):
                raise ValueError(f"sample {s.id}: unknown split {s.split!r}")
            if check_files:
                for rel in (s.xray, s.volume):
                    if not (self.root / rel).exists():
                        raise FileNotFoundError(f"sample {s.id}: missing {rel}")

    def to_json(self) -> dict:
        return {
            "format": "pseudomri-dataset",
            "version": FORMAT_VERSION,
            "resolution": self.resolution,
            "slices": self.slices,
            "generator": self.generator,
            "split": self.split,
            "extra": self.extra,
            "samples": [asdict(s) for s in self.samples],
        }

    def save(self) -> Path:
        self.validate()
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        doc = json.loads(path.read_text())
        if doc.get("format") != "pseudomri-dataset" or doc.get("version") != FORMAT_VERSION:
            raise ValueError(f"{path} is not a version-{FORMAT_VERSION} dataset manifest")
        m = cls(path.parent, int(doc["resolution"]), int(doc["slices"]),
                [SampleEntry(**s) for s in doc["samples"]], doc.get("generator"), doc.get("split"), doc.get("extra") or {})
        m.validate()
        return m

    def ids(self, split: Optional[str] = None) -> list[str]:
        return [s.id for s in self.samples if split is None or s.split == split]


def save_dataset(samples, root, generator: Optional[dict] = None) -> DatasetManifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    if not samples:
        raise ValueError("cannot save an empty dataset")
    res = samples[0].xray.shape[-1]
    n_slices = samples[0].volume.depth_count
    entries = []
    for s in samples:
        if s.xray.shape != (res, res) or s.volume.slices.shape != (n_slices, res, res):
            raise ValueError(f"sample {s.id}: inconsistent shapes")
        write_tensor(root / f"{s.id}_xray.f32", s.xray)
        write_tensor(root / f"{s.id}_volume.f32", s.volume.slices)
        entries.append(SampleEntry(s.id, int(s.grade), f"{s.id}_xray.f32", f"{s.id}_volume.f32",
                                   region=s.region.as_list() if s.region else None))
    manifest = DatasetManifest(root, res, n_slices, entries, generator)
    manifest.save()
    return manifest


def load_sample(manifest: DatasetManifest, entry: SampleEntry) -> PairedSample:
    xray = read_tensor(manifest.root / entry.xray)
    vol = read_tensor(manifest.root / entry.volume)
    if xray.shape != (manifest.resolution,) * 2 or vol.shape != (manifest.slices,) + (manifest.resolution,) * 2:
        raise ValueError(f"sample {entry.id}: tensor shapes disagree with the manifest")
    if np.abs(xray).max() > 1 or np.abs(vol).max() > 1:
        raise ValueError(f"sample {entry.id}: intensities outside [-1, 1]")
    region = RegionSpec(*entry.region) if entry.region else None
    return PairedSample(entry.id, xray, Volume.from_array(vol), entry.grade, region)


def load_dataset(path, split: Optional[str] = None) -> Iterator[PairedSample]:
    manifest = path if isinstance(path, DatasetManifest) else DatasetManifest.load(path)
    for entry in manifest.samples:
        if split is None or entry.split == split:
            yield load_sample(manifest, entry)


def split_dataset(manifest: DatasetManifest, ratio: float = 0.7, seed: int = 0) -> DatasetManifest:
    """Deterministic shuffled train/val assignment; ``round(n * ratio)`` samples go to train."""
    n = len(manifest.samples)
    n_train = int(round(n * ratio))
    if n < 2 or n_train < 1 or n_train >= n:
        raise ValueError(f"cannot split {n} samples at ratio {ratio}")
    order = np.random.default_rng(seed).permutation(n)
    train = set(order[:n_train].tolist())
    for k, s in enumerate(manifest.samples):
        s.split = "train" if k in train else "val"
    manifest.split = {"ratio": ratio, "seed": seed, "train": n_train, "val": n - n_train}
    return manifest


def phantom_id(index: int) -> str:
    return f"ph{index:05d}"


def make_phantom_sample(index: int, seed: int, cfg: PhantomConfig = PhantomConfig()) -> PairedSample:
    """Phantom ``index`` of the corpus ``seed``; grades cycle 0..4 so every corpus is balanced."""
    grade = index % 5
    rng = np.random.default_rng([seed, index])
    xray, vol, geo = generate_phantom(grade, rng, cfg)
    return PairedSample(phantom_id(index), xray, Volume.from_array(vol), grade, geo["region"])


def generate_phantom_dataset(n: int, root, cfg: PhantomConfig = PhantomConfig(), seed: int = 0,
                             ratio: Optional[float] = 0.7) -> DatasetManifest:
    if n < 1:
        raise ValueError("need at least one phantom")
    samples = (make_phantom_sample(k, seed, cfg) for k in range(n))
    manifest = save_dataset(samples, root, generator={"seed": seed, "params": asdict(cfg)})
    if ratio is not None and n >= 2:
        split_dataset(manifest, ratio, seed)
        manifest.save()
    return manifest
