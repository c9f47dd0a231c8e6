"""Volume containers, the HVOL file format, and synthetic benchmark data.

The three synthetic classes are geometric analogues only (bright ellipsoid
with a halo, a faint near-surface patch, an angular wedge); they exercise
the pipeline and are not medical claims. Generation is a pure function of
(spec, seed): per-sample RNGs are spawned from one seed sequence, and
volumes round-trip through f32 on disk so two `synth` runs are bit-equal.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ParameterError, StateError

CLASS_NAMES = ("glioma-like", "fcd-like", "infarct-like")

_HVOL_MAGIC = b"HVOL"


@dataclass
class Volume:
    data: np.ndarray  # (C, D, H, W) float64
    spacing: tuple = (1.0, 1.0, 1.0)


@dataclass
class MaskVolume:
    data: np.ndarray  # (D, H, W) bool
    spacing: tuple = (1.0, 1.0, 1.0)


@dataclass
class Sample:
    volume: Volume
    mask: MaskVolume
    label: int


# ---------------------------------------------------------------------------
# HVOL: magic, u32 version, u32 C,D,H,W, u8 dtype(0=f32 image, 1=u8 mask),
# 3*f32 spacing, little-endian payload

def save_hvol(path: str, obj):
    if isinstance(obj, Volume):
        payload = obj.data.astype("<f4")
        c, d, h, w = payload.shape
        dtype = 0
    elif isinstance(obj, MaskVolume):
        payload = obj.data.astype(np.uint8)
        d, h, w = payload.shape
        c = 1
        dtype = 1
    else:
        raise ParameterError(f"cannot serialize {type(obj).__name__} as HVOL")
    header = struct.pack("<4sIIIIIB3f", _HVOL_MAGIC, 1, c, d, h, w, dtype, *map(float, obj.spacing))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())
    os.replace(tmp, path)


def load_hvol(path: str):
    if not os.path.exists(path):
        raise StateError(f"volume file not found: {path}")
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, c, d, h, w, dtype, s0, s1, s2 = struct.unpack_from("<4sIIIIIB3f", raw, 0)
    if magic != _HVOL_MAGIC or version != 1:
        raise StateError(f"bad HVOL header in {path}")
    off = struct.calcsize("<4sIIIIIB3f")
    spacing = (float(s0), float(s1), float(s2))
    if dtype == 0:
        arr = np.frombuffer(raw, dtype="<f4", count=c * d * h * w, offset=off)
        return Volume(arr.astype(np.float64).reshape(c, d, h, w), spacing)
    if dtype == 1:
        arr = np.frombuffer(raw, dtype=np.uint8, count=d * h * w, offset=off)
        return MaskVolume(arr.reshape(d, h, w).astype(bool), spacing)
    raise StateError(f"unknown HVOL dtype flag {dtype} in {path}")


# ---------------------------------------------------------------------------
# synthetic benchmark

@dataclass
class SynthSpec:
    n: int = 60
    shape: tuple = (32, 32, 32)
    modalities: int = 2
    spacing: tuple = (1.0, 1.0, 1.0)
    class_mix: tuple = (1 / 3, 1 / 3, 1 / 3)
    # per-class lesion radius ranges in voxels
    glioma_radius: tuple = (3.5, 6.0)
    fcd_radius: tuple = (2.0, 3.5)
    wedge_angle_deg: tuple = (18.0, 30.0)

    def validate(self):
        if self.n < 1:
            raise ParameterError("dataset size must be >= 1")
        if min(self.shape) < 12:
            raise ParameterError(f"volume shape {self.shape} too small for the generators")
        if self.glioma_radius[1] * 2 >= min(self.shape):
            raise ParameterError("lesion radius range exceeds the volume extent")
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ParameterError("class mix must sum to 1")


def _class_counts(n: int, mix) -> list[int]:
    # largest-remainder allocation so counts are exact and deterministic
    raw = [n * m for m in mix]
    counts = [int(np.floor(r)) for r in raw]
    rem = n - sum(counts)
    order = np.argsort([c - r for c, r in zip(counts, raw)])
    for i in range(rem):
        counts[order[i]] += 1
    return counts


def _background(rng: np.random.Generator, shape, modalities):
    vol = np.empty((modalities,) + tuple(shape))
    for m in range(modalities):
        coarse = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=4.0)
        vol[m] = 0.3 * coarse / max(coarse.std(), 1e-9) + rng.standard_normal(shape) * 0.08
    return vol


def _coord_grids(shape):
    return np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij")


def _ellipsoid(shape, center, radii):
    zz, yy, xx = _coord_grids(shape)
    q = ((zz - center[0]) / radii[0]) ** 2 + ((yy - center[1]) / radii[1]) ** 2 + (
        (xx - center[2]) / radii[2]) ** 2
    return q


def _gen_glioma(rng, spec: SynthSpec):
    shape = spec.shape
    r = rng.uniform(*spec.glioma_radius, size=3)
    margin = r + 3.0
    center = [rng.uniform(m, s - 1 - m) for m, s in zip(margin, shape)]
    q = _ellipsoid(shape, center, r)
    core = q <= 1.0
    halo = (q <= 2.2) & ~core
    vol = _background(rng, shape, spec.modalities)
    bump = ndimage.gaussian_filter(core.astype(float), 0.7)
    vol[1] += 1.9 * bump + 0.7 * halo  # second modality dominant
    vol[0] += 0.6 * bump + 0.25 * halo
    return vol, core


def _gen_fcd(rng, spec: SynthSpec):
    shape = spec.shape
    r = rng.uniform(*spec.fcd_radius, size=3)
    axis = int(rng.integers(0, 3))
    side = int(rng.integers(0, 2))
    center = [rng.uniform(r[i] + 2.0, shape[i] - 3.0 - r[i]) for i in range(3)]
    depth = rng.uniform(2.5, 4.5) + r[axis]
    center[axis] = depth if side == 0 else shape[axis] - 1 - depth  # hugs one face
    q = _ellipsoid(shape, center, r)
    region = q <= 1.0
    vol = _background(rng, shape, spec.modalities)
    blur = ndimage.gaussian_filter(region.astype(float), 1.0)  # low-contrast smear
    vol[0] += 0.55 * blur
    vol[1] += 0.45 * blur
    return vol, region


def _gen_infarct(rng, spec: SynthSpec):
    shape = spec.shape
    zz, yy, xx = _coord_grids(shape)
    apex = np.array([rng.uniform(0.35, 0.65) * (s - 1) for s in shape])
    direction = rng.standard_normal(3)
    direction /= np.linalg.norm(direction)
    rel = np.stack([zz - apex[0], yy - apex[1], xx - apex[2]])
    dist = np.sqrt((rel ** 2).sum(axis=0)) + 1e-9
    cosang = (rel[0] * direction[0] + rel[1] * direction[1] + rel[2] * direction[2]) / dist
    half_angle = np.deg2rad(rng.uniform(*spec.wedge_angle_deg))
    r_max = rng.uniform(0.45, 0.7) * min(shape) / 2 + 4.0
    wedge = (cosang >= np.cos(half_angle)) & (dist >= 2.0) & (dist <= r_max)
    vol = _background(rng, shape, spec.modalities)
    bump = ndimage.gaussian_filter(wedge.astype(float), 0.7)
    vol[0] += 1.6 * bump  # first modality dominant
    vol[1] += 0.5 * bump
    return vol, wedge


_GENERATORS = (_gen_glioma, _gen_fcd, _gen_infarct)


def synth_dataset(spec: SynthSpec, seed: int) -> list[Sample]:
    """Deterministic synthetic samples; labels cycle through the class plan."""
    spec.validate()
    counts = _class_counts(spec.n, spec.class_mix)
    # round-robin assignment keeps any prefix/suffix split roughly balanced
    stocks = list(counts)
    final_labels = []
    c = 0
    for _ in range(spec.n):
        while stocks[c % len(stocks)] == 0:
            c += 1
        final_labels.append(c % len(stocks))
        stocks[c % len(stocks)] -= 1
        c += 1

    children = np.random.SeedSequence(seed).spawn(spec.n)
    out = []
    for i, lab in enumerate(final_labels):
        rng = np.random.default_rng(children[i])
        for attempt in range(8):
            vol, mask = _GENERATORS[lab](rng, spec)
            if mask.any():
                break
        else:
            raise ParameterError(f"generator for class {lab} produced an empty mask")
        sample = Sample(
            volume=Volume(vol.astype("<f4").astype(np.float64), spec.spacing),
            mask=MaskVolume(mask, spec.spacing),
            label=lab,
        )
        out.append(sample)
    return out


def save_dataset(samples: list[Sample], out_dir: str, meta: dict | None = None):
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for i, s in enumerate(samples):
        save_hvol(os.path.join(out_dir, f"vol_{i:04d}.hvol"), s.volume)
        save_hvol(os.path.join(out_dir, f"mask_{i:04d}.hvol"), s.mask)
        rows.append(f"{i},{s.label},{CLASS_NAMES[s.label]}")
    tmp = os.path.join(out_dir, f"labels.csv.tmp.{os.getpid()}")
    with open(tmp, "w") as fh:
        fh.write("index,label,class_name\n")
        fh.write("\n".join(rows) + "\n")
    os.replace(tmp, os.path.join(out_dir, "labels.csv"))
    if meta is not None:
        tmp = os.path.join(out_dir, f"meta.json.tmp.{os.getpid()}")
        with open(tmp, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, os.path.join(out_dir, "meta.json"))


def load_dataset(data_dir: str) -> list[Sample]:
    labels_path = os.path.join(data_dir, "labels.csv")
    if not os.path.exists(labels_path):
        raise StateError(f"no labels.csv in {data_dir}")
    samples = []
    with open(labels_path) as fh:
        next(fh)
        for line in fh:
            if not line.strip():
                continue
            idx, label, _ = line.strip().split(",")
            vol = load_hvol(os.path.join(data_dir, f"vol_{int(idx):04d}.hvol"))
            mask = load_hvol(os.path.join(data_dir, f"mask_{int(idx):04d}.hvol"))
            samples.append(Sample(volume=vol, mask=mask, label=int(label)))
    return samples
