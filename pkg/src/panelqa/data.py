"""Synthetic image corpus with analytically ordered quality labels, plus
manifest / PPM file I/O for user-supplied datasets.

Images are float arrays shaped (3, H, W) with values in [0, 1]. A manifest
pairs image references with scores; higher score means better quality.
Synthetic scores are a monotone proxy MOS: 1 - level / (levels - 1).
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .tensor import Rng

DISTORTION_KINDS = ("gaussian_blur", "white_noise", "contrast_reduction",
                    "blockiness")


@dataclass
class Sample:
    image_ref: Union[str, np.ndarray]
    score: float
    group_id: str
    kind: Optional[str] = None
    level: Optional[int] = None

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("sample score must be finite")
        if not self.group_id:
            raise ValueError("sample group_id must be non-empty")


@dataclass
class Manifest:
    samples: list[Sample]
    provenance: str = ""

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def scores(self) -> np.ndarray:
        return np.array([s.score for s in self.samples])

    def groups(self) -> list[str]:
        seen, out = set(), []
        for s in self.samples:
            if s.group_id not in seen:
                seen.add(s.group_id)
                out.append(s.group_id)
        return out


@dataclass
class DistortionSpec:
    kind: str
    level: int
    levels: int = 5

    def __post_init__(self):
        if self.kind not in DISTORTION_KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if not 0 <= self.level < self.levels:
            raise ValueError(f"level {self.level} outside 0..{self.levels - 1}")


def gen_base_images(count: int, hw: int, rng: Rng) -> list[np.ndarray]:
    """Procedural pristine images: gradient + shapes + band-limited texture."""
    if count < 1:
        raise ValueError("count must be >= 1")
    images = []
    yy, xx = np.meshgrid(np.linspace(0, 1, hw), np.linspace(0, 1, hw),
                         indexing="ij")
    for _ in range(count):
        img = np.zeros((3, hw, hw))
        for c in range(3):
            theta = rng.uniform((), 0, 2 * np.pi)
            ramp = np.cos(theta) * xx + np.sin(theta) * yy
            img[c] = 0.35 + 0.3 * (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
        n_shapes = int(rng.integers(3, 8))
        for _ in range(n_shapes):
            cy, cx = rng.uniform((2,))
            r = rng.uniform((), 0.05, 0.25)
            color = rng.uniform((3,), 0.05, 0.95)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < r ** 2
            if rng.uniform(()) < 0.5:  # square instead of disc
                mask = (np.abs(yy - cy) < r) & (np.abs(xx - cx) < r)
            for c in range(3):
                img[c][mask] = 0.6 * img[c][mask] + 0.4 * color[c]
        texture = gaussian_filter(rng.normal((hw, hw)),
                                  sigma=float(rng.uniform((), 0.8, 2.5)))
        img += 0.35 * texture / max(np.abs(texture).max(), 1e-9)
        images.append(np.clip(img, 0.0, 1.0))
    return images


def apply_distortion(image: np.ndarray, spec: DistortionSpec,
                     rng: Rng) -> np.ndarray:
    """Degrade an image; level 0 is exactly the identity, higher levels are
    strictly stronger. Output clamped to [0, 1]."""
    if spec.level == 0:
        return image
    lvl = spec.level
    if spec.kind == "gaussian_blur":
        out = np.stack([gaussian_filter(ch, sigma=0.8 * lvl) for ch in image])
    elif spec.kind == "white_noise":
        out = image + rng.normal(image.shape, std=0.06 * lvl)
    elif spec.kind == "contrast_reduction":
        out = 0.5 + (1.0 - 0.22 * lvl) * (image - 0.5)
    elif spec.kind == "blockiness":
        b = 2 * lvl  # block edge in pixels
        c, h, w = image.shape
        hb, wb = (h // b) * b, (w // b) * b
        out = image.copy()
        blocks = image[:, :hb, :wb].reshape(c, hb // b, b, wb // b, b)
        means = blocks.mean(axis=(2, 4), keepdims=True)
        out[:, :hb, :wb] = np.broadcast_to(means, blocks.shape).reshape(c, hb, wb)
    else:  # pragma: no cover - guarded by DistortionSpec
        raise ValueError(spec.kind)
    return np.clip(out, 0.0, 1.0)


def gen_synthetic_dataset(n_base: int, levels: int, kinds: Sequence[str],
                          rng: Rng, hw: int = 64) -> Manifest:
    """Every base image x kind x level becomes one sample held in memory."""
    if levels < 2:
        raise ValueError("levels must be >= 2")
    bases = gen_base_images(n_base, hw, rng.child(0))
    samples = []
    for bi, base in enumerate(bases):
        for kind in kinds:
            for level in range(levels):
                spec = DistortionSpec(kind, level, levels)
                img = apply_distortion(base, spec, rng.child(1, bi, level))
                samples.append(Sample(
                    image_ref=img,
                    score=1.0 - level / (levels - 1),
                    group_id=f"base{bi:04d}",
                    kind=kind, level=level))
    return Manifest(samples, provenance=f"synthetic n_base={n_base} "
                                        f"levels={levels} kinds={list(kinds)}")


def split(manifest: Manifest, train_frac: float, seed) -> tuple[Manifest, Manifest]:
    """Group-aware deterministic split; no group appears on both sides."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must be in (0, 1)")
    groups = manifest.groups()
    if len(groups) < 2:
        raise ValueError("need at least 2 groups to split")
    perm = Rng(("split", seed)).permutation(len(groups))
    n_train = int(round(train_frac * len(groups)))
    n_train = min(max(n_train, 1), len(groups) - 1)
    train_groups = {groups[i] for i in perm[:n_train]}
    train = [s for s in manifest.samples if s.group_id in train_groups]
    test = [s for s in manifest.samples if s.group_id not in train_groups]
    return (Manifest(train, manifest.provenance + " [train]"),
            Manifest(test, manifest.provenance + " [test]"))


def load_image(sample: Sample) -> np.ndarray:
    if isinstance(sample.image_ref, np.ndarray):
        return sample.image_ref
    return read_image(sample.image_ref)


# -- PPM / PGM and manifest files ---------------------------------------------

def write_ppm(path: str, image: np.ndarray) -> None:
    """Binary P6, 8-bit. Values in [0,1] map to 0..255."""
    c, h, w = image.shape
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(pixels.transpose(1, 2, 0).tobytes())


def read_image(path: str) -> np.ndarray:
    """Read P6 (color) or P5 (grayscale, expanded to 3 channels)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    magic = fields[0]
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit images supported")
    if magic == b"P6":
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
        img = data.reshape(h, w, 3).transpose(2, 0, 1)
    elif magic == b"P5":
        data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
        img = np.repeat(data.reshape(1, h, w), 3, axis=0)
    else:
        raise ValueError(f"{path}: unsupported format {magic!r}")
    return img.astype(np.float64) / 255.0


def write_manifest(path: str, manifest: Manifest) -> None:
    """CSV with header path,score,group; image_refs must be file paths."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("path,score,group\n")
        for s in manifest.samples:
            if not isinstance(s.image_ref, str):
                raise ValueError("write_manifest needs file-backed samples")
            fh.write(f"{s.image_ref},{s.score!r},{s.group_id}\n")


def read_manifest(path: str) -> Manifest:
    samples = []
    seen = set()
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "path,score,group":
            raise ValueError(f"{path}: bad manifest header {header!r}")
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise ValueError(f"{path}:{line_no}: expected 3 fields")
            ref, score, group = parts
            if ref in seen:
                raise ValueError(f"{path}:{line_no}: duplicate image {ref}")
            seen.add(ref)
            if not os.path.isabs(ref):
                ref = os.path.join(base, ref)
            samples.append(Sample(ref, float(score), group))
    return Manifest(samples, provenance=path)


def materialize(manifest: Manifest, out_dir: str) -> Manifest:
    """Write in-memory samples to PPM files under out_dir; returns a
    file-backed manifest with paths relative to out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    out = []
    for i, s in enumerate(manifest.samples):
        name = f"img{i:05d}.ppm"
        write_ppm(os.path.join(out_dir, name), load_image(s))
        out.append(Sample(name, s.score, s.group_id, s.kind, s.level))
    return Manifest(out, manifest.provenance)
