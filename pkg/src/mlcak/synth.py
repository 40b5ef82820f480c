"""Synthetic finding-bearing image generator.

Each finding class k owns an anchor on a ring around the image center.
Abnormal samples plant 1-3 bright elliptical blobs, one per distinct class,
jittered around the class anchor; finding bit k is set iff a class-k blob
was planted, and the global label is 1 iff any finding bit is set. The
background is a smooth low-frequency field plus Gaussian noise, so blobs
are the only class-bearing signal and shrink below the sampling grid as
resolution drops.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Manifest, SampleRecord, bilinear_resize, save_manifest, write_pgm
from .errors import ContractError

# background field: coarse grid resolution and value range, noise-free part
_BG_GRID = 5
_BG_LO, _BG_HI = 0.1, 0.3
# blobs are the brightest structures at native resolution by a wide margin,
# so a small model locks onto them reliably; after an aggressive box-average
# the peak is diluted by blob area over cell area, which drops it back into
# the background hills' brightness range
_BLOB_AMP_LO, _BLOB_AMP_HI = 0.6, 0.9
_RING_RADIUS_FRAC = 0.30
_JITTER_FRAC = 0.05
_MAX_BLOBS = 3
_TEST_FRACTION = 6  # one sample in six goes to the test split


@dataclass(frozen=True)
class SyntheticConfig:
    num_samples: int = 600
    num_findings: int = 8
    image_size: int = 224
    blob_radius_range: tuple[int, int] | None = None  # None → scaled to image_size
    noise_sigma: float = 0.02
    abnormal_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.num_samples < 1:
            problems.append(f"num_samples must be >= 1, got {self.num_samples}")
        if self.num_findings < 1:
            problems.append(f"num_findings must be >= 1, got {self.num_findings}")
        if self.image_size < 16:
            problems.append(f"image_size must be >= 16, got {self.image_size}")
        lo, hi = self.radii()
        if lo < 2:
            problems.append(f"blob radii must be >= 2 pixels, got min {lo}")
        if hi < lo:
            problems.append(f"blob_radius_range max {hi} < min {lo}")
        if hi > self.image_size // 4:
            problems.append(f"blob radius {hi} too large for image_size {self.image_size}")
        if not 0.0 <= self.abnormal_fraction <= 1.0:
            problems.append(
                f"abnormal_fraction must be in [0,1], got {self.abnormal_fraction}"
            )
        if self.noise_sigma < 0:
            problems.append(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if problems:
            raise ContractError("; ".join(problems))

    def radii(self) -> tuple[int, int]:
        # defaults sized so blobs span roughly one patch at native resolution
        # but wash out under aggressive box-downscaling
        if self.blob_radius_range is not None:
            return tuple(int(r) for r in self.blob_radius_range)
        return max(2, self.image_size // 24), max(3, self.image_size // 16)


@dataclass(frozen=True)
class Blob:
    finding_class: int
    cy: float
    cx: float
    ry: float
    rx: float
    amplitude: float


def class_anchor(config: SyntheticConfig, k: int) -> tuple[float, float]:
    """Center of the class-k location prior (a point on a ring)."""
    s = config.image_size
    angle = 2.0 * np.pi * k / config.num_findings
    return (
        s / 2.0 + _RING_RADIUS_FRAC * s * np.sin(angle),
        s / 2.0 + _RING_RADIUS_FRAC * s * np.cos(angle),
    )


def render_sample(
    config: SyntheticConfig, rng: np.random.Generator, classes
) -> tuple[np.ndarray, list[Blob]]:
    """One image carrying a blob for each class index in `classes`.

    Returns the [0,1] image and the planted blob geometry (location in
    native pixels), which downstream localization checks rely on.
    """
    s = config.image_size
    coarse = rng.uniform(_BG_LO, _BG_HI, size=(_BG_GRID, _BG_GRID))
    image = bilinear_resize(coarse, s)
    image += rng.normal(0.0, config.noise_sigma, size=(s, s))

    lo, hi = config.radii()
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    blobs: list[Blob] = []
    for k in sorted(int(c) for c in classes):
        ay, ax = class_anchor(config, k)
        ry = rng.uniform(lo, hi)
        rx = rng.uniform(lo, hi)
        jitter = _JITTER_FRAC * s
        cy = float(np.clip(ay + rng.normal(0.0, jitter), hi, s - 1 - hi))
        cx = float(np.clip(ax + rng.normal(0.0, jitter), hi, s - 1 - hi))
        amp = rng.uniform(_BLOB_AMP_LO, _BLOB_AMP_HI)
        r2 = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        image += amp * np.maximum(0.0, 1.0 - r2)
        blobs.append(Blob(k, cy, cx, ry, rx, amp))
    return np.clip(image, 0.0, 1.0), blobs


def generate_synthetic(config: SyntheticConfig, out_dir) -> tuple[Manifest, Manifest]:
    """Write a full dataset directory and return (train, test) manifests.

    Deterministic for a fixed config: same bytes on every run. One sample
    in six lands in the test split.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(config.seed)
    names = [f"c{k}" for k in range(config.num_findings)]

    records: list[SampleRecord] = []
    for i in range(config.num_samples):
        abnormal = rng.random() < config.abnormal_fraction
        if abnormal:
            n_blobs = int(rng.integers(1, _MAX_BLOBS + 1))
            n_blobs = min(n_blobs, config.num_findings)
            classes = rng.choice(config.num_findings, size=n_blobs, replace=False)
        else:
            classes = np.asarray([], dtype=np.int64)
        image, _ = render_sample(config, rng, classes)
        image_id = f"s{i:05d}"
        rel_path = f"images/{image_id}.pgm"
        write_pgm(out_dir / rel_path, image)
        findings = np.zeros(config.num_findings, dtype=np.int64)
        findings[classes] = 1
        records.append(SampleRecord(image_id, rel_path, findings, int(findings.any())))

    test_every = _TEST_FRACTION
    train_recs = [r for i, r in enumerate(records) if i % test_every != test_every - 1]
    test_recs = [r for i, r in enumerate(records) if i % test_every == test_every - 1]
    if not test_recs:  # tiny sets still need a test row
        test_recs = [train_recs.pop()]

    def _manifest(recs, split):
        return Manifest(
            version=1,
            num_findings=config.num_findings,
            finding_names=names,
            records=recs,
            split=split,
            base_dir=out_dir,
        )

    train = _manifest(train_recs, "train")
    test = _manifest(test_recs, "test")
    echo = dataclasses.asdict(config)
    echo["radii"] = list(config.radii())
    echo["num_train"] = len(train_recs)
    echo["num_test"] = len(test_recs)
    (out_dir / "generation.json").write_text(
        json.dumps(echo, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    save_manifest(train, out_dir / "train.csv")
    save_manifest(test, out_dir / "test.csv")
    return train, test
