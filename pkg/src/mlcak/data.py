"""Dataset manifests, PGM image I/O, resolution degradation, batch iteration.

On-disk layout of a dataset directory::

    <dir>/images/*.pgm      binary PGM (P5, maxval 255)
    <dir>/train.csv         manifest, schema below
    <dir>/test.csv
    <dir>/generation.json   present only for synthetic sets (config echo)

Manifest CSV schema: header ``image_id,image_path,global_label,f_<name1>,...``
with 0/1 values, UTF-8, LF line endings. ``image_path`` is relative to the
dataset directory.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, ParseError, ShapeError

MANIFEST_VERSION = 1


@dataclass
class SampleRecord:
    image_id: str
    image_path: str
    findings: np.ndarray  # F-length 0/1 vector
    global_label: int  # 0 normal, 1 abnormal


@dataclass
class Manifest:
    version: int
    num_findings: int
    finding_names: list[str]
    records: list[SampleRecord]
    split: str  # "train" or "test"
    base_dir: Path | None = None  # where image_path entries resolve; not serialized
    _image_cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.records)

    def label_matrix(self) -> np.ndarray:
        """[N, F] finding matrix in record order."""
        if not self.records:
            return np.zeros((0, self.num_findings))
        return np.stack([r.findings for r in self.records]).astype(np.float64)

    def global_labels(self) -> np.ndarray:
        return np.asarray([r.global_label for r in self.records], dtype=np.int64)

    def image(self, record: SampleRecord) -> np.ndarray:
        """Decoded [0,1] image for one record (cached)."""
        if record.image_path not in self._image_cache:
            if self.base_dir is None:
                raise ContractError("manifest has no base_dir; load it from disk first")
            self._image_cache[record.image_path] = load_image(self.base_dir / record.image_path)
        return self._image_cache[record.image_path]

    def images(self) -> np.ndarray:
        """[N, S, S] stack of all images in record order."""
        if not self.records:
            raise ContractError("manifest has no records")
        return np.stack([self.image(r) for r in self.records])


@dataclass(frozen=True)
class ResolutionSpec:
    """native -> target (box downscale) -> model_input (bilinear resize)."""

    native: int = 224
    target: int = 224
    model_input: int = 224
    custom: bool = False  # blesses a target that does not divide native

    def __post_init__(self):
        if min(self.native, self.target, self.model_input) < 1:
            raise ContractError("resolution fields must be positive")
        if self.model_input > self.native:
            raise ContractError(
                f"model_input {self.model_input} exceeds native {self.native}"
            )
        if self.target > self.native:
            raise ContractError(f"target {self.target} exceeds native {self.native}")
        if self.native % self.target != 0 and not self.custom:
            raise ContractError(
                f"target {self.target} does not divide native {self.native}; "
                "pass a power-of-two divisor or set custom=True"
            )


# ---------------------------------------------------------------------------
# PGM


def write_pgm(path, image01: np.ndarray) -> None:
    """Write a [0,1] float image as binary PGM (P5, maxval 255)."""
    img = np.asarray(image01, dtype=np.float64)
    if img.ndim != 2:
        raise ShapeError(f"PGM writer needs a 2-d image, got shape {img.shape}")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def load_image(path) -> np.ndarray:
    """Read a binary PGM into a [0,1] float image."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(f"cannot read image {path}: {exc}") from exc
    if not raw.startswith(b"P5"):
        raise ParseError(f"{path}: not a binary PGM (missing P5 magic)")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError(f"{path}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric PGM header fields {fields}") from exc
    if maxval != 255:
        raise ParseError(f"{path}: PGM maxval must be 255, got {maxval}")
    body = raw[pos : pos + w * h]
    if len(body) != w * h:
        raise ParseError(f"{path}: PGM body has {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# manifest CSV


def save_manifest(manifest: Manifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(
        ["image_id", "image_path", "global_label"]
        + [f"f_{name}" for name in manifest.finding_names]
    )
    for rec in manifest.records:
        writer.writerow(
            [rec.image_id, rec.image_path, int(rec.global_label)]
            + [int(v) for v in rec.findings]
        )
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def load_manifest(path) -> Manifest:
    """Parse a manifest CSV; split is inferred from the filename stem.

    For generated datasets (a generation.json sits next to the CSV) the
    global-label consistency rule is enforced; otherwise violations warn.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ParseError(f"{path}: empty manifest file")
    header = rows[0]
    if header[:3] != ["image_id", "image_path", "global_label"]:
        raise ParseError(
            f"{path}: line 1: header must start with image_id,image_path,global_label"
        )
    finding_cols = header[3:]
    bad = [c for c in finding_cols if not c.startswith("f_")]
    if bad or not finding_cols:
        raise ParseError(f"{path}: line 1: finding columns must be named f_<name>, got {header[3:]}")
    names = [c[2:] for c in finding_cols]
    nf = len(names)
    generated = (path.parent / "generation.json").exists()

    records: list[SampleRecord] = []
    seen_paths = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3 + nf:
            raise ParseError(
                f"{path}: line {lineno}: expected {3 + nf} columns, got {len(row)}"
            )
        image_id, image_path, glabel = row[0], row[1], row[2]
        if image_path in seen_paths:
            raise ParseError(f"{path}: line {lineno}: duplicate image_path '{image_path}'")
        seen_paths.add(image_path)
        try:
            g = _bit(glabel)
            findings = np.asarray([_bit(v) for v in row[3:]], dtype=np.int64)
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
        if (g == 1) != bool(findings.any()):
            msg = (
                f"{path}: line {lineno}: global_label {g} inconsistent with findings "
                f"{findings.tolist()}"
            )
            if generated:
                raise ParseError(msg)
            warnings.warn(msg)
        records.append(SampleRecord(image_id, image_path, findings, g))

    split = "train" if path.stem == "train" else "test"
    return Manifest(
        version=MANIFEST_VERSION,
        num_findings=nf,
        finding_names=names,
        records=records,
        split=split,
        base_dir=path.parent,
    )


def _bit(text: str) -> int:
    v = text.strip()
    if v not in ("0", "1"):
        raise ValueError(f"expected 0/1 value, got '{text}'")
    return int(v)


# ---------------------------------------------------------------------------
# degradation


def box_downscale(image: np.ndarray, target: int) -> np.ndarray:
    """Area-average downscale of a square image to target x target."""
    img = np.asarray(image, dtype=np.float64)
    n = img.shape[0]
    if n % target == 0:
        f = n // target
        return img.reshape(target, f, target, f).mean(axis=(1, 3))
    w = _area_weights(n, target)
    return w @ img @ w.T


def _area_weights(src: int, dst: int) -> np.ndarray:
    """[dst, src] row-stochastic overlap weights for 1-d area averaging."""
    w = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, src)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / scale


def bilinear_resize(image: np.ndarray, out_size: int) -> np.ndarray:
    """Separable bilinear resample (half-pixel centers, edges clamped)."""
    img = np.asarray(image, dtype=np.float64)
    n = img.shape[0]
    if out_size == n:
        return img.copy()
    src = (np.arange(out_size) + 0.5) * (n / out_size) - 0.5
    src = np.clip(src, 0.0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = img[lo] * (1.0 - frac)[:, None] + img[hi] * frac[:, None]
    out = rows[:, lo] * (1.0 - frac)[None, :] + rows[:, hi] * frac[None, :]
    return out


def degrade(image: np.ndarray, spec: ResolutionSpec) -> np.ndarray:
    """Simulate an LR capture: box-downscale to target, bilinear back up to
    the model input size. Identity when nothing changes size."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape != (spec.native, spec.native):
        raise ShapeError(
            f"degrade expects a {spec.native}x{spec.native} image, got {img.shape}"
        )
    if spec.target == spec.native and spec.model_input == spec.native:
        return img.copy()
    mid = img if spec.target == spec.native else box_downscale(img, spec.target)
    return bilinear_resize(mid, spec.model_input)


def degrade_batch(images: np.ndarray, spec: ResolutionSpec) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    return np.stack([degrade(im, spec) for im in arr])


# ---------------------------------------------------------------------------
# batching


def shuffled_indices(n: int, shuffle_seed: int, epoch: int) -> np.ndarray:
    """Deterministic epoch permutation; the epoch is XORed into the seed."""
    rng = np.random.default_rng((int(shuffle_seed) ^ int(epoch)) & 0xFFFFFFFFFFFFFFFF)
    return rng.permutation(n)


def batches(manifest: Manifest, batch_size: int, shuffle_seed: int, epoch: int):
    """Yield (images [B,S,S], finding targets [B,F], global targets [B]).

    Epoch-seeded deterministic shuffle; the final partial batch is kept.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    if not manifest.records:
        raise ContractError("cannot iterate an empty manifest")
    order = shuffled_indices(len(manifest.records), shuffle_seed, epoch)
    findings = manifest.label_matrix()
    glabels = manifest.global_labels()
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        imgs = np.stack([manifest.image(manifest.records[i]) for i in idx])
        yield imgs, findings[idx], glabels[idx]
