"""AUROC metrics, evaluation reports, and attention-heatmap export."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import Manifest, ResolutionSpec, degrade_batch, write_pgm
from .errors import ContractError
from .vit import ForwardTrace, ViTModel, attention_grid


def auroc(scores, labels) -> float | None:
    """Mann-Whitney AUROC: P(score_pos > score_neg) with ties counted half.

    Returns None when either class is absent (the undefined marker).
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape[0] != y.shape[0]:
        raise ContractError(
            f"scores ({s.shape[0]}) and labels ({y.shape[0]}) differ in length"
        )
    if s.shape[0] == 0:
        raise ContractError("auroc needs at least one sample")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0/1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    # rank-sum form of the pair count; average ranks give ties weight 1/2
    ranks = rankdata(s, method="average")
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    mlct_auroc_per_finding: list  # float or None per finding
    mlct_macro_auroc: float | None
    mcct_auroc: float | None
    num_samples: int
    resolution_target: int
    scheme: str

    def to_json_dict(self) -> dict:
        return {
            "mlct_macro_auroc": self.mlct_macro_auroc,
            "mcct_auroc": self.mcct_auroc,
            "per_finding": self.mlct_auroc_per_finding,
            "resolution": self.resolution_target,
            "scheme": self.scheme,
            "num_samples": self.num_samples,
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_json_dict(), indent=2) + "\n", encoding="utf-8"
        )


def macro_mean(values) -> float | None:
    """Mean over defined entries; None when every entry is undefined."""
    defined = [v for v in values if v is not None]
    if not defined:
        return None
    return float(np.mean(defined))


def model_scores(
    model: ViTModel, images: np.ndarray, batch_size: int = 64
) -> tuple[np.ndarray, np.ndarray]:
    """Sigmoid finding scores [N,F] and abnormal-class scores [N].

    Runs untaped (inference), chunked to bound memory.
    """
    mlct_chunks, mcct_chunks = [], []
    for start in range(0, images.shape[0], batch_size):
        trace = model.forward(images[start : start + batch_size])
        mlct_chunks.append(trace.mlct_logits.numpy())
        mcct_chunks.append(trace.mcct_logits.numpy())
    mlct = np.concatenate(mlct_chunks, axis=0)
    mcct = np.concatenate(mcct_chunks, axis=0)
    return _sigmoid(mlct), _sigmoid(mcct[:, 1])


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def evaluate(
    model: ViTModel,
    manifest: Manifest,
    spec: ResolutionSpec,
    scheme: str = "none",
    batch_size: int = 64,
) -> EvalReport:
    """Score every manifest record through the degradation pipeline.

    Finding k is scored by sigmoid of its logit; the global task by sigmoid
    of the abnormal-class logit. Macro AUROC averages the defined findings.
    """
    if not manifest.records:
        raise ContractError("cannot evaluate an empty manifest")
    if model.config.image_size != spec.model_input:
        raise ContractError(
            f"model expects {model.config.image_size}px input but resolution spec "
            f"delivers {spec.model_input}px"
        )
    if manifest.num_findings != model.config.num_findings:
        raise ContractError(
            f"manifest has {manifest.num_findings} findings, model has "
            f"{model.config.num_findings}"
        )
    images = degrade_batch(manifest.images(), spec)
    mlct_scores, mcct_scores = model_scores(model, images, batch_size)
    labels = manifest.label_matrix()
    per_finding = [
        auroc(mlct_scores[:, k], labels[:, k]) for k in range(manifest.num_findings)
    ]
    return EvalReport(
        mlct_auroc_per_finding=per_finding,
        mlct_macro_auroc=macro_mean(per_finding),
        mcct_auroc=auroc(mcct_scores, manifest.global_labels()),
        num_samples=len(manifest.records),
        resolution_target=spec.target,
        scheme=scheme,
    )


def export_attention(
    trace: ForwardTrace, block_index: int, out_path, upscale_to: int, sample: int = 0
) -> np.ndarray:
    """Write one block's cls-attention grid as a grayscale PGM heatmap.

    Min-max maps the grid onto [0,255]; a constant grid becomes mid-gray
    (128). Nearest-neighbor upscaling keeps cell boundaries hard.
    """
    grid = attention_grid(trace, block_index, sample)
    g = grid.shape[0]
    if upscale_to < g:
        raise ContractError(f"upscale_to {upscale_to} is below grid size {g}")
    lo, hi = float(grid.min()), float(grid.max())
    if hi > lo:
        bytes_grid = np.rint((grid - lo) / (hi - lo) * 255.0)
    else:
        bytes_grid = np.full_like(grid, 128.0)
    idx = (np.arange(upscale_to) * g) // upscale_to
    full = bytes_grid[np.ix_(idx, idx)]
    write_pgm(out_path, full / 255.0)
    return full.astype(np.uint8)
