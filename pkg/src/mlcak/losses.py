"""Distillation schemes and task losses.

The joint objective is BCE on both task heads plus weighted transfer terms:
soft-logit MSE for the two heads, and a feature term that depends on the
scheme (mean of all block outputs, last block only, per-block 1:1, or none).
Teacher-side tensors enter every loss as constants.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor
from .vit import ForwardTrace

SCHEMES = ("none", "vanilla", "last_block", "one_to_one", "mlcak")


@dataclass(frozen=True)
class KDConfig:
    """Scheme selection and joint-loss weights.

    ``temperature`` only matters for the vanilla scheme; alpha/beta/gamma are
    ignored when scheme is "none".
    """

    scheme: str = "none"
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    temperature: float = 2.0

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ContractError(f"unknown KD scheme '{self.scheme}' (choose from {SCHEMES})")
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ContractError("alpha, beta, gamma must be non-negative")
        if self.temperature <= 0:
            raise ContractError(f"temperature must be > 0, got {self.temperature}")


@dataclass
class LossBreakdown:
    """Itemized loss values of one step, as 0-d tensors.

    ``total`` is built literally as bce_mlct + bce_mcct + alpha*kd_mlct +
    beta*kd_mcct + gamma*kd_feature, so it is the thing to backprop.
    """

    bce_mlct: Tensor
    bce_mcct: Tensor
    kd_mlct: Tensor
    kd_mcct: Tensor
    kd_feature: Tensor
    total: Tensor

    def to_floats(self) -> dict[str, float]:
        return {
            "bce_mlct": self.bce_mlct.item(),
            "bce_mcct": self.bce_mcct.item(),
            "kd_mlct": self.kd_mlct.item(),
            "kd_mcct": self.kd_mcct.item(),
            "kd_feature": self.kd_feature.item(),
            "total": self.total.item(),
        }


def mlcak_summary(hidden_states) -> Tensor:
    """Elementwise mean of the per-block hidden states (differentiable)."""
    hs = list(hidden_states)
    if not hs:
        raise ContractError("mlcak_summary of an empty hidden-state list")
    shape = hs[0].shape
    for h in hs[1:]:
        if h.shape != shape:
            raise ShapeError(f"hidden-state shape mismatch: {shape} vs {h.shape}")
    return T.add_n(hs) * (1.0 / len(hs))


def mse_loss(t: Tensor, s: Tensor) -> Tensor:
    """Mean over all elements of (t - s)^2; the first argument is the teacher
    side and is treated as a constant."""
    if t.shape != s.shape:
        raise ShapeError(f"mse_loss shape mismatch: {t.shape} vs {s.shape}")
    d = T.sub(s, t.detach())
    return T.tmean(T.mul(d, d))


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Numerically stable binary cross-entropy, averaged over all elements.

    Elementwise max(z,0) - z*y + log(1+exp(-|z|)); targets may be hard {0,1}
    or soft values in [0,1].
    """
    y = targets.detach() if isinstance(targets, Tensor) else Tensor(np.asarray(targets, dtype=np.float64))
    if logits.shape != y.shape:
        raise ShapeError(f"bce_with_logits shape mismatch: {logits.shape} vs {y.shape}")
    if y.data.size == 0:
        raise ContractError("bce_with_logits on empty inputs")
    if y.data.min() < 0.0 or y.data.max() > 1.0:
        raise ContractError("bce_with_logits targets must lie in [0, 1]")
    return T.tmean(T.softplus(logits) - T.mul(logits, y))


def vanilla_kd_loss(t_logits: Tensor, s_logits: Tensor, temperature: float) -> Tensor:
    """Temperature-softened KL(teacher || student), scaled by temperature^2.

    Distributions are over the last axis; leading axes are averaged (batch
    mean). Teacher is constant.
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be > 0, got {temperature}")
    if t_logits.shape != s_logits.shape:
        raise ShapeError(f"vanilla_kd_loss shape mismatch: {t_logits.shape} vs {s_logits.shape}")
    td = t_logits.data
    if not np.isfinite(td).all() or not np.isfinite(s_logits.data).all():
        raise ContractError("vanilla_kd_loss needs finite logits")
    # teacher distribution and its entropy term, all constant
    tz = td / temperature
    tz = tz - tz.max(axis=-1, keepdims=True)
    p = np.exp(tz)
    p /= p.sum(axis=-1, keepdims=True)
    t_entropy_sum = float((p * np.log(p)).sum())  # sum over every slice
    n_slices = max(1, int(np.prod(td.shape[:-1])))

    log_q = T.log_softmax(s_logits * (1.0 / temperature), axis=-1)
    cross = T.tsum(T.mul(log_q, Tensor(p)))
    kl_mean = (Tensor(np.asarray(t_entropy_sum)) - cross) * (1.0 / n_slices)
    return kl_mean * (temperature ** 2)


def feature_kd_loss(scheme: str, t_trace: ForwardTrace, s_trace: ForwardTrace) -> Tensor:
    """Feature-transfer term of the chosen scheme over encoder-layer outputs."""
    if scheme not in SCHEMES:
        raise ContractError(f"unknown KD scheme '{scheme}'")
    if scheme in ("none", "vanilla"):
        return Tensor(np.asarray(0.0))
    if t_trace.depth != s_trace.depth:
        raise ContractError(
            f"trace depth mismatch: teacher {t_trace.depth} vs student {s_trace.depth}"
        )
    if scheme == "mlcak":
        return mse_loss(mlcak_summary(t_trace.hidden_states).detach(),
                        mlcak_summary(s_trace.hidden_states))
    if scheme == "last_block":
        return mse_loss(t_trace.hidden_states[-1], s_trace.hidden_states[-1])
    # one_to_one: average of the per-block MSE terms
    per_block = [mse_loss(t, s) for t, s in zip(t_trace.hidden_states, s_trace.hidden_states)]
    return T.add_n(per_block) * (1.0 / len(per_block))


def joint_loss(kd: KDConfig, t_trace, s_trace: ForwardTrace,
               finding_targets, global_targets) -> LossBreakdown:
    """Classification BCE on the student plus the scheme's transfer terms.

    ``t_trace`` may be None when scheme is "none" (no teacher involved).
    ``global_targets`` is either an integer label vector or a one-hot matrix
    matching the global head.
    """
    findings = _target_tensor(finding_targets)
    one_hot = _as_one_hot(global_targets, s_trace.mcct_logits.shape)
    bce_mlct = bce_with_logits(s_trace.mlct_logits, findings)
    bce_mcct = bce_with_logits(s_trace.mcct_logits, one_hot)

    zero = Tensor(np.asarray(0.0))
    if kd.scheme == "none":
        return LossBreakdown(bce_mlct, bce_mcct, zero, zero, zero, bce_mlct + bce_mcct)

    if t_trace is None:
        raise ContractError(f"scheme '{kd.scheme}' needs a teacher trace")
    if kd.scheme == "vanilla":
        kd_mlct = vanilla_kd_loss(t_trace.mlct_logits, s_trace.mlct_logits, kd.temperature)
        kd_mcct = vanilla_kd_loss(t_trace.mcct_logits, s_trace.mcct_logits, kd.temperature)
    else:
        kd_mlct = mse_loss(t_trace.mlct_logits, s_trace.mlct_logits)
        kd_mcct = mse_loss(t_trace.mcct_logits, s_trace.mcct_logits)
    kd_feature = feature_kd_loss(kd.scheme, t_trace, s_trace)
    total = bce_mlct + bce_mcct + kd.alpha * kd_mlct + kd.beta * kd_mcct + kd.gamma * kd_feature
    return LossBreakdown(bce_mlct, bce_mcct, kd_mlct, kd_mcct, kd_feature, total)


def one_hot(labels, num_classes: int) -> np.ndarray:
    lab = np.asarray(labels)
    if lab.ndim != 1:
        raise ShapeError(f"label vector must be 1-d, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= num_classes):
        raise ContractError(f"labels outside [0, {num_classes})")
    out = np.zeros((lab.size, num_classes))
    out[np.arange(lab.size), lab.astype(int)] = 1.0
    return out


def _target_tensor(x) -> Tensor:
    return x.detach() if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _as_one_hot(global_targets, logits_shape) -> Tensor:
    g = _target_tensor(global_targets)
    if g.shape == logits_shape:
        return g
    if g.ndim == 1 and len(logits_shape) == 2 and g.shape[0] == logits_shape[0]:
        return Tensor(one_hot(g.data, logits_shape[1]))
    raise ShapeError(
        f"global targets shape {g.shape} incompatible with global logits {logits_shape}"
    )
