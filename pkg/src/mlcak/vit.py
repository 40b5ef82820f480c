"""Pre-norm Vision-Transformer encoder with dual task heads.

The encoder exposes everything a feature-level distillation step needs: the
hidden state after every block and every block's attention weights, next to
the two task logit vectors (per-finding and global normal/abnormal).

Forward passes are batched: trace tensors carry a leading batch axis.
``ForwardTrace.sample(i)`` gives the detached per-sample view used for
attention export and inspection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

LN_EPS = 1e-6

# Desk-scale dims for the named capacity tiers; depth/image/patch come from
# the config defaults so the tiers stay minutes-trainable while preserving
# the tiny < small < base capacity ordering. Full-size dims go via "custom".
_VARIANT_DIMS = {
    "tiny": (32, 2),
    "small": (64, 4),
    "base": (128, 8),
}


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 4
    num_heads: int = 2
    mlp_ratio: float = 4.0
    num_findings: int = 8
    num_global_classes: int = 2
    variant_name: str = "custom"

    def __post_init__(self):
        problems = []
        for name in ("image_size", "patch_size", "embed_dim", "depth", "num_heads",
                     "num_findings", "num_global_classes"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive (got {getattr(self, name)})")
        if self.mlp_ratio <= 0:
            problems.append(f"mlp_ratio must be positive (got {self.mlp_ratio})")
        if self.image_size % self.patch_size != 0:
            problems.append(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            problems.append(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        if self.variant_name not in ("tiny", "small", "base", "custom"):
            problems.append(f"unknown variant_name '{self.variant_name}'")
        if problems:
            raise ConfigError("invalid ViTConfig: " + "; ".join(problems))

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @classmethod
    def variant(cls, name: str, **overrides) -> "ViTConfig":
        """Config for a named capacity tier, with field overrides on top."""
        if name == "custom":
            return cls(variant_name="custom", **overrides)
        if name not in _VARIANT_DIMS:
            raise ConfigError(f"unknown variant '{name}'")
        embed, heads = _VARIANT_DIMS[name]
        base = cls(embed_dim=embed, num_heads=heads, variant_name=name)
        return replace(base, **overrides) if overrides else base


@dataclass
class ForwardTrace:
    """Everything one forward pass produced, for losses and inspection.

    hidden_states[i] is the output of encoder block i, [B, tokens, embed_dim]
    (class token included); attentions[i] is [B, heads, tokens, tokens] with
    rows summing to 1; logits are [B, num_findings] and [B, num_global_classes].
    Per-sample views (no batch axis) come from ``sample``/``unbatch``.
    """

    hidden_states: list
    attentions: list
    mlct_logits: Tensor
    mcct_logits: Tensor

    @property
    def depth(self) -> int:
        return len(self.hidden_states)

    @property
    def batch_size(self) -> int:
        return self.mlct_logits.shape[0] if self.mlct_logits.ndim == 2 else 1

    def sample(self, i: int) -> "ForwardTrace":
        """Detached single-sample trace (tensors lose the batch axis)."""
        if self.mlct_logits.ndim != 2:
            raise ContractError("sample() on an already per-sample trace")
        if not (0 <= i < self.batch_size):
            raise ContractError(f"sample index {i} out of range for batch {self.batch_size}")
        return ForwardTrace(
            hidden_states=[Tensor(h.data[i]) for h in self.hidden_states],
            attentions=[Tensor(a.data[i]) for a in self.attentions],
            mlct_logits=Tensor(self.mlct_logits.data[i]),
            mcct_logits=Tensor(self.mcct_logits.data[i]),
        )

    def unbatch(self) -> list:
        return [self.sample(i) for i in range(self.batch_size)]


class ViTModel:
    """Parameter collection plus the forward computation.

    Parameters live in an insertion-ordered name->Tensor dict; that order is
    the checkpoint declaration order. The model is read-only during forward;
    only the optimizer mutates parameters.
    """

    def __init__(self, config: ViTConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------------

    @staticmethod
    def parameter_shapes(config: ViTConfig) -> dict[str, tuple]:
        """Declaration-ordered shapes of every parameter."""
        d = config.embed_dim
        shapes: dict[str, tuple] = {
            "patch_proj.weight": (config.patch_size ** 2, d),
            "patch_proj.bias": (d,),
            "cls_token": (1, 1, d),
            "pos_embed": (config.num_tokens, d),
        }
        for b in range(config.depth):
            p = f"blocks.{b}."
            shapes[p + "ln1.gamma"] = (d,)
            shapes[p + "ln1.beta"] = (d,)
            for proj in ("q", "k", "v", "out"):
                shapes[p + f"attn.{proj}.weight"] = (d, d)
                shapes[p + f"attn.{proj}.bias"] = (d,)
            shapes[p + "ln2.gamma"] = (d,)
            shapes[p + "ln2.beta"] = (d,)
            shapes[p + "mlp.fc1.weight"] = (d, config.hidden_dim)
            shapes[p + "mlp.fc1.bias"] = (config.hidden_dim,)
            shapes[p + "mlp.fc2.weight"] = (config.hidden_dim, d)
            shapes[p + "mlp.fc2.bias"] = (d,)
        shapes["final_ln.gamma"] = (d,)
        shapes["final_ln.beta"] = (d,)
        shapes["mlct_head.weight"] = (d, config.num_findings)
        shapes["mlct_head.bias"] = (config.num_findings,)
        shapes["mcct_head.weight"] = (d, config.num_global_classes)
        shapes["mcct_head.bias"] = (config.num_global_classes,)
        return shapes

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def all_finite(self) -> bool:
        return all(np.isfinite(p.data).all() for p in self.params.values())

    # -- forward ------------------------------------------------------------

    def forward(self, images) -> ForwardTrace:
        """Run the encoder over a batch of [0,1] grayscale images.

        ``images`` is [B, S, S] (or [S, S] for a single image, treated as a
        batch of one). Gradients are recorded only if a Tape is active.
        """
        cfg = self.config
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[1] != cfg.image_size or arr.shape[2] != cfg.image_size:
            raise ShapeError(
                f"expected images [B, {cfg.image_size}, {cfg.image_size}], got {arr.shape}"
            )
        bsz = arr.shape[0]
        p = self.params

        patches = Tensor(patchify_batch(arr, cfg.patch_size))  # [B, P, p*p]
        tok = T.matmul(patches, p["patch_proj.weight"]) + p["patch_proj.bias"]
        cls = T.broadcast_to(p["cls_token"], (bsz, 1, cfg.embed_dim))
        tok = T.concat([cls, tok], axis=1)  # [B, T, D]
        tok = tok + p["pos_embed"]

        hiddens, attns = [], []
        scale = 1.0 / math.sqrt(cfg.head_dim)
        for b in range(cfg.depth):
            pre = f"blocks.{b}."
            h = T.layer_norm(tok, p[pre + "ln1.gamma"], p[pre + "ln1.beta"], LN_EPS)
            q = self._heads(T.matmul(h, p[pre + "attn.q.weight"]) + p[pre + "attn.q.bias"], bsz)
            k = self._heads(T.matmul(h, p[pre + "attn.k.weight"]) + p[pre + "attn.k.bias"], bsz)
            v = self._heads(T.matmul(h, p[pre + "attn.v.weight"]) + p[pre + "attn.v.bias"], bsz)
            scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
            attn = T.softmax(scores, axis=-1)  # [B, H, T, T]
            ctx = T.matmul(attn, v)  # [B, H, T, hd]
            ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (bsz, cfg.num_tokens, cfg.embed_dim))
            tok = tok + (T.matmul(ctx, p[pre + "attn.out.weight"]) + p[pre + "attn.out.bias"])
            h2 = T.layer_norm(tok, p[pre + "ln2.gamma"], p[pre + "ln2.beta"], LN_EPS)
            m = T.gelu(T.matmul(h2, p[pre + "mlp.fc1.weight"]) + p[pre + "mlp.fc1.bias"])
            tok = tok + (T.matmul(m, p[pre + "mlp.fc2.weight"]) + p[pre + "mlp.fc2.bias"])
            hiddens.append(tok)
            attns.append(attn)

        fin = T.layer_norm(tok, p["final_ln.gamma"], p["final_ln.beta"], LN_EPS)
        cls_repr = T.reshape(T.narrow(fin, 1, 0, 1), (bsz, cfg.embed_dim))
        mlct = T.matmul(cls_repr, p["mlct_head.weight"]) + p["mlct_head.bias"]
        mcct = T.matmul(cls_repr, p["mcct_head.weight"]) + p["mcct_head.bias"]
        return ForwardTrace(hiddens, attns, mlct, mcct)

    def _heads(self, x: Tensor, bsz: int) -> Tensor:
        cfg = self.config
        x = T.reshape(x, (bsz, cfg.num_tokens, cfg.num_heads, cfg.head_dim))
        return T.transpose(x, (0, 2, 1, 3))  # [B, H, T, hd]


def init_model(config: ViTConfig, seed: int) -> ViTModel:
    """Fresh model: truncated-normal (sigma 0.02) projections and embeddings,
    zero biases and class token, unit layer-norm scales. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in ViTModel.parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("bias", "beta") or name == "cls_token":
            data = np.zeros(shape)
        elif leaf == "gamma":
            data = np.ones(shape)
        else:
            data = _trunc_normal(rng, shape, std=0.02)
        params[name] = Tensor(data, requires_grad=True)
    return ViTModel(config, params)


def _trunc_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0):
    """Normal(0, std) resampled until within +/- bound*std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > bound * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound * std
    return out


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split a square grayscale image into flattened patches.

    Patches are traversed row-major over the grid and each row of the result
    is one patch flattened row-major, so [num_patches, patch_size**2].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ShapeError(f"patchify needs a square 2-d image, got shape {img.shape}")
    s = img.shape[0]
    if s % patch_size != 0:
        raise ShapeError(f"image size {s} not divisible by patch size {patch_size}")
    g = s // patch_size
    return (
        img.reshape(g, patch_size, g, patch_size)
        .transpose(0, 2, 1, 3)
        .reshape(g * g, patch_size * patch_size)
    )


def patchify_batch(images: np.ndarray, patch_size: int) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ShapeError(f"patchify_batch needs [B, S, S], got shape {arr.shape}")
    s = arr.shape[1]
    if s % patch_size != 0:
        raise ShapeError(f"image size {s} not divisible by patch size {patch_size}")
    g = s // patch_size
    b = arr.shape[0]
    return (
        arr.reshape(b, g, patch_size, g, patch_size)
        .transpose(0, 1, 3, 2, 4)
        .reshape(b, g * g, patch_size * patch_size)
    )


def attention_grid(trace: ForwardTrace, block_index: int, sample: int = 0) -> np.ndarray:
    """Class-token attention over patch tokens as a [g, g] map summing to 1.

    Head-averaged row of the class token, class->class entry dropped, then
    renormalized onto the patch grid.
    """
    if not (0 <= block_index < trace.depth):
        raise ContractError(f"block index {block_index} out of range for depth {trace.depth}")
    attn = trace.attentions[block_index].data
    if attn.ndim == 4:
        attn = attn[sample]
    row = attn.mean(axis=0)[0, 1:]  # mean over heads, class-token row, drop cls->cls
    g = int(math.isqrt(row.size))
    if g * g != row.size:
        raise ShapeError(f"patch count {row.size} is not a square grid")
    total = row.sum()
    if total <= 0:
        raise ContractError("attention row sums to zero after dropping the class entry")
    return (row / total).reshape(g, g)
