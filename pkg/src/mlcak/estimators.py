"""Scikit-learn style front end over the training engine.

One estimator covers every role: a plain classifier (scheme "none"), a
teacher (native resolution), or a distilled student (any transfer scheme
plus a fitted teacher). Keeping it a single class keeps get_params/clone
introspection trivial.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .data import ResolutionSpec, degrade_batch, shuffled_indices
from .errors import ConfigError, ContractError, NumericalError
from .losses import SCHEMES, KDConfig, joint_loss
from .metrics import auroc, macro_mean, model_scores
from .optim import AdamW, CosineSchedule, cosine_lr
from .tensor import Tape
from .vit import ViTConfig, ViTModel, init_model


def validate_images(X) -> np.ndarray:
    """[N,S,S] float array of square [0,1] images."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ContractError(f"X must be [N, S, S] square images, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ContractError("X has no samples")
    if not np.isfinite(arr).all():
        raise ContractError("X contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ContractError(
            f"image values must lie in [0,1], got range "
            f"[{arr.min():.4g}, {arr.max():.4g}]"
        )
    return arr


def validate_binary_matrix(y, n_samples: int, what: str) -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] != n_samples:
        raise ContractError(
            f"{what} must be [N, F] with N={n_samples}, got shape {np.shape(y)}"
        )
    if not np.isin(arr, (0, 1)).all():
        raise ContractError(f"{what} must contain only 0/1 values")
    return arr.astype(np.float64)


class MultiTaskViTClassifier(BaseEstimator):
    """Finding-level plus global classifier with optional teacher transfer.

    Parameters mirror the training surface: architecture (variant and
    explicit dims), optimization (epochs, batch_size, lr schedule, decay),
    the resolution pipeline (``resolution`` is the degradation target in
    native pixels; None keeps the native size), and the transfer setup
    (scheme, teacher, alpha/beta/gamma, temperature).

    ``teacher`` is a fitted MultiTaskViTClassifier or a bare ViTModel; it is
    required for every scheme except "none" and is never updated by fit.
    """

    def __init__(self, variant="tiny", image_size=64, patch_size=8, embed_dim=None,
                 depth=None, num_heads=None, mlp_ratio=4.0, epochs=10, batch_size=64,
                 lr=5e-4, min_lr=0.0, weight_decay=0.01, resolution=None,
                 scheme="none", teacher=None, alpha=1.0, beta=1.0, gamma=1.0,
                 temperature=2.0, seed=0, verbose=0, track_train_auroc=False):
        self.variant = variant
        self.image_size = image_size
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.depth = depth
        self.num_heads = num_heads
        self.mlp_ratio = mlp_ratio
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.min_lr = min_lr
        self.weight_decay = weight_decay
        self.resolution = resolution
        self.scheme = scheme
        self.teacher = teacher
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.temperature = temperature
        self.seed = seed
        self.verbose = verbose
        self.track_train_auroc = track_train_auroc

    # -- configuration ------------------------------------------------------

    def _build_config(self, num_findings: int) -> ViTConfig:
        overrides = {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "num_findings": num_findings,
            "mlp_ratio": self.mlp_ratio,
        }
        for name in ("embed_dim", "depth", "num_heads"):
            value = getattr(self, name)
            if value is not None:
                overrides[name] = value
        return ViTConfig.variant(self.variant, **overrides)

    def _teacher_model(self, config: ViTConfig) -> ViTModel:
        teacher = self.teacher
        if isinstance(teacher, MultiTaskViTClassifier):
            check_is_fitted(teacher, "model_")
            teacher = teacher.model_
        if not isinstance(teacher, ViTModel):
            raise ConfigError(
                f"scheme '{self.scheme}' needs a fitted teacher estimator or a "
                f"ViTModel, got {type(self.teacher).__name__}"
            )
        ours = {k: v for k, v in vars(config).items() if k != "variant_name"}
        theirs = {k: v for k, v in vars(teacher.config).items() if k != "variant_name"}
        if ours != theirs:
            raise ConfigError(
                f"teacher config {teacher.config} incompatible with student {config}"
            )
        return teacher

    # -- training -----------------------------------------------------------

    def fit(self, X, y, global_labels=None):
        """Train on native images X [N,S,S] with finding targets y [N,F].

        ``global_labels`` defaults to any(findings) per row. The degradation
        pipeline (native -> resolution target -> model input) is applied to
        X internally; the teacher, when present, sees the undegraded view.
        """
        X = validate_images(X)
        n = X.shape[0]
        y = validate_binary_matrix(y, n, "y")
        if global_labels is None:
            g = y.any(axis=1).astype(np.float64)
        else:
            g = validate_binary_matrix(global_labels, n, "global_labels")[:, 0]
        if self.scheme not in SCHEMES:
            raise ConfigError(f"unknown scheme '{self.scheme}'; choose from {SCHEMES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError(
                f"epochs and batch_size must be >= 1, got {self.epochs}, {self.batch_size}"
            )

        config = self._build_config(num_findings=y.shape[1])
        native = X.shape[1]
        target = native if self.resolution is None else int(self.resolution)
        spec = ResolutionSpec(native=native, target=target,
                              model_input=config.image_size,
                              custom=native % target != 0)
        student_views = degrade_batch(X, spec)

        teacher_model = None
        teacher_views = None
        if self.scheme != "none":
            teacher_model = self._teacher_model(config)
            teacher_spec = ResolutionSpec(native=native, target=native,
                                          model_input=config.image_size)
            teacher_views = degrade_batch(X, teacher_spec)

        kd = KDConfig(scheme=self.scheme, alpha=self.alpha, beta=self.beta,
                      gamma=self.gamma, temperature=self.temperature)
        model = init_model(config, self.seed)
        opt = AdamW(model.params, weight_decay=self.weight_decay)
        steps_per_epoch = (n + self.batch_size - 1) // self.batch_size
        schedule = CosineSchedule(base_lr=self.lr, min_lr=self.min_lr,
                                  total_steps=self.epochs * steps_per_epoch)

        self.history_ = []
        t = 0
        for epoch in range(self.epochs):
            order = shuffled_indices(n, self.seed, epoch)
            sums = {}
            epoch_lr = None  # lr at the epoch's first step
            for start in range(0, n, self.batch_size):
                idx = order[start : start + self.batch_size]
                t_trace = None
                if teacher_model is not None:
                    t_trace = teacher_model.forward(teacher_views[idx])
                with Tape():
                    s_trace = model.forward(student_views[idx])
                    breakdown = joint_loss(kd, t_trace, s_trace, y[idx], g[idx])
                    total = breakdown.total.item()
                    if not np.isfinite(total):
                        raise NumericalError(
                            f"non-finite loss {total} at epoch {epoch} step "
                            f"{start // self.batch_size}"
                        )
                    breakdown.total.backward()
                step_lr = cosine_lr(schedule, t)
                if epoch_lr is None:
                    epoch_lr = step_lr
                opt.step(step_lr)
                opt.zero_grad()
                t += 1
                for key, value in breakdown.to_floats().items():
                    sums[key] = sums.get(key, 0.0) + value
            record = {k: v / steps_per_epoch for k, v in sums.items()}
            record["epoch"] = epoch
            record["lr"] = epoch_lr
            if self.track_train_auroc:
                mlct_s, mcct_s = model_scores(model, student_views, self.batch_size)
                per = [auroc(mlct_s[:, k], y[:, k]) for k in range(y.shape[1])]
                record["train_mlct_macro_auroc"] = macro_mean(per)
                record["train_mcct_auroc"] = auroc(mcct_s, g.astype(np.int64))
            self.history_.append(record)
            if self.verbose:
                print(f"epoch {epoch}: total {record['total']:.4f} lr {epoch_lr:.2e}")

        self.model_ = model
        self.config_ = config
        self.resolution_spec_ = spec
        self.kd_config_ = kd
        return self

    # -- inference ------------------------------------------------------------

    def _views(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = validate_images(X)
        spec = self.resolution_spec_
        if X.shape[1] != spec.native:
            raise ContractError(
                f"fitted on {spec.native}px native images, got {X.shape[1]}px"
            )
        return degrade_batch(X, spec)

    def predict_proba(self, X) -> np.ndarray:
        """[N, F] sigmoid finding scores through the fitted degradation."""
        views = self._views(X)
        mlct, _ = model_scores(self.model_, views, self.batch_size)
        return mlct

    def predict_global_proba(self, X) -> np.ndarray:
        """[N] abnormal-class sigmoid scores."""
        views = self._views(X)
        _, mcct = model_scores(self.model_, views, self.batch_size)
        return mcct

    def predict(self, X) -> np.ndarray:
        """[N, F] 0/1 finding calls at the 0.5 threshold."""
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def score(self, X, y) -> float:
        """Macro AUROC over findings (0.5 when every class is degenerate)."""
        proba = self.predict_proba(X)
        y = validate_binary_matrix(y, proba.shape[0], "y")
        per = [auroc(proba[:, k], y[:, k]) for k in range(proba.shape[1])]
        macro = macro_mean(per)
        return 0.5 if macro is None else macro
