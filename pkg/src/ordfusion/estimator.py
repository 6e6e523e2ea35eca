"""Scikit-learn estimator facade over the fusion-augmented training loop.

``OrdinalFusionClassifier.fit`` takes an image array X of shape (n, H, W) or
(n, C, H, W) with pixel values in [0, 1] and integer labels y whose sorted
unique values define the ordinal categories 1..K (sorted order is taken as
the ordinal order). ``predict`` returns labels in the original label space;
``predict_proba`` applies a softmax to the classifier's un-normalized scores.
The estimator is clonable via get_params/set_params and composes with
scikit-learn model selection utilities.
"""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .datasets import OrdinalDataset, OrdinalSample
from .training import ConfigError, TrainConfig, Trainer


def _validate_images(X, fitted_shape=None) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=np.float32)
    if X.ndim not in (3, 4):
        raise ValueError(
            f"X must have shape (n, H, W) or (n, C, H, W), got {X.shape}"
        )
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    if fitted_shape is not None and X.shape[1:] != fitted_shape:
        raise ValueError(
            f"image shape {X.shape[1:]} differs from fitted shape {fitted_shape}"
        )
    return X


class OrdinalFusionClassifier(BaseEstimator, ClassifierMixin):
    """Ordinal image classifier trained with generated boundary samples.

    Parameters mirror the training configuration: ``sampler`` picks how
    reference categories are drawn ("equal" or "inverse_ratio"); ``tau`` is
    the structural share of the separated feature channels; ``alpha``/``beta``
    weight the structural and categorical generation terms and ``lam`` the
    fused-image cross-entropy; the ``enable_*`` flags switch off image
    generation, separation-fusion, or continued training for ablations.
    """

    def __init__(
        self,
        *,
        arch: str = "small_cnn",
        channels: int = 32,
        batch_size: int = 18,
        lr_encoder: float = 1e-4,
        lr_generator: float = 5e-3,
        joint_steps: int = 300,
        continued_steps: int = 60,
        sampler: str = "inverse_ratio",
        generator: str = "unet",
        tau: float = 0.2,
        alpha: float = 5.0,
        beta: float = 2.0,
        lam: float = 0.2,
        enable_ig: bool = True,
        enable_sf: bool = True,
        enable_ct: bool = True,
        ssim_epsilon: float = 1e-6,
        loss_reduction: str = "sum",
        random_state: int = 0,
    ):
        self.arch = arch
        self.channels = channels
        self.batch_size = batch_size
        self.lr_encoder = lr_encoder
        self.lr_generator = lr_generator
        self.joint_steps = joint_steps
        self.continued_steps = continued_steps
        self.sampler = sampler
        self.generator = generator
        self.tau = tau
        self.alpha = alpha
        self.beta = beta
        self.lam = lam
        self.enable_ig = enable_ig
        self.enable_sf = enable_sf
        self.enable_ct = enable_ct
        self.ssim_epsilon = ssim_epsilon
        self.loss_reduction = loss_reduction
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.random_state,
            batch_size=self.batch_size,
            lr_encoder=self.lr_encoder,
            lr_generator=self.lr_generator,
            joint_steps=self.joint_steps,
            continued_training_batches=self.continued_steps,
            enable_ig=self.enable_ig,
            enable_sf=self.enable_sf,
            enable_ct=self.enable_ct,
            arch=self.arch,
            channels=self.channels,
            sampler_kind=self.sampler,
            generator_kind=self.generator,
            fusion_mode="sf" if self.enable_sf else "add",
            tau=self.tau,
            alpha=self.alpha,
            beta=self.beta,
            lam=self.lam,
            ssim_epsilon=self.ssim_epsilon,
            loss_reduction=self.loss_reduction,
        )

    def fit(self, X, y):
        X = _validate_images(X)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError(f"y must be 1-D with {X.shape[0]} entries")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least 2 classes")
        label_of = {c: i + 1 for i, c in enumerate(self.classes_.tolist())}
        samples = [
            OrdinalSample(image=X[i], label=label_of[y[i].item()])
            for i in range(X.shape[0])
        ]
        ds = OrdinalDataset(samples, k=len(self.classes_))
        try:
            cfg = self._train_config()
        except ConfigError as exc:
            raise ValueError(str(exc)) from exc
        self.trainer_ = Trainer(cfg, ds)
        self.trainer_.run()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.image_shape_ = X.shape[1:]
        return self

    def decision_function(self, X) -> np.ndarray:
        """Un-normalized class scores, shape (n, K)."""
        check_is_fitted(self, "trainer_")
        X = _validate_images(X, fitted_shape=self.image_shape_)
        images = torch.from_numpy(X)
        if images.ndim == 3:
            images = images.unsqueeze(1)
        return self.trainer_.predict_logits(images).numpy()

    def predict_proba(self, X) -> np.ndarray:
        logits = torch.from_numpy(self.decision_function(X))
        return torch.softmax(logits, dim=1).numpy()

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(axis=1)]
