"""Self-supervision and classification losses for fusion-image training.

Five scalar objectives drive the pipeline:

* ``ssim``: global structural similarity between two images, computed from
  whole-image means, variances and covariance with the standard stabilized
  denominator.
* ``structural_generation_loss``: pulls the fused image toward the main
  image's structure and away from the reference's,
  -1/2 (log SSIM(x_m, x_f) + log(1 - SSIM(x_r, x_f))), with SSIM values
  clamped to [eps, 1-eps] so both logarithms stay finite.
* ``categorical_generation_loss``: squared Euclidean distance between the
  classifier's un-normalized score vectors of reference and fused images.
* ``reconstruction_loss``: squared error between a feature map and the
  concatenation of its categorical and structural extractions, keeping the
  extractors close to a lossless split.
* ``cross_entropy`` / ``classification_loss``: softmax CE on main images plus
  a down-weighted CE on fused images treated as extra labeled data.

All functions are pure, differentiable, and accept single samples or batches
(leading batch axis); batched inputs are reduced per sample, then averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor


@dataclass(frozen=True)
class SsimParams:
    """Stabilizers for the similarity ratio.

    ``dynamic_range`` is the pixel value range L (1.0 for [0, 1] images);
    c1 = (0.01 L)^2 and c2 = (0.03 L)^2. ``epsilon`` is the clamp margin
    applied to SSIM values before logarithms.
    """

    dynamic_range: float = 1.0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.dynamic_range <= 0:
            raise ValueError("dynamic_range must be positive")
        if not 0 < self.epsilon < 0.5:
            raise ValueError("epsilon must lie in (0, 0.5)")

    @property
    def c1(self) -> float:
        return (0.01 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.dynamic_range) ** 2


@dataclass(frozen=True)
class LossWeights:
    """alpha weights the structural term, beta the categorical term, and
    lam the fused-image cross-entropy."""

    alpha: float = 5.0
    beta: float = 2.0
    lam: float = 0.2

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.lam < 0:
            raise ValueError("loss weights must be nonnegative")


DEFAULT_SSIM = SsimParams()


@dataclass
class LossBundle:
    """Scalar loss values of one training step."""

    l_sg: float = 0.0
    l_cg: float = 0.0
    l_rc: float = 0.0
    l_g: float = 0.0
    l_ce_main: float = 0.0
    l_ce_fusion: float = 0.0
    l_c: float = 0.0

    def check(self, weights: LossWeights, atol: float = 1e-5) -> None:
        """Verify the internal weighted-sum identities."""
        expected_g = weights.alpha * self.l_sg + weights.beta * self.l_cg + self.l_rc
        expected_c = self.l_ce_main + weights.lam * self.l_ce_fusion
        for name, got, want in (("l_g", self.l_g, expected_g), ("l_c", self.l_c, expected_c)):
            if abs(got - want) > atol * max(1.0, abs(want)):
                raise ValueError(f"inconsistent bundle: {name}={got}, expected {want}")
        for name, v in vars(self).items():
            if not torch.isfinite(torch.tensor(v)):
                raise ValueError(f"non-finite loss {name}={v}")

    def to_dict(self) -> dict:
        return dict(vars(self))


def _flatten_per_sample(x: Tensor, batched: bool) -> Tensor:
    return x.reshape(x.shape[0], -1) if batched else x.reshape(1, -1)


def ssim(x: Tensor, y: Tensor, params: SsimParams = DEFAULT_SSIM, batched: bool = False) -> Tensor:
    """Global SSIM over whole images; returns a scalar (or per-sample vector).

    ssim(x, x) == 1 and the measure is symmetric; anticorrelated images can
    drive it negative, so values lie in (-1, 1].
    """
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    xf = _flatten_per_sample(x, batched)
    yf = _flatten_per_sample(y, batched)
    mu_x = xf.mean(dim=1)
    mu_y = yf.mean(dim=1)
    var_x = ((xf - mu_x[:, None]) ** 2).mean(dim=1)
    var_y = ((yf - mu_y[:, None]) ** 2).mean(dim=1)
    cov = ((xf - mu_x[:, None]) * (yf - mu_y[:, None])).mean(dim=1)
    c1, c2 = params.c1, params.c2
    value = ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / (
        (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    )
    return value if batched else value.squeeze(0)


def structural_generation_loss(
    x_main: Tensor,
    x_ref: Tensor,
    x_fused: Tensor,
    params: SsimParams = DEFAULT_SSIM,
    batched: bool = False,
) -> Tensor:
    """Structural objective of the fused image (batch mean when batched)."""
    s_main = ssim(x_main, x_fused, params, batched=batched)
    s_ref = ssim(x_ref, x_fused, params, batched=batched)
    eps = params.epsilon
    s_main = s_main.clamp(eps, 1.0 - eps)
    s_ref = s_ref.clamp(eps, 1.0 - eps)
    loss = -0.5 * (torch.log(s_main) + torch.log(1.0 - s_ref))
    return loss.mean() if batched else loss


def categorical_generation_loss(
    p_ref: Tensor, p_fused: Tensor, reduction: str = "sum"
) -> Tensor:
    """Squared distance between un-normalized score vectors.

    For batched (B, K) inputs the per-sample reduction is averaged over the
    batch; ``reduction`` picks sum (default) or mean over the K entries.
    """
    if p_ref.shape != p_fused.shape:
        raise ValueError(f"shape mismatch: {tuple(p_ref.shape)} vs {tuple(p_fused.shape)}")
    sq = (p_ref - p_fused) ** 2
    if p_ref.ndim == 1:
        return sq.sum() if reduction == "sum" else sq.mean()
    per_sample = sq.sum(dim=-1) if reduction == "sum" else sq.mean(dim=-1)
    return per_sample.mean()


def reconstruction_loss(f4: Tensor, separated, reduction: str = "sum") -> Tensor:
    """Squared error between ``f4`` and concat[categorical, structural].

    ``separated`` carries ``categorical`` and ``structural`` blocks split
    along the channel axis (axis 0 unbatched, axis 1 batched).
    """
    channel_dim = 0 if f4.ndim == 3 else 1
    recon = torch.cat([separated.categorical, separated.structural], dim=channel_dim)
    if recon.shape != f4.shape:
        raise ValueError(
            f"reconstruction shape {tuple(recon.shape)} != feature shape {tuple(f4.shape)}"
        )
    sq = (f4 - recon) ** 2
    if channel_dim == 0:
        return sq.sum() if reduction == "sum" else sq.mean()
    per_sample = sq.reshape(sq.shape[0], -1)
    per_sample = per_sample.sum(dim=1) if reduction == "sum" else per_sample.mean(dim=1)
    return per_sample.mean()


def generation_loss(l_sg, l_cg, l_rc, weights: LossWeights):
    """Weighted sum alpha*l_sg + beta*l_cg + l_rc."""
    return weights.alpha * l_sg + weights.beta * l_cg + l_rc


def cross_entropy(logits: Tensor, label) -> Tensor:
    """Softmax cross-entropy with 1-indexed labels and stable log-sum-exp.

    ``logits`` is (K,) with an int label, or (B, K) with a length-B label
    vector (batch mean returned).
    """
    if logits.ndim == 1:
        k = logits.shape[0]
        label = int(label)
        if not 1 <= label <= k:
            raise ValueError(f"label {label} outside 1..{k}")
        return torch.logsumexp(logits, dim=0) - logits[label - 1]
    k = logits.shape[1]
    label = torch.as_tensor(label, dtype=torch.long, device=logits.device)
    if label.min() < 1 or label.max() > k:
        raise ValueError(f"labels outside 1..{k}")
    lse = torch.logsumexp(logits, dim=1)
    picked = logits.gather(1, (label - 1).unsqueeze(1)).squeeze(1)
    return (lse - picked).mean()


def classification_loss(ce_main, ce_fusion, lam: float):
    """ce_main + lam * ce_fusion."""
    return ce_main + lam * ce_fusion
