"""
Domain-adaptation block: gradient reversal, the GAP -> FC domain classifier,
the adversarial loss, and the unbiased multi-kernel MMD estimator.
"""

import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.autograd import Function

from model.models import BANDWIDTH_MULTIPLIERS, KernelBandwidths
from utils.errors import EmptyBatchError, EstimatorUndefinedError, NumericError, ShapeError

logger = logging.getLogger(__name__)

SigmaLike = Union[KernelBandwidths, Sequence[float], torch.Tensor]


class GradientReversal(Function):
    """
    Gradient Reversal Layer
    Forward pass: identity
    Backward pass: negates and scales the gradient by lambda
    """

    @staticmethod
    def forward(ctx, x, grl_lambda):
        ctx.grl_lambda = grl_lambda
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.grl_lambda, None


def grl_apply(x: torch.Tensor, grl_lambda: float) -> torch.Tensor:
    if grl_lambda < 0:
        raise ValueError(f"grl_lambda must be >= 0, got {grl_lambda}")
    return GradientReversal.apply(x, float(grl_lambda))


def grl_backward(grad: torch.Tensor, grl_lambda: float) -> torch.Tensor:
    """The gradient GradientReversal hands upstream for an incoming ``grad``."""
    return grad.neg() * float(grl_lambda)


def global_average_pool(features: torch.Tensor) -> torch.Tensor:
    """(B, C, D, H, W) -> (B, C) spatial mean."""
    if features.dim() != 5:
        raise ShapeError(f"expected (B, C, D, H, W) features, got {tuple(features.shape)}")
    return features.mean(dim=(2, 3, 4))


class DomainClassifier(nn.Module):
    """
    Domain head over GAP features, e.g. widths (d, d/4, d/8, 2).

    Each hidden layer is Linear, ReLU, LayerNorm, Dropout; the last Linear
    emits the two domain logits.
    """

    def __init__(self, widths: Sequence[int], dropout: float = 0.2):
        super().__init__()
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or widths[-1] != 2 or min(widths) < 1:
            raise ValueError(f"domain head widths must be positive and end in 2, got {widths}")
        layers: List[nn.Module] = []
        for fan_in, fan_out in zip(widths[:-2], widths[1:-1]):
            layers += [nn.Linear(fan_in, fan_out), nn.ReLU(), nn.LayerNorm(fan_out), nn.Dropout(dropout)]
        layers.append(nn.Linear(widths[-2], widths[-1]))
        self.layers = nn.Sequential(*layers)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.layers(pooled)


def domain_classify(vit_out: torch.Tensor, head: DomainClassifier) -> torch.Tensor:
    """GAP the ViT feature volume and return (B, 2) domain logits."""
    pooled = global_average_pool(vit_out)
    if not torch.isfinite(pooled).all():
        raise NumericError("non-finite ViT features entering the domain classifier")
    logits = head(pooled)
    if not torch.isfinite(logits).all():
        raise NumericError("domain classifier produced non-finite logits")
    return logits


def adversarial_loss(logits: torch.Tensor, domain_labels: torch.Tensor) -> torch.Tensor:
    """Mean two-class cross-entropy of domain logits against domain labels."""
    if logits.shape[0] == 0:
        raise EmptyBatchError("adversarial loss needs at least one sample")
    return F.cross_entropy(logits, domain_labels.long())


def domain_accuracy(logits: torch.Tensor, domain_labels: torch.Tensor) -> float:
    return float((logits.argmax(dim=1) == domain_labels.long()).double().mean())


def median_bandwidths(features: torch.Tensor) -> KernelBandwidths:
    """
    Median heuristic: base sigma is the median pairwise Euclidean distance of
    the combined batch, expanded by the fixed multipliers.

    Identical features (median 0) fall back to a base sigma of 1.
    """
    if features.dim() != 2 or features.shape[0] < 2:
        raise EstimatorUndefinedError(
            f"median heuristic needs >= 2 feature vectors, got shape {tuple(features.shape)}"
        )
    with torch.no_grad():
        distances = torch.pdist(features.detach().double())
        base = float(torch.quantile(distances, 0.5))
    if not math.isfinite(base):
        raise NumericError("non-finite pairwise feature distances")
    if base == 0.0:
        logger.debug("all pooled features coincide; falling back to base sigma 1")
        base = 1.0
    return KernelBandwidths.from_base(base)


def fixed_bandwidths(base_sigma: float) -> KernelBandwidths:
    return KernelBandwidths.from_base(base_sigma)


def _sigma_tensor(sigmas: SigmaLike, like: torch.Tensor) -> torch.Tensor:
    if isinstance(sigmas, KernelBandwidths):
        sigmas = sigmas.sigmas
    return torch.as_tensor(sigmas, dtype=like.dtype, device=like.device).reshape(-1)


def kernel_matrix(x: torch.Tensor, y: torch.Tensor, sigmas: SigmaLike) -> torch.Tensor:
    """Mixture-of-Gaussians kernel between every row of ``x`` and of ``y``."""
    sq_dist = ((x.unsqueeze(1) - y.unsqueeze(0)) ** 2).sum(dim=-1)
    sigma = _sigma_tensor(sigmas, sq_dist)
    return torch.exp(-sq_dist.unsqueeze(0) / (2.0 * sigma.view(-1, 1, 1) ** 2)).sum(dim=0)


def mk_kernel(f: torch.Tensor, f_prime: torch.Tensor, sigmas: SigmaLike) -> torch.Tensor:
    """k(f, f') = sum_m exp(-||f - f'||^2 / (2 sigma_m^2)) for two vectors."""
    if f.shape != f_prime.shape:
        raise ShapeError(f"kernel arguments differ in shape: {tuple(f.shape)} vs {tuple(f_prime.shape)}")
    sq_dist = ((f - f_prime) ** 2).sum()
    sigma = _sigma_tensor(sigmas, sq_dist)
    return torch.exp(-sq_dist / (2.0 * sigma**2)).sum()


def _off_diagonal_mean(k: torch.Tensor) -> torch.Tensor:
    n = k.shape[0]
    return (k.sum() - k.diagonal().sum()) / (n * (n - 1))


def mmd2_unbiased(
    source: torch.Tensor, target: torch.Tensor, sigmas: SigmaLike
) -> torch.Tensor:
    """
    Unbiased MMD^2 between pooled source and target features.

    Within-domain means exclude self-pairs, so the estimate can be negative
    when the two samples come from the same distribution.
    """
    n_s, n_t = source.shape[0], target.shape[0]
    if n_s < 2 or n_t < 2:
        raise EstimatorUndefinedError(
            f"unbiased MMD needs >= 2 samples per domain, got n_s={n_s}, n_t={n_t}"
        )
    if source.shape[1:] != target.shape[1:]:
        raise ShapeError(
            f"source/target feature dims differ: {tuple(source.shape)} vs {tuple(target.shape)}"
        )
    k_ss = kernel_matrix(source, source, sigmas)
    k_tt = kernel_matrix(target, target, sigmas)
    k_st = kernel_matrix(source, target, sigmas)
    return _off_diagonal_mean(k_ss) + _off_diagonal_mean(k_tt) - 2.0 * k_st.mean()


class MultiKernelMMD(nn.Module):
    """MMD^2 loss with median-heuristic (or fixed) kernel bandwidths."""

    def __init__(self, fixed_sigma: Optional[float] = None):
        super().__init__()
        self.fixed_sigma = fixed_sigma
        self.multipliers: Tuple[float, ...] = BANDWIDTH_MULTIPLIERS

    def bandwidths(self, source: torch.Tensor, target: torch.Tensor) -> KernelBandwidths:
        if self.fixed_sigma is not None:
            return fixed_bandwidths(self.fixed_sigma)
        return median_bandwidths(torch.cat([source, target], dim=0))

    def forward(self, source: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
        return mmd2_unbiased(source, target, self.bandwidths(source, target))


def fit_domain_probe(
    features: torch.Tensor,
    labels: torch.Tensor,
    steps: int = 500,
    lr: float = 0.1,
    seed: int = 0,
) -> float:
    """
    Fit a fresh logistic-regression probe on frozen pooled features and
    return its accuracy on those features.
    """
    generator = torch.Generator().manual_seed(seed)
    x = features.detach().double()
    x = (x - x.mean(dim=0)) / (x.std(dim=0) + 1e-8)
    y = labels.long()
    weight = (0.01 * torch.randn(x.shape[1], 2, generator=generator, dtype=x.dtype)).requires_grad_()
    bias = torch.zeros(2, dtype=x.dtype, requires_grad=True)
    optimizer = torch.optim.Adam([weight, bias], lr=lr)
    for _ in range(steps):
        optimizer.zero_grad()
        loss = F.cross_entropy(x @ weight + bias, y)
        loss.backward()
        optimizer.step()
    with torch.no_grad():
        return domain_accuracy(x @ weight + bias, y)
