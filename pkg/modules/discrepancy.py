import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from modules.tensor import SqDist, Tensor, as_tensor

logger = logging.getLogger("kavi.discrepancy")

DEFAULT_BANDWIDTHS = (0.001, 0.01, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class KernelFamily:
    '''Mixture of Gaussian kernels exp(-d / (2 sigma^2)); weights default to uniform.'''
    bandwidths: tuple[float, ...] = DEFAULT_BANDWIDTHS
    mixture_weights: tuple[float, ...] | None = None

    def __post_init__(self):
        bandwidths = tuple(float(b) for b in self.bandwidths)
        if not bandwidths:
            raise ValueError("kernel family needs at least one bandwidth")
        if any(b <= 0 or not math.isfinite(b) for b in bandwidths):
            raise ValueError(f"bandwidths must be positive, got {bandwidths}")
        if self.mixture_weights is None:
            weights = tuple(1.0 / len(bandwidths) for _ in bandwidths)
        else:
            weights = tuple(float(w) for w in self.mixture_weights)
            if len(weights) != len(bandwidths):
                raise ValueError(f"{len(weights)} mixture weights for {len(bandwidths)} bandwidths")
            if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
                raise ValueError(f"mixture weights must be nonnegative and sum to 1, got {weights}")
        object.__setattr__(self, 'bandwidths', bandwidths)
        object.__setattr__(self, 'mixture_weights', weights)


@dataclass(frozen=True)
class ClassWeights:
    '''values[i, c] is the weight of sample i in class c; each present column sums to 1.'''
    values: np.ndarray
    present: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SmoothedLabels:
    values: np.ndarray
    epsilon: float


@dataclass
class SdaTerms:
    cls: float
    d_z1: float
    d_z2: float
    sda: float
    lambda_sda: float
    # classes present in both domains; the loss keeps 1/n_c regardless
    shared_classes: int = 0
    extra: dict = field(default_factory=dict)


def kernel_matrix(x, y, family: KernelFamily, squared: bool = False) -> Tensor:
    '''Mixture of Gaussian kernels sum_i mu_i exp(-|x - y|^2 / 2 sigma_i^2), squared on request.'''
    d = SqDist.apply(as_tensor(x), as_tensor(y))
    k = None
    for sigma, mu in zip(family.bandwidths, family.mixture_weights):
        term = (d * (-1.0 / (2.0 * sigma * sigma))).exp() * mu
        k = term if k is None else k + term
    return k * k if squared else k


def mmsd_biased(xs, xt, family: KernelFamily) -> Tensor:
    '''Biased squared-kernel discrepancy: mean k2(s,s) + mean k2(t,t) - 2 mean k2(s,t).'''
    xs, xt = as_tensor(xs), as_tensor(xt)
    if xs.shape[0] == 0 or xt.shape[0] == 0:
        raise ValueError("both domains need at least one sample")
    kss = kernel_matrix(xs, xs, family, squared=True)
    ktt = kernel_matrix(xt, xt, family, squared=True)
    kst = kernel_matrix(xs, xt, family, squared=True)
    return kss.mean() + ktt.mean() - kst.mean() * 2.0


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels outside [0, {n_classes})")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def class_weights(label_dists, n_classes: int | None = None) -> ClassWeights:
    '''Column-normalized label distributions: w[i, c] = y[i, c] / sum_j y[j, c].
    Classes with zero mass get a zero column and present=False.'''
    y = np.asarray(label_dists, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError(f"label distributions must be N x n_c, got shape {y.shape}")
    if n_classes is not None and y.shape[1] != n_classes:
        raise ValueError(f"expected {n_classes} classes, got {y.shape[1]}")
    if (y < 0).any() or not np.allclose(y.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("rows must be probability vectors")
    totals = y.sum(axis=0)
    present = totals > 0
    values = y / np.where(present, totals, 1.0)
    values[:, ~present] = 0.0
    return ClassWeights(values, present)


def hard_class_weights(label_dists, n_classes: int | None = None) -> ClassWeights:
    '''Class weights from the argmax of each row (lowest index on ties).'''
    y = np.asarray(label_dists, dtype=np.float64)
    return class_weights(one_hot(y.argmax(axis=1), y.shape[1]), n_classes)


def smooth_labels(labels, epsilon: float, n_classes: int) -> SmoothedLabels:
    '''(1 - epsilon) * one_hot + epsilon / n_c.'''
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"smoothing coefficient must be in [0, 1), got {epsilon}")
    y = one_hot(labels, n_classes)
    return SmoothedLabels((1.0 - epsilon) * y + epsilon / n_classes, epsilon)


def smoothed_ce(logits: Tensor, labels, epsilon: float) -> Tensor:
    '''Batch-mean cross-entropy against smoothed targets.'''
    n, n_classes = logits.shape
    target = smooth_labels(labels, epsilon, n_classes).values
    return (Tensor._wrap(target) * logits.log_softmax(axis=1)).sum() * (-1.0 / n)


def elmmsd(features_s, features_t, weights_s: ClassWeights, weights_t: ClassWeights,
           family: KernelFamily, squared: bool = True) -> Tensor:
    '''Class-weighted discrepancy averaged over n_c; classes missing from either domain add 0.'''
    fs, ft = as_tensor(features_s), as_tensor(features_t)
    if weights_s.values.shape[0] != fs.shape[0] or weights_t.values.shape[0] != ft.shape[0]:
        raise ValueError("class weights do not match the batch")
    if weights_s.n_classes != weights_t.n_classes:
        raise ValueError("source and target weights disagree on n_c")
    shared = weights_s.present & weights_t.present
    if not shared.any():
        logger.warning("no class shared by source and target batch; class discrepancy is 0")
        return Tensor(0.0)
    ws = Tensor._wrap(weights_s.values[:, shared])
    wt = Tensor._wrap(weights_t.values[:, shared])
    kss = kernel_matrix(fs, fs, family, squared)
    ktt = kernel_matrix(ft, ft, family, squared)
    kst = kernel_matrix(fs, ft, family, squared)
    total = (ws * (kss @ ws)).sum() + (wt * (ktt @ wt)).sum() - (ws * (kst @ wt)).sum() * 2.0
    return total * (1.0 / weights_s.n_classes)


def lmmd_baseline(features_s, features_t, weights_s: ClassWeights, weights_t: ClassWeights,
                  family: KernelFamily) -> Tensor:
    '''Unsquared-kernel variant; callers pass hard-label weights.'''
    return elmmsd(features_s, features_t, weights_s, weights_t, family, squared=False)


def shared_class_count(weights_s: ClassWeights, weights_t: ClassWeights) -> int:
    return int((weights_s.present & weights_t.present).sum())


Discrepancy = Callable[[Tensor, Tensor, ClassWeights, ClassWeights, KernelFamily], Tensor]


def sda_loss(logits_s: Tensor, labels_s, fc1_s, fc1_t, fc2_s, fc2_t,
             weights_s: ClassWeights, weights_t: ClassWeights, family: KernelFamily,
             epsilon: float, lambda_sda: float,
             discrepancy: Discrepancy = elmmsd) -> tuple[Tensor, SdaTerms]:
    '''Smoothed CE plus lambda_sda times the discrepancy at two feature layers.
    A layer passed as None contributes 0.'''
    cls = smoothed_ce(logits_s, labels_s, epsilon)
    d_z1 = discrepancy(fc1_s, fc1_t, weights_s, weights_t, family) if fc1_s is not None else Tensor(0.0)
    d_z2 = discrepancy(fc2_s, fc2_t, weights_s, weights_t, family) if fc2_s is not None else Tensor(0.0)
    loss = cls + (d_z1 + d_z2) * lambda_sda
    terms = SdaTerms(cls=cls.item(), d_z1=d_z1.item(), d_z2=d_z2.item(), sda=loss.item(),
                     lambda_sda=lambda_sda, shared_classes=shared_class_count(weights_s, weights_t))
    return loss, terms


def mmsd_discrepancy(features_s, features_t, weights_s: ClassWeights, weights_t: ClassWeights,
                     family: KernelFamily) -> Tensor:
    '''Global (class-blind) discrepancy with the Discrepancy signature.'''
    return mmsd_biased(features_s, features_t, family)


def lambda_sda(epoch: float, max_epochs: int) -> float:
    '''Adaptation weight 4 - 4 / (sqrt(epoch / (n_e + 1)) + 1): 0 at the start, below 2 throughout.'''
    if max_epochs <= 0:
        raise ValueError(f"max_epochs must be positive, got {max_epochs}")
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    return 4.0 - 4.0 / (math.sqrt(epoch / (max_epochs + 1)) + 1.0)
