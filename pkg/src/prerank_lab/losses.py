"""List-wise training objectives with analytic gradients.

All kernels are pure functions of per-item logits and return
``(loss, dloss/dlogits)`` pairs with the gradient aligned to the input
array.  The multi-positive variant restricts each positive's softmax
denominator to the negatives plus that positive itself, so positives are
never compared against each other.  Distillation is a soft-label
cross-entropy against teacher probabilities over a selectable item subset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalFault

TASK_NAMES = ("exposure", "click", "purchase")

DISTILL_SETS = ("none", "ex", "ex_rc", "ex_rc_prc")

LOSS_VARIANTS = ("vanilla", "multi_positive")


@dataclass(frozen=True)
class LossWeights:
    """Per-task weights, shared by the rank and distill terms."""

    alpha_ex: float = 1.0
    alpha_cl: float = 2.0
    alpha_pur: float = 4.0

    def validate(self, training: bool = True) -> None:
        if min(self.alpha_ex, self.alpha_cl, self.alpha_pur) < 0:
            raise ValueError("loss weights must be nonnegative")
        if training and self.alpha_ex == self.alpha_cl == self.alpha_pur == 0:
            raise ValueError("at least one loss weight must be positive in training mode")


@dataclass(frozen=True)
class SampleTasks:
    """Boolean positive masks for the three objectives over one sample's items."""

    exposure: np.ndarray
    click: np.ndarray
    purchase: np.ndarray

    def positives(self, task: str) -> np.ndarray:
        return getattr(self, task)


def logsumexp(x, gamma: float = 1.0) -> float:
    """Smooth maximum (1/gamma) * log sum exp(gamma * x_i), max-shifted."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise ValueError("logsumexp of an empty list")
    m = float(np.max(x))
    return m + float(np.log(np.sum(np.exp(gamma * (x - m))))) / gamma


def softplus(x):
    """Overflow-safe log(1 + e^x); >= max(x, 0) pointwise."""
    return np.logaddexp(0.0, x)


def _as_mask(positives, n: int) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    idx = np.asarray(list(positives) if isinstance(positives, (set, frozenset)) else positives)
    if idx.dtype == bool:
        if idx.shape != (n,):
            raise ValueError("boolean positive mask has wrong length")
        return idx.copy()
    mask[idx.astype(np.intp)] = True
    return mask


def listwise_softmax_loss(logits, positives) -> tuple[float, np.ndarray]:
    """Softmax cross entropy summed over positives, denominator = all items.

    loss = sum_{i in D} -log(exp z_i / sum_{j in S} exp z_j)
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericalFault("non-finite logits")
    pos = _as_mask(positives, z.size)
    npos = int(pos.sum())
    if npos == 0:
        raise ValueError("positive set is empty")
    m = np.max(z)
    expz = np.exp(z - m)
    denom = expz.sum()
    lse = m + np.log(denom)
    loss = npos * lse - float(z[pos].sum())
    grad = npos * (expz / denom)
    grad[pos] -= 1.0
    return float(loss), grad


def multi_positive_listwise_loss(logits, positives) -> tuple[float, np.ndarray]:
    """Multi-positive variant: each positive competes only with the negatives.

    The denominator for positive i is {S \\ E} united with {i}, so the term
    for one positive is constant in every other positive's logit.  With a
    single positive this coincides with `listwise_softmax_loss`.
    """
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise NumericalFault("non-finite logits")
    pos = _as_mask(positives, z.size)
    if not pos.any():
        raise ValueError("positive set is empty")
    z_pos = z[pos]
    z_neg = z[~pos]
    grad = np.zeros_like(z)
    if z_neg.size == 0:
        # every item positive: each denominator is {i} alone, all terms vanish
        return 0.0, grad
    m_neg = np.max(z_neg)
    exp_neg = np.exp(z_neg - m_neg)
    lse_neg = m_neg + np.log(exp_neg.sum())
    # per-positive denominator: negatives plus that positive only
    lse_i = np.logaddexp(lse_neg, z_pos)
    loss = float(np.sum(lse_i - z_pos))
    grad[pos] = np.exp(z_pos - lse_i) - 1.0
    # each negative appears in every positive's denominator
    neg_weights = np.exp(z_neg[None, :] - lse_i[:, None]).sum(axis=0)
    grad[~pos] = neg_weights
    return loss, grad


_KERNELS = {
    "vanilla": listwise_softmax_loss,
    "multi_positive": multi_positive_listwise_loss,
}


def rank_loss(
    logits,
    tasks: SampleTasks,
    weights: LossWeights,
    variant: str = "multi_positive",
) -> tuple[float, np.ndarray, tuple[str, ...]]:
    """Weighted sum of the three per-task list-wise losses.

    A task is dropped for this sample when it has no positive or no
    negative item, or when its weight is zero; dropped task names are
    returned for bookkeeping.
    """
    if variant not in _KERNELS:
        raise ValueError(f"unknown loss variant {variant!r}")
    kernel = _KERNELS[variant]
    z = np.asarray(logits, dtype=np.float64)
    alphas = {"exposure": weights.alpha_ex, "click": weights.alpha_cl, "purchase": weights.alpha_pur}
    total = 0.0
    grad = np.zeros_like(z)
    dropped: list[str] = []
    for task in TASK_NAMES:
        pos = tasks.positives(task)
        npos = int(pos.sum())
        if alphas[task] == 0.0 or npos == 0 or npos == z.size:
            dropped.append(task)
            continue
        loss_t, grad_t = kernel(z, pos)
        total += alphas[task] * loss_t
        grad += alphas[task] * grad_t
    return total, grad, tuple(dropped)


def soft_label_softmax_loss(logits, soft_targets) -> tuple[float, np.ndarray]:
    """Cross entropy of softmax(logits) against unnormalized soft targets.

    loss = sum_i -p_i * log softmax(z)_i; stationary where softmax(z) is
    proportional to p.
    """
    z = np.asarray(logits, dtype=np.float64)
    p = np.asarray(soft_targets, dtype=np.float64)
    if z.size == 0:
        raise ValueError("empty distillation set")
    if z.shape != p.shape:
        raise ValueError("logits and soft targets must have equal length")
    if not np.all(np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("soft targets must be finite probabilities in [0, 1]")
    m = np.max(z)
    expz = np.exp(z - m)
    logq = (z - m) - np.log(expz.sum())
    loss = float(-(p * logq).sum())
    grad = p.sum() * (expz / expz.sum()) - p
    return loss, grad


# distill_ctr_loss is the task-level name used throughout the package; the
# CTCVR distill reuses the same kernel with product soft labels.
distill_ctr_loss = soft_label_softmax_loss


def distill_loss(
    logits,
    distill_mask,
    teacher_pctr,
    teacher_pcvr,
    weights: LossWeights,
    scale: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Combined click-rate and click&purchase-rate distillation.

    Both terms normalize the student softmax within the sample's distill
    set; their weights follow the click and purchase task weights, and
    ``scale`` trades the whole term off against the rank loss.
    """
    z = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(distill_mask, dtype=bool)
    grad = np.zeros_like(z)
    if scale < 0:
        raise ValueError("distillation scale must be nonnegative")
    if not mask.any() or scale == 0.0:
        return 0.0, grad
    pctr = np.asarray(teacher_pctr, dtype=np.float64)[mask]
    pcvr = np.asarray(teacher_pcvr, dtype=np.float64)[mask]
    if not (np.all(np.isfinite(pctr)) and np.all(np.isfinite(pcvr))):
        raise ValueError("teacher scores missing on the distillation set")
    total = 0.0
    grad_sub = np.zeros(int(mask.sum()))
    if weights.alpha_cl > 0:
        loss_ctr, g = soft_label_softmax_loss(z[mask], pctr)
        total += weights.alpha_cl * loss_ctr
        grad_sub += weights.alpha_cl * g
    if weights.alpha_pur > 0:
        loss_ctcvr, g = soft_label_softmax_loss(z[mask], pctr * pcvr)
        total += weights.alpha_pur * loss_ctcvr
        grad_sub += weights.alpha_pur * g
    grad[mask] = scale * grad_sub
    return scale * total, grad


def total_loss(
    logits,
    tasks: SampleTasks,
    weights: LossWeights,
    variant: str = "multi_positive",
    distill_mask=None,
    teacher_pctr=None,
    teacher_pcvr=None,
    distill_scale: float = 1.0,
) -> tuple[float, np.ndarray, tuple[str, ...]]:
    """Rank loss plus (optional) distillation loss; gradients add."""
    loss, grad, dropped = rank_loss(logits, tasks, weights, variant)
    if distill_mask is not None:
        d_loss, d_grad = distill_loss(
            logits, distill_mask, teacher_pctr, teacher_pcvr, weights, distill_scale
        )
        loss += d_loss
        grad = grad + d_grad
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericalFault("non-finite loss or gradient")
    return loss, grad, dropped
