"""Difficulty-weighted training objective.

Each sample's cross-entropy is scaled by (1 + alpha), where alpha is
the relative gap between the frozen zero-shot probability and the
prompted probability of the label class, raised to a scale exponent and
clipped. Easy samples (both branches confident and close) get a low
weight; samples the prompt moves far from the frozen prediction get a
high one. The weight is a per-sample constant: no gradient flows
through it, and inference never uses it.

Prompted features are additionally regularized toward the frozen
features through cosine distance, weighted per modality.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import FrozenFeatures
from .pipeline import PromptedOutput
from .tensor import Tensor, cosine_pairs, log, mean_all, neg, reshape, take

ALPHA_CLIP_MODES = ("min1", "max1", "none")
_SUM_FLOOR = 1e-12


@dataclass
class LossBreakdown:
    """Per-sample record of the loss composition.

    total always recomposes as (1 + alpha) * ce + omega_v * reg_v +
    omega_t * reg_t from the stored unweighted parts.
    """

    ce: float
    alpha: float
    reg_v: float
    reg_t: float
    total: float
    p_prompted: float
    p_zero_shot: float


def sample_weight(p_zero_shot: float, p_prompted: float, gamma: float,
                  cap: float = 1.0, clip: str = "min1") -> float:
    """Difficulty weight alpha from the two label-class probabilities.

    alpha_raw = (2|q - p| / (q + p)) ** gamma, then clipped: "min1"
    caps at ``cap`` (default), "max1" floors at 1 (the literal printed
    rule, kept for reproduction), "none" leaves it raw. A vanishing
    denominator (q + p below 1e-12) yields alpha = 0.
    """
    q, p = float(p_zero_shot), float(p_prompted)
    for name, v in (("p_zero_shot", q), ("p_prompted", p)):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"{name}={v} outside [0, 1]")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if clip not in ALPHA_CLIP_MODES:
        raise ValueError(f"clip must be one of {ALPHA_CLIP_MODES}")
    if q + p < _SUM_FLOOR:
        return 0.0
    raw = (2.0 * abs(q - p) / (q + p)) ** gamma
    if clip == "min1":
        return min(raw, cap)
    if clip == "max1":
        return max(raw, 1.0)
    return raw


def regularization(x: Tensor, x_prime: np.ndarray, w: Tensor,
                   w_prime: np.ndarray) -> tuple[Tensor, Tensor]:
    """Unweighted cosine-distance anchors to the frozen features.

    reg_v = 1 - cos(x', x); reg_t averages 1 - cos(w'_c, w_c) over the
    class rows. Weights are applied by the caller.
    """
    d = x.shape[0]
    xv = reshape(x, (1, d))
    reg_v = 1.0 - take(cosine_pairs(Tensor(x_prime.reshape(1, d)), xv), 0)
    reg_t = 1.0 - mean_all(cosine_pairs(Tensor(w_prime), w))
    return reg_v, reg_t


def cross_entropy(probabilities: Tensor, label: int) -> Tensor:
    """-log p[label] from an already-normalized probability vector."""
    if not 0 <= label < probabilities.shape[0]:
        raise IndexError(f"label {label} out of range for "
                         f"{probabilities.shape[0]} classes")
    return neg(log(take(probabilities, label)))


def total_loss(prompted: PromptedOutput, frozen: FrozenFeatures, label: int,
               gamma: float, omega_v: float, omega_t: float,
               cap: float = 1.0, clip: str = "min1",
               alpha_override: float | None = None) -> tuple[Tensor, LossBreakdown]:
    """Weighted cross-entropy plus frozen-feature regularization.

    Returns the differentiable scalar loss and a float breakdown; alpha
    is computed from detached probabilities and enters as a constant.
    ``alpha_override`` pins the weight to a given value (finite-difference
    checks need the frozen weight held fixed across probe evaluations).
    """
    p_label = float(prompted.p.data[label])
    q_label = float(frozen.p_zero_shot[label])
    if alpha_override is None:
        alpha = sample_weight(q_label, p_label, gamma, cap, clip)
    else:
        alpha = float(alpha_override)
    ce = cross_entropy(prompted.p, label)
    reg_v, reg_t = regularization(prompted.x, frozen.x_prime,
                                  prompted.w, frozen.w_prime)
    loss = ce * (1.0 + alpha) + reg_v * omega_v + reg_t * omega_t
    breakdown = LossBreakdown(
        ce=ce.item(), alpha=alpha, reg_v=reg_v.item(), reg_t=reg_t.item(),
        total=loss.item(), p_prompted=p_label, p_zero_shot=q_label)
    return loss, breakdown
