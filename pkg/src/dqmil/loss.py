"""Self-distillation objective and its constituent terms.

The Perceiver head (``p_sa`` / ``t_sa``) is the teacher and the MIL head the
student. By default the teacher side of the KL and hint terms is detached, so
those terms only train the MIL pathway.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import numerics as nx
from .errors import ConfigError, DimensionError, LabelError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.7
    lam: float = 0.03
    detach_teacher: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.lam >= 0.0:
            raise ConfigError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class LossBreakdown:
    total: nx.Tensor
    ce_sa: float = 0.0
    ce_mil: float = 0.0
    kl: float = 0.0
    hint: float = 0.0
    ce_blend: float = 0.0  # only the dq-ce variant trains on the blended output

    def as_row(self):
        return {"total": self.total.item(), "ce_sa": self.ce_sa, "ce_mil": self.ce_mil,
                "kl": self.kl, "hint": self.hint, "ce_blend": self.ce_blend}

    def recomposed(self, variant: str, weights: LossWeights) -> float:
        """The total implied by the reported parts for ``variant``."""
        if variant == "dq-sd":
            return (self.ce_sa + weights.alpha * self.ce_mil
                    + (1.0 - weights.alpha) * self.kl + weights.lam * self.hint)
        if variant == "dq-ce":
            return self.ce_blend
        if variant == "mil-only":
            return self.ce_mil
        return self.ce_sa


def cross_entropy(p, label: int):
    """``-log p[label]`` with a probability floor before the log."""
    p = nx.as_tensor(p)
    k = p.shape[-1]
    if not 0 <= int(label) < k:
        raise LabelError(f"label {label} outside [0, {k})")
    return -nx.log_floor(p[int(label)], PROB_FLOOR)


def kl_divergence(p_student, p_teacher, detach_teacher=True):
    """KL(student || teacher) = sum p_s * (ln p_s - ln p_t)."""
    p_student, p_teacher = nx.as_tensor(p_student), nx.as_tensor(p_teacher)
    if p_student.shape != p_teacher.shape:
        raise DimensionError(f"KL between shapes {p_student.shape} and {p_teacher.shape}")
    if detach_teacher:
        p_teacher = p_teacher.detach()
    log_ratio = nx.log_floor(p_student, PROB_FLOOR) - nx.log_floor(p_teacher, PROB_FLOOR)
    return nx.sum_all(p_student * log_ratio)


def hint_loss(t_sa, t_mil, detach_teacher=True):
    t_sa, t_mil = nx.as_tensor(t_sa), nx.as_tensor(t_mil)
    if t_sa.shape != t_mil.shape:
        raise DimensionError(f"hint between widths {t_sa.shape} and {t_mil.shape}")
    if detach_teacher:
        t_sa = t_sa.detach()
    return nx.l2_norm_sq(t_sa - t_mil)


def self_distillation_loss(out, label: int, weights: LossWeights = LossWeights(),
                           variant: str = "dq-sd") -> LossBreakdown:
    """Training objective for ``variant``.

    dq-sd: CE(p_sa) + alpha CE(p_mil) + (1 - alpha) KL(p_mil || p_sa) + lambda ||t_sa - t_mil||^2.
    dq-ce: CE of the blended ``p``. Single-pathway variants: CE of the active head.
    Per-term values are reported as floats; ``total`` stays on the graph.
    """
    if variant == "mil-only":
        ce = cross_entropy(out.p_mil, label)
        return LossBreakdown(total=ce, ce_mil=ce.item())
    if variant == "perceiver-only":
        ce = cross_entropy(out.p_sa, label)
        return LossBreakdown(total=ce, ce_sa=ce.item())
    if variant == "dq-ce":
        ce = cross_entropy(out.p, label)
        with nx.no_grad():
            ce_sa = cross_entropy(out.p_sa, label).item()
            ce_mil = cross_entropy(out.p_mil, label).item()
        return LossBreakdown(total=ce, ce_sa=ce_sa, ce_mil=ce_mil, ce_blend=ce.item())

    ce_sa = cross_entropy(out.p_sa, label)
    ce_mil = cross_entropy(out.p_mil, label)
    kl = kl_divergence(out.p_mil, out.p_sa, weights.detach_teacher)
    hint = hint_loss(out.t_sa, out.t_mil, weights.detach_teacher)
    total = (ce_sa + ce_mil * weights.alpha + kl * (1.0 - weights.alpha) + hint * weights.lam)
    return LossBreakdown(total=total, ce_sa=ce_sa.item(), ce_mil=ce_mil.item(),
                         kl=kl.item(), hint=hint.item())

