"""Teacher/student distillation objectives and the KD-weight decay schedule."""
from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import DimensionError, ParameterError
from .functional import LabelBatch, cross_entropy, kl_div, log_softmax_t, mse, softmax_t
from .prototype import GlobalPrototypeTable, proto_mse_term
from .tensor import Tensor


@dataclass(frozen=True)
class DistillConfig:
    """Loss weights for one node.

    ``alpha_s`` weights the teacher-guided terms of the student loss and is the
    quantity halved after every round; it snaps to zero once it drops below
    ``beta_limit``.
    """

    T: float = 2.0
    alpha_s: float = 1.0
    beta_s: float = 1.0
    beta_t: float = 1.0
    beta_limit: float = 0.1

    def __post_init__(self):
        if not self.T > 0:
            raise ParameterError(f"temperature must be positive, got {self.T}")
        for name in ("alpha_s", "beta_s", "beta_t", "beta_limit"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.alpha_s > 1:
            raise ParameterError(f"alpha_s must lie in [0, 1], got {self.alpha_s}")


def kd_loss(y_s: Tensor, y_t: Tensor, T: float) -> Tensor:
    """``T^2 * KL(softmax(y_t/T) || softmax(y_s/T))``."""
    if y_s.shape != y_t.shape:
        raise DimensionError("student vs teacher logits", y_t.shape, y_s.shape)
    return kl_div(softmax_t(y_t, T), log_softmax_t(y_s, T)) * (T * T)


def student_loss(y_s: Tensor, y_t: Tensor | None, repr_s: Tensor, repr_t: Tensor | None,
                 labels: LabelBatch, global_protos: GlobalPrototypeTable, cfg: DistillConfig) -> Tensor:
    """Cross-entropy, prototype pull, and (if ``alpha_s > 0``) the teacher-matching terms.

    Teacher tensors are treated as constants. When ``alpha_s == 0`` they are
    never touched and may be ``None``.
    """
    loss = cross_entropy(y_s, labels)
    if cfg.beta_s:
        loss = loss + proto_mse_term(repr_s, labels, global_protos) * cfg.beta_s
    if cfg.alpha_s:
        if y_t is None or repr_t is None:
            raise ParameterError("alpha_s > 0 requires teacher logits and representations")
        if repr_s.shape != repr_t.shape:
            raise DimensionError("student vs teacher representation", repr_t.shape, repr_s.shape)
        guided = kd_loss(y_s, y_t.detach(), cfg.T) + mse(repr_s, repr_t.detach())
        loss = loss + guided * cfg.alpha_s
    return loss


def teacher_loss(y_t: Tensor, repr_t: Tensor, labels: LabelBatch, global_protos: GlobalPrototypeTable,
                 beta_t: float) -> Tensor:
    loss = cross_entropy(y_t, labels)
    if beta_t:
        loss = loss + proto_mse_term(repr_t, labels, global_protos) * beta_t
    return loss


def decay_alpha(cfg: DistillConfig) -> DistillConfig:
    """Halve ``alpha_s``; zero it once it falls below ``beta_limit``."""
    alpha = cfg.alpha_s / 2
    if alpha < cfg.beta_limit:
        alpha = 0.0
    return replace(cfg, alpha_s=alpha)
