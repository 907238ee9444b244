"""Scalar objectives: classification, divergences, image priors, composites.

All losses are pure functions of their inputs and safe to evaluate on
disjoint graphs concurrently. Teacher-side quantities are always detached,
so distillation gradients flow into the student only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, no_grad
from .vit import TokenMask, ViTParams, pixel_activity, vit_forward


@dataclass
class LossWeights:
    """Scaling factors for the composite inversion and relabel losses.

    ``adversarial_js`` controls the sign convention of the divergence term
    during inversion: True subtracts alpha_js * JS (maximize teacher-student
    disagreement), False adds it.
    """

    alpha_js: float = 1.0
    alpha_tv: float = 1e-4
    alpha_l2: float = 1e-5
    lambda1: float = 0.5
    lambda2: float = 0.5
    tau: float = 1.0
    adversarial_js: bool = True
    relabel_teacher_full: bool = False

    def __post_init__(self):
        for name in ("alpha_tv", "alpha_l2", "lambda1", "lambda2", "tau"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return {
            "alpha_js": self.alpha_js, "alpha_tv": self.alpha_tv,
            "alpha_l2": self.alpha_l2, "lambda1": self.lambda1,
            "lambda2": self.lambda2, "tau": self.tau,
            "adversarial_js": self.adversarial_js,
            "relabel_teacher_full": self.relabel_teacher_full,
        }


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log softmax(logits)[label]."""
    return T.cross_entropy_logits(logits, label)


def _log_softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max()
    return shifted - np.log(np.exp(shifted).sum())


def kl_divergence(p_logits: Tensor, q_logits: Tensor, tau: float = 1.0) -> Tensor:
    """KL(softmax(p/tau) || softmax(q/tau)); gradient reaches q_logits only."""
    if tau <= 0:
        raise ValueError("tau must be > 0")
    lp = _log_softmax_np(p_logits.data / tau)
    p = np.exp(lp)
    lq = T.log_softmax(T.scale(q_logits, 1.0 / tau))
    return T.tsum(T.mul(Tensor(p), T.sub(Tensor(lp), lq)))


def js_divergence(p_logits: Tensor, q_logits: Tensor) -> Tensor:
    """Jensen-Shannon divergence of the two softmax distributions.

    Symmetric, bounded by ln 2, and differentiable in both arguments.
    """
    p = T.softmax(p_logits)
    q = T.softmax(q_logits)
    lm = T.tlog(T.scale(T.add(p, q), 0.5))
    lp = T.log_softmax(p_logits)
    lq = T.log_softmax(q_logits)
    left = T.tsum(T.mul(p, T.sub(lp, lm)))
    right = T.tsum(T.mul(q, T.sub(lq, lm)))
    return T.scale(T.add(left, right), 0.5)


def tv_regularizer(image: Tensor, active_pixels: np.ndarray | None = None) -> Tensor:
    """Squared anisotropic total variation, summed over channels.

    With ``active_pixels`` (an (H, W, 1) 0/1 weight map), only differences
    between two active pixels count, so halted patches contribute exactly
    zero value and zero gradient.
    """
    h, w = image.data.shape[0], image.data.shape[1]
    if h < 2 or w < 2:
        raise ValueError(f"total variation needs at least 2x2 pixels, got {h}x{w}")
    dv = T.sub(T.slice_axis(image, 0, 1, h), T.slice_axis(image, 0, 0, h - 1))
    dh = T.sub(T.slice_axis(image, 1, 1, w), T.slice_axis(image, 1, 0, w - 1))
    dv2, dh2 = T.mul(dv, dv), T.mul(dh, dh)
    if active_pixels is not None:
        dv2 = T.mul(dv2, Tensor(active_pixels[1:, :] * active_pixels[:-1, :]))
        dh2 = T.mul(dh2, Tensor(active_pixels[:, 1:] * active_pixels[:, :-1]))
    return T.add(T.tsum(dv2), T.tsum(dh2))


def l2_regularizer(image: Tensor, active_pixels: np.ndarray | None = None) -> Tensor:
    """Sum of squared pixel values, optionally restricted to active pixels."""
    sq = T.mul(image, image)
    if active_pixels is not None:
        sq = T.mul(sq, Tensor(active_pixels))
    return T.tsum(sq)


def inversion_loss(local: ViTParams, server: ViTParams, x_hat: Tensor, y_hat: int,
                   mask: TokenMask, weights: LossWeights,
                   parts: dict | None = None,
                   traces: dict | None = None) -> Tensor:
    """Composite image-synthesis objective.

    Classification loss on the inverted local model, a JS disagreement term
    against the current server (sign set by ``weights.adversarial_js``), and
    total-variation / l2 image priors. Both forwards use the same token mask,
    and the priors are restricted to active-patch pixels, so every pixel of a
    halted patch has exactly zero gradient through the whole objective.
    If ``parts``/``traces`` dicts are supplied they receive the component
    values / the two forward traces.
    """
    local_trace = vit_forward(local, x_hat, mask)
    server_trace = vit_forward(server, x_hat, mask)
    ce = cross_entropy(local_trace.logits, y_hat)
    js = js_divergence(local_trace.logits, server_trace.logits)
    active_px = None if mask.active.all() else pixel_activity(mask, local.config)
    tv = tv_regularizer(x_hat, active_px)
    l2 = l2_regularizer(x_hat, active_px)
    js_sign = -1.0 if weights.adversarial_js else 1.0
    loss = T.add(ce, T.scale(js, js_sign * weights.alpha_js))
    loss = T.add(loss, T.scale(tv, weights.alpha_tv))
    loss = T.add(loss, T.scale(l2, weights.alpha_l2))
    if parts is not None:
        parts.update(loss_cls=ce.item(), loss_js=js.item(),
                     loss_tv=tv.item(), loss_l2=l2.item())
    if traces is not None:
        traces.update(local=local_trace, server=server_trace)
    return loss


def relabel_loss(server: ViTParams, ensemble, x_hat: Tensor, y_hat: int,
                 mask: TokenMask, weights: LossWeights,
                 parts: dict | None = None) -> Tensor:
    """Distillation objective over high- and low-information tokens.

    Term 1 distills the ensemble on the full image; term 2 applies the
    sampled label to the high-information (mask-active) tokens; term 3
    re-distills the ensemble on the low-information tokens that inversion
    halted. An all-active mask makes term 3 exactly zero. Gradients reach
    the server parameters only; the ensemble teacher is detached.
    """
    cfg = server.config
    full = TokenMask.full(cfg.num_patches)
    with no_grad():
        teacher_full = ensemble.logits(x_hat, full)
    student_full = vit_forward(server, x_hat, full)
    loss = kl_divergence(teacher_full, student_full.logits, weights.tau)
    kd_val = loss.item()

    ce_val = 0.0
    if weights.lambda1 != 0.0:
        student_high = vit_forward(server, x_hat, mask)
        ce = cross_entropy(student_high.logits, y_hat)
        ce_val = ce.item()
        loss = T.add(loss, T.scale(ce, weights.lambda1))

    low_active = ~mask.active
    kl_low_val = 0.0
    if weights.lambda2 != 0.0 and low_active.any():
        low_mask = TokenMask(low_active)
        teacher_mask = full if weights.relabel_teacher_full else low_mask
        with no_grad():
            teacher_low = ensemble.logits(x_hat, teacher_mask)
        student_low = vit_forward(server, x_hat, low_mask)
        kl_low = kl_divergence(teacher_low, student_low.logits, weights.tau)
        kl_low_val = kl_low.item()
        loss = T.add(loss, T.scale(kl_low, weights.lambda2))
    if parts is not None:
        parts.update(loss_kd=kd_val, loss_cls_high=ce_val, loss_kl_low=kl_low_val)
    return loss
