"""Numerical stability diagnostics: value-projection gradient norms,
hard-vs-soft error signals, and closed-form stability/generalization bounds.

The value-projection gradient of a layer factors as X^T A^T delta (input
states, attention map, output error signal), so per-token contributions can
be split exactly into foreground (active) and background (masked) parts and
cross-checked against the autodiff gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .federation import Ensemble
from .inversion import InversionConfig, build_synthetic_pool
from .losses import LossWeights, cross_entropy, kl_divergence
from .optim import SGD
from .tensor import Tensor, backward_pass, no_grad
from .vit import ForwardTrace, TokenMask, ViTParams, vit_forward


# -- exact gradient decomposition ---------------------------------------------


@dataclass
class ValueGradStats:
    """Per-layer Frobenius norms of the value-projection gradient.

    ``explicit`` is rebuilt from X^T A^T delta per head; ``residual`` is the
    relative mismatch between that product and the autodiff gradient.
    """

    autodiff: np.ndarray          # (layers,)
    explicit: np.ndarray          # (layers,)
    foreground: np.ndarray        # (layers,)
    background: np.ndarray        # (layers,)
    residual: float

    @property
    def total(self) -> float:
        return float(np.sqrt((self.autodiff ** 2).sum()))

    @property
    def background_total(self) -> float:
        return float(np.sqrt((self.background ** 2).sum()))

    @property
    def foreground_total(self) -> float:
        return float(np.sqrt((self.foreground ** 2).sum()))


def value_grad_decomposition(traces: list[ForwardTrace], params: ViTParams,
                             check_autodiff: bool = True,
                             split_masks: list[TokenMask] | None = None
                             ) -> ValueGradStats:
    """Split each layer's W_V gradient into foreground/background token parts.

    Requires traces from ``vit_forward(..., capture_value_grads=True)`` after
    a ``backward_pass``; contributions from all traces are summed, matching
    how autodiff accumulated the parameter gradient. The foreground set
    defaults to each trace's own forward mask; pass ``split_masks`` (one per
    trace) to split by a different ground truth, e.g. the inversion-time
    halt mask of each synthetic image. With ``check_autodiff`` off, only the
    explicit products are formed (for per-term splits that do not cover the
    whole parameter gradient).
    """
    cfg = params.config
    hd = cfg.head_dim
    layers = cfg.num_layers
    totals = [np.zeros((cfg.embed_dim, cfg.embed_dim)) for _ in range(layers)]
    fgs = [np.zeros_like(totals[0]) for _ in range(layers)]
    bgs = [np.zeros_like(totals[0]) for _ in range(layers)]

    if split_masks is not None and len(split_masks) != len(traces):
        raise ValueError("need one split mask per trace")
    for idx, trace in enumerate(traces):
        if trace.head_outputs is None:
            raise ValueError("trace was not captured with capture_value_grads")
        split = split_masks[idx] if split_masks is not None else trace.mask
        act = split.with_cls().astype(np.float64)[:, None]
        for layer in range(layers):
            x = trace.token_states[layer]
            x_fg = x * act
            x_bg = x * (1.0 - act)
            for h in range(cfg.num_heads):
                delta = trace.head_outputs[layer][h].grad
                if delta is None:
                    continue
                back = trace.attention[layer][h].T @ delta
                sl = slice(h * hd, (h + 1) * hd)
                totals[layer][:, sl] += x.T @ back
                fgs[layer][:, sl] += x_fg.T @ back
                bgs[layer][:, sl] += x_bg.T @ back

    auto_norms, exp_norms, fg_norms, bg_norms = [], [], [], []
    residual = 0.0
    for layer in range(layers):
        exp_norms.append(np.linalg.norm(totals[layer]))
        fg_norms.append(np.linalg.norm(fgs[layer]))
        bg_norms.append(np.linalg.norm(bgs[layer]))
        if check_autodiff:
            grad = params[f"layers.{layer}.wv"].grad
            if grad is None:
                grad = np.zeros_like(totals[layer])
            auto_norms.append(np.linalg.norm(grad))
            diff = np.linalg.norm(totals[layer] - grad)
            residual = max(residual, diff / max(np.linalg.norm(grad), 1e-12))
        else:
            auto_norms.append(exp_norms[-1])
    return ValueGradStats(
        autodiff=np.asarray(auto_norms), explicit=np.asarray(exp_norms),
        foreground=np.asarray(fg_norms), background=np.asarray(bg_norms),
        residual=residual)


def value_grad_norm(params: ViTParams, x: Tensor, mask: TokenMask,
                    loss_kind: str, label: int | None = None,
                    ensemble: Ensemble | None = None,
                    tau: float = 1.0) -> ValueGradStats:
    """Layer-wise ||grad W_V||_F for a hard or soft loss on one input.

    ``loss_kind`` is ``hard_ce`` (cross-entropy against ``label``) or
    ``soft_kl_vs_ensemble`` (KL against the detached ensemble teacher).
    The returned stats carry the explicit X^T A^T delta cross-check.
    """
    work = params.clone(requires_grad=True)
    trace = vit_forward(work, x, mask, capture_value_grads=True)
    if loss_kind == "hard_ce":
        if label is None:
            raise ValueError("hard_ce needs a label")
        loss = cross_entropy(trace.logits, label)
    elif loss_kind == "soft_kl_vs_ensemble":
        if ensemble is None:
            raise ValueError("soft_kl_vs_ensemble needs an ensemble")
        teacher = ensemble.logits(x, mask)
        loss = kl_divergence(teacher, trace.logits, tau)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    if loss.graph is not None:
        backward_pass(loss)
    return value_grad_decomposition([trace], work)


# -- error signals -------------------------------------------------------------


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def error_signal_norms(server: ViTParams, ensemble: Ensemble,
                       images: list[Tensor], labels: np.ndarray
                       ) -> tuple[float, float]:
    """Batch means of ||p - onehot(y)||^2 and ||p - q_ensemble||^2.

    ``p`` is the server's softmax prediction; the soft target ``q`` is the
    ensemble's softmax on the same input.
    """
    k = server.config.num_classes
    mask = TokenMask.full(server.config.num_patches)
    hard, soft = [], []
    with no_grad():
        for img, y in zip(images, labels):
            p = _softmax_np(vit_forward(server, img, mask).logits.data)
            onehot = np.zeros(k)
            onehot[int(y)] = 1.0
            q = _softmax_np(ensemble.logits(img, mask).data)
            hard.append(float(((p - onehot) ** 2).sum()))
            soft.append(float(((p - q) ** 2).sum()))
    return float(np.mean(hard)), float(np.mean(soft))


# -- closed-form bounds ---------------------------------------------------------


def sgd_stability_bound(L: float, mu: float, c: float, T: int, N: int) -> float:
    """Uniform-stability bound for T SGD steps with step sizes <= c/t.

    beta = (1 + 1/(mu c)) / (N - 1) * (2 c L^2)^(1/(mu c + 1)) * T^(mu c/(mu c + 1))
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    if mu <= 0 or c <= 0 or T <= 0:
        raise ValueError("mu, c, T must be > 0")
    if N < 2:
        raise ValueError("N must be >= 2")
    mc = mu * c
    expo = 1.0 / (mc + 1.0)
    return ((1.0 + 1.0 / mc) / (N - 1)
            * (2.0 * c * L * L) ** expo
            * T ** (mc * expo))


def generalization_bound(r_emp: float, beta: float, M: float, N: int,
                         delta_conf: float) -> float:
    """High-probability risk bound from uniform stability.

    bound = R_emp + 2 beta + (4 N beta + M) sqrt(ln(1/delta) / (2 N))
    """
    if not 0.0 <= r_emp <= M:
        raise ValueError(f"empirical risk {r_emp} outside [0, {M}]")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    if not 0.0 < delta_conf < 1.0:
        raise ValueError("delta_conf must be in (0, 1)")
    if N < 1:
        raise ValueError("N must be >= 1")
    return r_emp + 2.0 * beta + (4.0 * N * beta + M) * math.sqrt(
        math.log(1.0 / delta_conf) / (2.0 * N))


@dataclass
class StabilityReport:
    """Closed-form stability and generalization numbers, inputs echoed.

    ``N`` is the training sample count (not the client count).
    """

    L: float
    mu: float
    c: float
    T: int
    N: int
    M: float
    delta_conf: float
    r_emp: float
    beta: float = 0.0
    bound: float = 0.0

    @classmethod
    def compute(cls, L, mu, c, T, N, M=1.0, delta_conf=0.05, r_emp=0.0):
        beta = sgd_stability_bound(L, mu, c, T, N)
        bound = generalization_bound(r_emp, beta, M, N, delta_conf)
        return cls(L=L, mu=mu, c=c, T=T, N=N, M=M, delta_conf=delta_conf,
                   r_emp=r_emp, beta=beta, bound=bound)

    def to_dict(self) -> dict:
        return {"L": self.L, "mu": self.mu, "c": self.c, "T": self.T,
                "N": self.N, "M": self.M, "delta_conf": self.delta_conf,
                "r_emp": self.r_emp, "beta": self.beta, "bound": self.bound}


# -- matched dense vs sparse distillation runs ----------------------------------


@dataclass
class StepNorms:
    step: int
    norm_dense: float
    norm_fed: float
    bg_dense: float
    bg_fed: float
    bg_fed_masked_term: float   # background share of the masked hard-label term


@dataclass
class GradNormReport:
    """Per-step value-gradient norms for matched dense and sparse losses."""

    steps: list[StepNorms] = field(default_factory=list)

    @property
    def sup_dense(self) -> float:
        return max(s.norm_dense for s in self.steps)

    @property
    def sup_fed(self) -> float:
        return max(s.norm_fed for s in self.steps)

    def csv_rows(self, seed: int) -> list[tuple]:
        return [(seed, s.step, s.norm_dense, s.norm_fed, s.bg_dense, s.bg_fed)
                for s in self.steps]


def lipschitz_comparison(clients: list[ViTParams], server: ViTParams,
                         ensemble: Ensemble, inv_config: InversionConfig,
                         weights: LossWeights, steps: int = 200,
                         lr: float = 0.05, momentum: float = 0.9,
                         weight_decay: float = 1e-4,
                         clip_norm: float | None = 1.0, seed: int = 0
                         ) -> GradNormReport:
    """Run matched dense and sparse distillation on one synthetic pool.

    Both trajectories see the same batches. The dense path trains on the
    hard label over all tokens; the sparse path trains on the hard label
    over active tokens plus the ensemble-relabel term on halted tokens.
    Per step we record the value-projection gradient norm and its exact
    background-token share; the running maxima estimate the two gradient
    Lipschitz constants.
    """
    frozen = [c.clone(requires_grad=False) for c in clients]
    pool = build_synthetic_pool(frozen, server.clone(requires_grad=False),
                                inv_config, weights)
    theta_d = server.clone(requires_grad=True)
    theta_f = server.clone(requires_grad=True)
    opt_d = SGD(theta_d.values(), lr=lr, momentum=momentum,
                weight_decay=weight_decay, clip_norm=clip_norm)
    opt_f = SGD(theta_f.values(), lr=lr, momentum=momentum,
                weight_decay=weight_decay, clip_norm=clip_norm)
    rng = np.random.default_rng(seed)
    full = TokenMask.full(server.config.num_patches)
    report = GradNormReport()

    for step in range(steps):
        batch = pool[int(rng.integers(len(pool)))]

        # dense: hard label, every token active; fg/bg split still follows
        # each image's inversion-time halt mask
        traces_d = []
        loss_d = None
        for img, y in zip(batch.images, batch.labels):
            tr = vit_forward(theta_d, img, full, capture_value_grads=True)
            traces_d.append(tr)
            term = cross_entropy(tr.logits, int(y))
            loss_d = term if loss_d is None else T.add(loss_d, term)
        backward_pass(T.scale(loss_d, 1.0 / len(batch)))
        dec_d = value_grad_decomposition(traces_d, theta_d,
                                         split_masks=list(batch.masks))
        opt_d.step()
        opt_d.zero_grad()

        # sparse: hard label on active tokens + relabel KL on halted tokens
        traces_cls, traces_kl = [], []
        split_cls, split_kl = [], []
        loss_f = None
        for img, y, mask in zip(batch.images, batch.labels, batch.masks):
            tr = vit_forward(theta_f, img, mask, capture_value_grads=True)
            traces_cls.append(tr)
            split_cls.append(mask)
            term = cross_entropy(tr.logits, int(y))
            low = ~mask.active
            if weights.lambda2 != 0.0 and low.any():
                low_mask = TokenMask(low)
                teacher_mask = full if weights.relabel_teacher_full else low_mask
                teacher = ensemble.logits(img, teacher_mask)
                tr_low = vit_forward(theta_f, img, low_mask, capture_value_grads=True)
                traces_kl.append(tr_low)
                split_kl.append(mask)
                term = T.add(term, T.scale(
                    kl_divergence(teacher, tr_low.logits, weights.tau),
                    weights.lambda2))
            loss_f = term if loss_f is None else T.add(loss_f, term)
        backward_pass(T.scale(loss_f, 1.0 / len(batch)))
        dec_f = value_grad_decomposition(traces_cls + traces_kl, theta_f,
                                         split_masks=split_cls + split_kl)
        dec_f_cls = value_grad_decomposition(traces_cls, theta_f,
                                             check_autodiff=False,
                                             split_masks=split_cls)
        opt_f.step()
        opt_f.zero_grad()

        report.steps.append(StepNorms(
            step=step,
            norm_dense=dec_d.total, norm_fed=dec_f.total,
            bg_dense=dec_d.background_total, bg_fed=dec_f.background_total,
            bg_fed_masked_term=dec_f_cls.background_total))
    return report
