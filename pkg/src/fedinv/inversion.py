"""Sparse model inversion: synthesize images by gradient descent on pixels.

Inversion starts from Gaussian noise and iterates adaptive-moment updates
on the pixels of active patches only. At scheduled iterations the lowest
cls-attention patches are halted; their pixels keep the values they had at
halt time and receive exactly zero gradient from then on.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .losses import LossWeights, inversion_loss
from .tensor import Tensor, backward_pass, enable_grad
from .vit import TokenMask, ViTConfig, ViTParams, pixel_activity


class InversionError(RuntimeError):
    pass


@dataclass
class InversionConfig:
    iterations: int = 100
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.99
    eps: float = 1e-8
    mask_ratio: float = 0.3
    mask_schedule: list[int] | None = None   # None: one event at iterations // 2
    batch_size: int = 8
    seed: int = 0
    clamp: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must be in [0, 1)")
        if self.mask_schedule is not None:
            bad = [t for t in self.mask_schedule if not 0 <= t < self.iterations]
            if bad:
                raise ValueError(
                    f"mask schedule entries {bad} outside [0, {self.iterations})")

    def resolved_schedule(self) -> list[int]:
        if self.mask_schedule is not None:
            return sorted(self.mask_schedule)
        if self.iterations == 0 or self.mask_ratio == 0.0:
            return []
        return [self.iterations // 2]

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "lr": self.lr,
                "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "mask_ratio": self.mask_ratio, "mask_schedule": self.mask_schedule,
                "batch_size": self.batch_size, "seed": self.seed,
                "clamp": self.clamp}


@dataclass
class SyntheticBatch:
    """Inverted images with their labels, halt masks, and attention scores."""

    images: list[Tensor]
    labels: np.ndarray
    masks: list[TokenMask]
    cls_attention: list[np.ndarray]
    client_id: int = 0
    epoch: int = 0

    def __len__(self):
        return len(self.images)


def init_noise(b: int, config: ViTConfig, seed: int) -> tuple[list[Tensor], np.ndarray]:
    """Standard-normal pixels and uniform labels, deterministic under seed."""
    rng = np.random.default_rng(seed)
    shape = (config.image_size, config.image_size, config.channels)
    images = [Tensor(rng.normal(0.0, 1.0, shape)) for _ in range(b)]
    labels = rng.integers(0, config.num_classes, size=b)
    return images, labels


def compute_mask(a_cls: np.ndarray, current: TokenMask, r: float) -> TokenMask:
    """Halt the floor(r * L) lowest-attention tokens among the active ones.

    Ties break toward the lower token index; tokens are never reactivated,
    and at least one token always stays active.
    """
    a_cls = np.asarray(a_cls, dtype=np.float64)
    n = a_cls.size
    if current.active.size != n:
        raise ValueError(f"attention length {n} vs mask length {current.active.size}")
    n_drop = int(np.floor(r * n))
    if n_drop == 0:
        return current.copy()
    active_idx = np.flatnonzero(current.active)
    if n_drop >= active_idx.size:
        warnings.warn(
            f"mask ratio {r} would halt all {active_idx.size} active tokens; "
            "keeping one")
        n_drop = active_idx.size - 1
    order = np.lexsort((active_idx, a_cls[active_idx]))
    out = current.active.copy()
    out[active_idx[order[:n_drop]]] = False
    return TokenMask(out)


def _invert(local: ViTParams, server: ViTParams, config: InversionConfig,
            weights: LossWeights, schedule: list[int], client_id: int,
            epoch: int, loss_rows: list | None,
            iteration_callback=None, grad_callback=None) -> SyntheticBatch:
    # inversion differentiates pixels only; work on frozen parameter views
    if any(t.requires_grad for t in local.values()):
        local = local.clone(requires_grad=False)
    if any(t.requires_grad for t in server.values()):
        server = server.clone(requires_grad=False)
    cfg = local.config
    b = config.batch_size
    images, labels = init_noise(b, cfg, config.seed)
    pixels = [Tensor(img.data.copy(), requires_grad=True) for img in images]
    masks = [TokenMask.full(cfg.num_patches) for _ in range(b)]
    cls_att = [np.full(cfg.num_patches, 1.0 / cfg.num_patches) for _ in range(b)]
    m_state = [np.zeros_like(p.data) for p in pixels]
    v_state = [np.zeros_like(p.data) for p in pixels]
    schedule_set = set(schedule)
    lo, hi = -config.clamp, config.clamp

    for t in range(config.iterations):
        step = t + 1
        b1corr = 1.0 - config.beta1 ** step
        b2corr = 1.0 - config.beta2 ** step
        sums = np.zeros(4)
        for i in range(b):
            parts: dict = {}
            traces: dict = {}
            with enable_grad():
                loss = inversion_loss(local, server, pixels[i], int(labels[i]),
                                      masks[i], weights, parts, traces)
            if not np.isfinite(loss.item()):
                raise InversionError(
                    f"non-finite inversion loss at iteration {t}, image {i} "
                    f"(client {client_id}, epoch {epoch}): {parts}")
            backward_pass(loss)
            g = pixels[i].grad
            if grad_callback is not None:
                grad_callback(t, i, g, masks[i])
            pixels[i].zero_grad()

            m_state[i] *= config.beta1
            m_state[i] += (1.0 - config.beta1) * g
            v_state[i] *= config.beta2
            v_state[i] += (1.0 - config.beta2) * g * g
            update = (m_state[i] / b1corr) / (np.sqrt(v_state[i] / b2corr) + config.eps)
            active_px = pixel_activity(masks[i], cfg)
            pixels[i].data = np.clip(pixels[i].data - config.lr * update * active_px,
                                     lo, hi)

            cls_att[i] = traces["local"].cls_attention
            if t in schedule_set:
                masks[i] = compute_mask(cls_att[i], masks[i], config.mask_ratio)
            sums += (parts["loss_cls"], parts["loss_js"],
                     parts["loss_tv"], parts["loss_l2"])
        if loss_rows is not None:
            loss_rows.append((t, client_id, epoch, *(sums / b)))
        if iteration_callback is not None:
            iteration_callback(t, pixels, masks)

    return SyntheticBatch(
        images=[Tensor(p.data.copy()) for p in pixels],
        labels=labels, masks=masks, cls_attention=cls_att,
        client_id=client_id, epoch=epoch)


def invert_batch(local: ViTParams, server: ViTParams, config: InversionConfig,
                 weights: LossWeights, client_id: int = 0, epoch: int = 0,
                 loss_rows: list | None = None,
                 iteration_callback=None, grad_callback=None) -> SyntheticBatch:
    """Sparse inversion of one batch against a frozen local/server model pair.

    ``iteration_callback(t, pixels, masks)`` fires after each iteration's
    updates; ``grad_callback(t, i, grad, mask)`` exposes each image's raw
    pixel gradient before the optimizer consumes it.
    """
    return _invert(local, server, config, weights, config.resolved_schedule(),
                   client_id, epoch, loss_rows, iteration_callback, grad_callback)


def dense_invert_batch(local: ViTParams, server: ViTParams, config: InversionConfig,
                       weights: LossWeights, client_id: int = 0, epoch: int = 0,
                       loss_rows: list | None = None,
                       iteration_callback=None, grad_callback=None) -> SyntheticBatch:
    """Dense-baseline inversion: no masking ever, whatever the configured ratio."""
    return _invert(local, server, config, weights, [], client_id, epoch,
                   loss_rows, iteration_callback, grad_callback)


def child_seed(*parts: int) -> int:
    """Deterministic derived seed for (run seed, epoch, client, ...) tuples."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


def build_synthetic_pool(clients: list[ViTParams], server: ViTParams,
                         config: InversionConfig, weights: LossWeights,
                         epoch: int = 0, dense: bool = False,
                         loss_rows: list | None = None) -> list[SyntheticBatch]:
    """One inverted batch per client, all against the same server snapshot."""
    if not clients:
        raise ValueError("need at least one client model")
    invert = dense_invert_batch if dense else invert_batch
    pool = []
    for cid, local in enumerate(clients):
        cfg_i = InversionConfig(**{**config.to_dict(),
                                   "seed": child_seed(config.seed, epoch, cid)})
        pool.append(invert(local, server, cfg_i, weights, client_id=cid,
                           epoch=epoch, loss_rows=loss_rows))
    return pool


# -- pool persistence ---------------------------------------------------------

def save_synthetic_pool(pool: list[SyntheticBatch], directory):
    """Manifest JSON (labels, masks, client ids) plus binary image tensors."""
    import os
    os.makedirs(directory, exist_ok=True)
    manifest = []
    with open(os.path.join(directory, "pool_images.bin"), "wb") as fh:
        for batch in pool:
            for img in batch.images:
                fh.write(T.tensor_to_bytes(img))
            manifest.append({
                "client_id": batch.client_id,
                "epoch": batch.epoch,
                "labels": batch.labels.tolist(),
                "masks": [m.active.astype(int).tolist() for m in batch.masks],
                "cls_attention": [a.tolist() for a in batch.cls_attention],
            })
    with open(os.path.join(directory, "pool_manifest.json"), "w") as fh:
        json.dump(manifest, fh)


def load_synthetic_pool(directory) -> list[SyntheticBatch]:
    import os
    with open(os.path.join(directory, "pool_manifest.json")) as fh:
        manifest = json.load(fh)
    with open(os.path.join(directory, "pool_images.bin"), "rb") as fh:
        buf = fh.read()
    offset = 0
    pool = []
    for entry in manifest:
        images = []
        for _ in entry["labels"]:
            img, offset = T.tensor_from_bytes(buf, offset)
            images.append(img)
        pool.append(SyntheticBatch(
            images=images,
            labels=np.asarray(entry["labels"]),
            masks=[TokenMask(np.asarray(m, dtype=bool)) for m in entry["masks"]],
            cls_attention=[np.asarray(a) for a in entry["cls_attention"]],
            client_id=entry["client_id"], epoch=entry["epoch"]))
    return pool
