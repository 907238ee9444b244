"""Server-side loop: alternate inversion epochs with relabel distillation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .federation import Ensemble, LabeledDataset, fedavg_aggregate
from .inversion import (InversionConfig, SyntheticBatch, build_synthetic_pool,
                        child_seed)
from .losses import LossWeights, relabel_loss
from .optim import SGD
from .tensor import backward_pass, no_grad
from .vit import TokenMask, ViTParams, vit_forward


@dataclass
class ServerSchedule:
    epochs: int = 4
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batches_per_epoch: int = 40
    grad_clip: float | None = 1.0
    lr_decay: float = 0.7        # per-epoch multiplier; settles the endpoint
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("need at least one server epoch")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay,
                "batches_per_epoch": self.batches_per_epoch,
                "grad_clip": self.grad_clip, "lr_decay": self.lr_decay,
                "seed": self.seed}


@dataclass
class EpochMetrics:
    epoch: int
    accuracy: float
    loss_kd: float
    loss_cls_high: float
    loss_kl_low: float
    pool_size: int
    seconds: float


@dataclass
class RunMetrics:
    rows: list[EpochMetrics] = field(default_factory=list)

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1].accuracy if self.rows else float("nan")


def evaluate(params: ViTParams, test_set: LabeledDataset) -> float:
    """Fraction of argmax-correct predictions (ties go to the lowest class)."""
    if len(test_set) == 0:
        raise ValueError("empty test set")
    correct = 0
    mask = TokenMask.full(params.config.num_patches)
    with no_grad():
        for img, label in zip(test_set.images, test_set.labels):
            logits = vit_forward(params, img, mask).logits.data
            if int(np.argmax(logits)) == label:
                correct += 1
    return correct / len(test_set)


def server_train(clients: list[ViTParams], init_server: ViTParams,
                 inv_config: InversionConfig, schedule: ServerSchedule,
                 ensemble: Ensemble, weights: LossWeights,
                 test_set: LabeledDataset | None = None,
                 dense: bool = False,
                 loss_rows: list | None = None) -> tuple[ViTParams, RunMetrics]:
    """One-shot server training: grow a synthetic pool, distill from it.

    Each epoch inverts one batch per client against the current server
    snapshot, appends them to the pool, then runs momentum-SGD steps on
    batches sampled uniformly from the whole pool. Client parameters are
    never touched.
    """
    if not clients:
        raise ValueError("need at least one client model")
    frozen_clients = [c.clone(requires_grad=False) for c in clients]
    server = init_server.clone(requires_grad=True)
    opt = SGD(server.values(), lr=schedule.lr, momentum=schedule.momentum,
              weight_decay=schedule.weight_decay, clip_norm=schedule.grad_clip)
    rng = np.random.default_rng(schedule.seed)
    pool: list[SyntheticBatch] = []
    metrics = RunMetrics()

    for epoch in range(schedule.epochs):
        t0 = time.perf_counter()
        opt.lr = schedule.lr * schedule.lr_decay ** epoch
        snapshot = server.clone(requires_grad=False)
        epoch_cfg = InversionConfig(**{**inv_config.to_dict(),
                                       "seed": child_seed(inv_config.seed, epoch)})
        pool.extend(build_synthetic_pool(frozen_clients, snapshot, epoch_cfg,
                                         weights, epoch=epoch, dense=dense,
                                         loss_rows=loss_rows))

        comp_sums = np.zeros(3)
        for _ in range(schedule.batches_per_epoch):
            batch = pool[int(rng.integers(len(pool)))]
            loss = None
            batch_parts = np.zeros(3)
            for img, label, mask in zip(batch.images, batch.labels, batch.masks):
                parts: dict = {}
                term = relabel_loss(server, ensemble, img, int(label), mask,
                                    weights, parts)
                loss = term if loss is None else T.add(loss, term)
                batch_parts += (parts["loss_kd"], parts["loss_cls_high"],
                                parts["loss_kl_low"])
            loss = T.scale(loss, 1.0 / len(batch))
            if not np.isfinite(loss.item()):
                raise RuntimeError(
                    f"non-finite distillation loss at epoch {epoch}")
            backward_pass(loss)
            opt.step()
            opt.zero_grad()
            comp_sums += batch_parts / len(batch)

        acc = evaluate(server, test_set) if test_set is not None else float("nan")
        comp_means = comp_sums / schedule.batches_per_epoch
        metrics.rows.append(EpochMetrics(
            epoch=epoch, accuracy=acc,
            loss_kd=comp_means[0], loss_cls_high=comp_means[1],
            loss_kl_low=comp_means[2], pool_size=len(pool),
            seconds=time.perf_counter() - t0))
    return server, metrics


def run_baseline(kind: str, clients: list[ViTParams],
                 inv_config: InversionConfig, schedule: ServerSchedule,
                 weights: LossWeights, test_set: LabeledDataset | None = None,
                 init_server: ViTParams | None = None,
                 loss_rows: list | None = None,
                 client_weights=None) -> tuple[ViTParams, RunMetrics]:
    """Reference methods: plain parameter averaging, or dense inversion + KD."""
    if kind == "fedavg":
        t0 = time.perf_counter()
        params = fedavg_aggregate(clients, client_weights)
        acc = evaluate(params, test_set) if test_set is not None else float("nan")
        metrics = RunMetrics(rows=[EpochMetrics(
            epoch=0, accuracy=acc, loss_kd=0.0, loss_cls_high=0.0,
            loss_kl_low=0.0, pool_size=0, seconds=time.perf_counter() - t0)])
        return params, metrics
    if kind == "dense_kd":
        kd_weights = LossWeights(**{**weights.to_dict(),
                                    "lambda1": 0.0, "lambda2": 0.0})
        ensemble = Ensemble(members=clients, weights=client_weights)
        init = init_server if init_server is not None \
            else fedavg_aggregate(clients, client_weights)
        return server_train(clients, init, inv_config, schedule, ensemble,
                            kd_weights, test_set, dense=True, loss_rows=loss_rows)
    raise ValueError(f"unknown baseline {kind!r}")
