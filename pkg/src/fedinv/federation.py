"""Non-IID partitioning, independent client training, and model ensembling."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import SGD
from .tensor import Tensor, backward_pass, no_grad
from .vit import TokenMask, ViTParams, vit_forward

MAX_PARTITION_RETRIES = 16
MAX_PATHOLOGICAL_RETRIES = 64


class PartitionError(RuntimeError):
    pass


@dataclass
class LabeledDataset:
    images: list[Tensor]
    labels: list[int]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"{len(self.images)} images vs {len(self.labels)} labels")
        for y in self.labels:
            if not 0 <= y < self.num_classes:
                raise ValueError(f"label {y} out of range [0, {self.num_classes})")

    def __len__(self):
        return len(self.images)

    def subset(self, indices, split: str | None = None) -> "LabeledDataset":
        return LabeledDataset(
            images=[self.images[i] for i in indices],
            labels=[self.labels[i] for i in indices],
            num_classes=self.num_classes,
            split=split or self.split)


@dataclass
class PartitionSpec:
    kind: str = "dirichlet"          # "dirichlet" | "pathological"
    alpha: float = 0.1               # Dirichlet concentration
    classes_per_client: int = 2      # pathological #C=k
    n_clients: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("dirichlet", "pathological"):
            raise ValueError(f"unknown partition kind {self.kind!r}")
        if self.kind == "dirichlet" and self.alpha <= 0:
            raise ValueError("alpha must be > 0")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha,
                "classes_per_client": self.classes_per_client,
                "n_clients": self.n_clients, "seed": self.seed}


@dataclass
class ClientShard:
    client_id: int
    indices: np.ndarray
    dataset: LabeledDataset

    def __len__(self):
        return len(self.indices)


def _shards_from_assignment(dataset, per_client: list[list[int]]) -> list[ClientShard]:
    return [ClientShard(cid, np.asarray(sorted(idx), dtype=np.int64),
                        dataset.subset(sorted(idx)))
            for cid, idx in enumerate(per_client)]


def _largest_remainder(proportions: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total``; ties go to the lower index."""
    raw = proportions * total
    base = np.floor(raw).astype(np.int64)
    short = total - int(base.sum())
    if short > 0:
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_partition(dataset: LabeledDataset, spec: PartitionSpec) -> list[ClientShard]:
    """Per class, allocate sample proportions drawn from Dir(alpha).

    Shards are disjoint and exhaustive; draws are retried (bounded) if any
    client would end up with no samples at all.
    """
    if spec.kind != "dirichlet":
        raise ValueError(f"spec kind is {spec.kind!r}, expected 'dirichlet'")
    rng = np.random.default_rng(spec.seed)
    labels = np.asarray(dataset.labels)
    by_class = [np.flatnonzero(labels == c) for c in range(dataset.num_classes)]

    for _ in range(MAX_PARTITION_RETRIES):
        per_client: list[list[int]] = [[] for _ in range(spec.n_clients)]
        for idx in by_class:
            if idx.size == 0:
                continue
            order = rng.permutation(idx)
            props = rng.dirichlet(np.full(spec.n_clients, spec.alpha))
            counts = _largest_remainder(props, idx.size)
            start = 0
            for cid, cnt in enumerate(counts):
                per_client[cid].extend(order[start:start + cnt].tolist())
                start += cnt
        if all(len(s) >= 1 for s in per_client):
            return _shards_from_assignment(dataset, per_client)
    raise PartitionError(
        f"could not give every one of {spec.n_clients} clients a sample in "
        f"{MAX_PARTITION_RETRIES} Dirichlet draws (alpha={spec.alpha})")


def pathological_partition(dataset: LabeledDataset, spec: PartitionSpec) -> list[ClientShard]:
    """Each client holds data from exactly k random classes.

    A class owned by several clients is split evenly among them; draws are
    retried (bounded) until every class has at least one owner.
    """
    if spec.kind != "pathological":
        raise ValueError(f"spec kind is {spec.kind!r}, expected 'pathological'")
    k, kk = spec.classes_per_client, dataset.num_classes
    if k > kk:
        raise ValueError(f"classes_per_client {k} exceeds {kk} classes")
    rng = np.random.default_rng(spec.seed)
    labels = np.asarray(dataset.labels)

    for _ in range(MAX_PATHOLOGICAL_RETRIES):
        owned = [rng.choice(kk, size=k, replace=False) for _ in range(spec.n_clients)]
        owners: list[list[int]] = [[] for _ in range(kk)]
        for cid, classes in enumerate(owned):
            for c in classes:
                owners[c].append(cid)
        if any(len(o) == 0 for o in owners):
            continue
        per_client: list[list[int]] = [[] for _ in range(spec.n_clients)]
        for c in range(kk):
            idx = rng.permutation(np.flatnonzero(labels == c))
            for cid, chunk in zip(owners[c], np.array_split(idx, len(owners[c]))):
                per_client[cid].extend(chunk.tolist())
        if all(len(s) >= 1 for s in per_client):
            return _shards_from_assignment(dataset, per_client)
    raise PartitionError(
        f"no class-ownership draw covered all {kk} classes within "
        f"{MAX_PATHOLOGICAL_RETRIES} retries (k={k}, n_clients={spec.n_clients})")


def partition(dataset: LabeledDataset, spec: PartitionSpec) -> list[ClientShard]:
    if spec.kind == "dirichlet":
        return dirichlet_partition(dataset, spec)
    return pathological_partition(dataset, spec)


def save_shard_manifest(shards: list[ClientShard], path):
    manifest = {str(s.client_id): s.indices.tolist() for s in shards}
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True)


def shards_from_manifest(dataset: LabeledDataset, path) -> list[ClientShard]:
    with open(path) as fh:
        manifest = json.load(fh)
    return [ClientShard(int(cid), np.asarray(idx, dtype=np.int64), dataset.subset(idx))
            for cid, idx in sorted(manifest.items(), key=lambda kv: int(kv[0]))]


# -- local client training ----------------------------------------------------


@dataclass
class LocalTrainConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-3
    epochs: int = 15
    batch_size: int = 8
    grad_clip: float | None = 1.0

    def to_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "epochs": self.epochs,
                "batch_size": self.batch_size, "grad_clip": self.grad_clip}


def local_train(shard: ClientShard, init: ViTParams, hp: LocalTrainConfig,
                seed: int = 0, epoch_losses: list | None = None) -> ViTParams:
    """Minimize cross-entropy on one client's shard with momentum SGD.

    The initial parameters are never mutated; the trained copy is returned.
    ``epoch_losses``, if given, receives the mean training loss per epoch.
    """
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} shard is empty")
    batch_size = hp.batch_size
    if batch_size > len(shard):
        warnings.warn(
            f"batch_size {batch_size} > shard size {len(shard)}; clamping")
        batch_size = len(shard)

    params = init.clone(requires_grad=True)
    opt = SGD(params.values(), lr=hp.lr, momentum=hp.momentum,
              weight_decay=hp.weight_decay, clip_norm=hp.grad_clip)
    rng = np.random.default_rng(seed)
    images, labels = shard.dataset.images, shard.dataset.labels
    mask = TokenMask.full(init.config.num_patches)

    for _ in range(hp.epochs):
        order = rng.permutation(len(shard))
        running = 0.0
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            losses = [T.cross_entropy_logits(
                vit_forward(params, images[i], mask).logits, labels[i])
                for i in batch]
            loss = losses[0]
            for extra in losses[1:]:
                loss = T.add(loss, extra)
            loss = T.scale(loss, 1.0 / len(batch))
            running += loss.item() * len(batch)
            backward_pass(loss)
            opt.step()
            opt.zero_grad()
        if epoch_losses is not None:
            epoch_losses.append(running / len(order))
    return params


# -- ensembling ----------------------------------------------------------------


@dataclass
class Ensemble:
    """Client models acting as a joint logit-averaging teacher."""

    members: list[ViTParams]
    weights: np.ndarray | None = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if self.weights is None:
            self.weights = np.full(len(self.members), 1.0 / len(self.members))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.members),):
            raise ValueError("one weight per member required")
        if (self.weights < 0).any() or abs(self.weights.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")

    def logits(self, x: Tensor, mask: TokenMask | None = None) -> Tensor:
        """Weighted sum of member logits; always detached from any graph."""
        with no_grad():
            out = None
            for w, member in zip(self.weights, self.members):
                lg = vit_forward(member, x, mask).logits.data
                out = w * lg if out is None else out + w * lg
        return Tensor(out)


def ensemble_logits(ensemble: Ensemble, x: Tensor, mask: TokenMask | None = None) -> Tensor:
    return ensemble.logits(x, mask)


def fedavg_aggregate(members: list[ViTParams], weights=None) -> ViTParams:
    """Per-tensor weighted average of client parameters."""
    if not members:
        raise ValueError("nothing to aggregate")
    if weights is None:
        weights = np.full(len(members), 1.0 / len(members))
    weights = np.asarray(weights, dtype=np.float64)
    first = members[0]
    out: dict[str, Tensor] = {}
    for name in first.names():
        ref_shape = first[name].data.shape
        for m in members:
            if m[name].data.shape != ref_shape:
                raise ValueError(
                    f"shape mismatch for {name}: {m[name].data.shape} vs {ref_shape}")
        out[name] = Tensor(sum(w * m[name].data for w, m in zip(weights, members)))
    return ViTParams(first.config, out)
