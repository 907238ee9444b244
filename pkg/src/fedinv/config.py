"""Experiment configuration tree: strict parsing, profiles, content hashing.

A config file is one JSON object mirroring the dataclass tree below.
Unknown keys anywhere are rejected before any compute. For multi-seed
experiment runs, each stage's RNG seed is derived from the run seed, so a
run is fully determined by (config, seed); the seed fields inside the
sub-configs matter only when a stage is invoked standalone.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .distill import ServerSchedule
from .federation import LocalTrainConfig, PartitionSpec
from .inversion import InversionConfig
from .losses import LossWeights
from .vit import ViTConfig

METHODS = ("fedmitr", "dense_kd", "fedavg")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "toyshapes"      # "toyshapes" | "file"
    path: str | None = None
    num_classes: int = 4
    n_per_class: int = 150
    image_size: int = 16
    channels: int = 1
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("toyshapes", "file"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("dataset kind 'file' needs a path")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "path": self.path,
                "num_classes": self.num_classes, "n_per_class": self.n_per_class,
                "image_size": self.image_size, "channels": self.channels,
                "noise_std": self.noise_std, "seed": self.seed}


@dataclass
class DiagnosticsConfig:
    steps: int = 200
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    noise_batch: int = 256
    mu: float = 1.0
    c: float = 1.0
    t_steps: int = 200
    loss_bound: float = 1.0      # M of the bounded-loss assumption
    delta_conf: float = 0.05

    def to_dict(self) -> dict:
        return {"steps": self.steps, "lr": self.lr, "momentum": self.momentum,
                "weight_decay": self.weight_decay, "noise_batch": self.noise_batch,
                "mu": self.mu, "c": self.c, "t_steps": self.t_steps,
                "loss_bound": self.loss_bound, "delta_conf": self.delta_conf}


def _build(cls, payload: dict, where: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"{where}: expected an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**payload)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class ExperimentConfig:
    method: str = "fedmitr"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out_dir: str = "runs/run"
    workers: int = 1
    weighting: str = "size"      # client weights: "size" (by shard) | "uniform"
    data: DataConfig = field(default_factory=DataConfig)
    vit: ViTConfig = field(default_factory=ViTConfig)
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    local: LocalTrainConfig = field(default_factory=LocalTrainConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    server: ServerSchedule = field(default_factory=ServerSchedule)
    weights: LossWeights = field(default_factory=LossWeights)
    diagnostics: DiagnosticsConfig = field(default_factory=DiagnosticsConfig)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.weighting not in ("size", "uniform"):
            raise ConfigError(f"weighting must be 'size' or 'uniform', got {self.weighting!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.data.image_size != self.vit.image_size or \
           self.data.channels != self.vit.channels:
            raise ConfigError("dataset and model disagree on image size/channels")
        if self.data.kind == "toyshapes" and \
           self.data.num_classes != self.vit.num_classes:
            raise ConfigError("dataset and model disagree on the class count")

    @classmethod
    def from_dict(cls, payload: dict) -> "ExperimentConfig":
        if not isinstance(payload, dict):
            raise ConfigError("config root: expected an object")
        sections = {"data": DataConfig, "vit": ViTConfig,
                    "partition": PartitionSpec, "local": LocalTrainConfig,
                    "inversion": InversionConfig, "server": ServerSchedule,
                    "weights": LossWeights, "diagnostics": DiagnosticsConfig}
        scalar_keys = {"method", "seeds", "out_dir", "workers", "weighting"}
        unknown = sorted(set(payload) - scalar_keys - set(sections))
        if unknown:
            raise ConfigError(f"config root: unknown keys {unknown}")
        kwargs = {k: payload[k] for k in scalar_keys if k in payload}
        for name, sub_cls in sections.items():
            if name in payload:
                kwargs[name] = _build(sub_cls, payload[name], name)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            try:
                payload = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(payload)

    def to_dict(self) -> dict:
        return {
            "method": self.method, "seeds": list(self.seeds),
            "out_dir": self.out_dir, "workers": self.workers,
            "weighting": self.weighting,
            "data": self.data.to_dict(), "vit": self.vit.to_dict(),
            "partition": self.partition.to_dict(), "local": self.local.to_dict(),
            "inversion": self.inversion.to_dict(), "server": self.server.to_dict(),
            "weights": self.weights.to_dict(),
            "diagnostics": self.diagnostics.to_dict(),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def toy_profile(method: str = "fedmitr", seeds: list[int] | None = None,
                out_dir: str = "runs/toy") -> ExperimentConfig:
    """Desk-scale defaults: 4 clients, 16x16 shapes, minutes of CPU."""
    return ExperimentConfig(
        method=method,
        seeds=seeds if seeds is not None else [0, 1, 2],
        out_dir=out_dir,
        data=DataConfig(num_classes=4, n_per_class=300, noise_std=1.0),
        vit=ViTConfig(),
        partition=PartitionSpec(kind="dirichlet", alpha=0.1, n_clients=4),
        local=LocalTrainConfig(lr=0.1, momentum=0.9, weight_decay=1e-3,
                               epochs=15, batch_size=8, grad_clip=1.0),
        inversion=InversionConfig(iterations=40, lr=0.05, mask_ratio=0.3,
                                  batch_size=16),
        server=ServerSchedule(epochs=4, lr=0.02, momentum=0.9,
                              weight_decay=1e-4, batches_per_epoch=40,
                              grad_clip=1.0),
        weights=LossWeights(alpha_tv=1e-3, alpha_l2=1e-4,
                            lambda1=0.25, lambda2=0.25),
    )


def paper_profile(method: str = "fedmitr", seeds: list[int] | None = None,
                  out_dir: str = "runs/paper") -> ExperimentConfig:
    """Published hyperparameters on the toy architecture: 10 clients, 50
    local epochs, 100 inversion iterations, lr 1e-3 everywhere.

    Provided for completeness; the published accuracy numbers additionally
    depend on large pre-trained backbones, which this profile does not use.
    """
    return ExperimentConfig(
        method=method,
        seeds=seeds if seeds is not None else [0, 1, 2],
        out_dir=out_dir,
        data=DataConfig(num_classes=4, n_per_class=300, noise_std=0.3),
        vit=ViTConfig(),
        partition=PartitionSpec(kind="dirichlet", alpha=0.1, n_clients=10),
        local=LocalTrainConfig(lr=1e-3, momentum=0.9, weight_decay=1e-4,
                               epochs=50, batch_size=64),
        inversion=InversionConfig(iterations=100, lr=1e-3, beta1=0.5,
                                  beta2=0.99, mask_ratio=0.3, batch_size=64),
        server=ServerSchedule(epochs=5, lr=1e-3, momentum=0.9,
                              weight_decay=1e-4, batches_per_epoch=20),
        weights=LossWeights(alpha_js=1.0, alpha_tv=1e-4, lambda1=0.5,
                            lambda2=0.5),
    )


PROFILES = {"toy": toy_profile, "paper": paper_profile}
