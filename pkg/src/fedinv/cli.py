"""Experiment orchestration and the ``simulator`` command-line surface.

Every run directory is self-describing: it holds a canonical copy of the
config, its content hash, shard manifests, checkpoints, and metrics. All
randomness is derived from (config, seed), so re-running a subcommand with
the same inputs reproduces the deterministic artifacts byte for byte; wall
times go to a separate timings file for that reason.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, PROFILES
from .datasets import generate_toyshapes, load_dataset, save_dataset
from .diagnostics import (StabilityReport, error_signal_norms,
                          lipschitz_comparison, sgd_stability_bound)
from .distill import (RunMetrics, ServerSchedule, evaluate, run_baseline,
                      server_train)
from .federation import (ClientShard, Ensemble, LabeledDataset, LocalTrainConfig,
                         PartitionSpec, dirichlet_partition, fedavg_aggregate,
                         local_train, partition, save_shard_manifest,
                         shards_from_manifest)
from .inversion import InversionConfig, child_seed, init_noise
from .vit import ViTParams, load_checkpoint, params_to_bytes, save_checkpoint

# stage tags for deriving per-stage seeds from a run seed
_STAGE_PARTITION, _STAGE_CLIENT, _STAGE_INVERSION, _STAGE_SERVER = 1, 2, 3, 4


def _fmt(x) -> str:
    """Shortest round-trip decimal form; stable across runs for determinism."""
    if isinstance(x, float):
        return repr(float(x))
    return str(x)


def load_data(config: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = config.data
    if d.kind == "toyshapes":
        return generate_toyshapes(d.num_classes, d.n_per_class, d.image_size,
                                  d.noise_std, d.seed, config.vit.patch_size,
                                  d.channels)
    full = load_dataset(d.path, split="train")
    n_test = max(1, len(full) // 5)
    idx = np.arange(len(full))
    return full.subset(idx[n_test:], "train"), full.subset(idx[:n_test], "test")


def _train_clients(shards: list[ClientShard], init: ViTParams,
                   hp: LocalTrainConfig, run_seed: int,
                   workers: int) -> list[ViTParams]:
    seeds = [child_seed(run_seed, _STAGE_CLIENT, s.client_id) for s in shards]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(local_train, sh, init, hp, sd)
                       for sh, sd in zip(shards, seeds)]
            return [f.result() for f in futures]
    return [local_train(sh, init, hp, sd) for sh, sd in zip(shards, seeds)]


def _client_weights(config: ExperimentConfig, shards) -> np.ndarray:
    if config.weighting == "uniform":
        return np.full(len(shards), 1.0 / len(shards))
    sizes = np.array([len(s) for s in shards], dtype=np.float64)
    return sizes / sizes.sum()


def _effective_workers(config: ExperimentConfig, override: int | None) -> int:
    if override is not None:
        return override
    env = os.environ.get("SIM_WORKERS")
    if env:
        return int(env)
    return config.workers


def _write_config_copy(config: ExperimentConfig, out: Path):
    (out / "config.json").write_text(config.canonical_json() + "\n")
    (out / "config.sha256").write_text(config.content_hash() + "\n")


def _write_metrics_csv(path: Path, metrics: RunMetrics):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "acc", "loss_kd", "loss_cls_high",
                         "loss_kl_low", "pool_size"])
        for row in metrics.rows:
            writer.writerow([row.epoch, _fmt(row.accuracy), _fmt(row.loss_kd),
                             _fmt(row.loss_cls_high), _fmt(row.loss_kl_low),
                             row.pool_size])


def _write_timings_csv(path: Path, metrics: RunMetrics):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "seconds"])
        for row in metrics.rows:
            writer.writerow([row.epoch, _fmt(row.seconds)])


def _write_inversion_csv(path: Path, loss_rows: list):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "batch", "loss_cls", "loss_js",
                         "loss_tv", "loss_l2"])
        for (it, client, epoch, cls, js, tv, l2) in loss_rows:
            writer.writerow([it, f"e{epoch}c{client}", _fmt(cls), _fmt(js),
                             _fmt(tv), _fmt(l2)])


def run_single_seed(config: ExperimentConfig, seed: int, seed_dir: Path,
                    data: tuple[LabeledDataset, LabeledDataset],
                    workers: int) -> dict:
    """Partition, train clients, run the configured server method, evaluate."""
    train, test = data
    seed_dir.mkdir(parents=True, exist_ok=True)
    t_start = time.perf_counter()

    part = PartitionSpec(**{**config.partition.to_dict(),
                            "seed": child_seed(seed, _STAGE_PARTITION)})
    shards = partition(train, part)
    save_shard_manifest(shards, seed_dir / "shards.json")

    init = ViTParams.init(config.vit, seed=child_seed(seed, _STAGE_CLIENT, 10**6))
    clients = _train_clients(shards, init, config.local, seed, workers)
    upload_bytes = 0
    for shard, params in zip(shards, clients):
        blob = params_to_bytes(params)
        upload_bytes += len(blob)
        (seed_dir / f"client{shard.client_id}.ckpt").write_bytes(blob)
    client_weights = _client_weights(config, shards)

    inv = InversionConfig(**{**config.inversion.to_dict(),
                             "seed": child_seed(seed, _STAGE_INVERSION)})
    sched = ServerSchedule(**{**config.server.to_dict(),
                              "seed": child_seed(seed, _STAGE_SERVER)})
    loss_rows: list = []

    server_init = fedavg_aggregate(clients, client_weights)
    if config.method in ("fedavg", "dense_kd"):
        server, metrics = run_baseline(config.method, clients, inv, sched,
                                       config.weights, test_set=test,
                                       init_server=server_init,
                                       loss_rows=loss_rows,
                                       client_weights=client_weights)
    else:
        ensemble = Ensemble(members=clients, weights=client_weights)
        server, metrics = server_train(clients, server_init, inv, sched,
                                       ensemble, config.weights, test_set=test,
                                       loss_rows=loss_rows)

    save_checkpoint(server, seed_dir / "server.ckpt")
    _write_metrics_csv(seed_dir / "metrics.csv", metrics)
    _write_timings_csv(seed_dir / "timings.csv", metrics)
    if loss_rows:
        _write_inversion_csv(seed_dir / "inversion_losses.csv", loss_rows)

    return {
        "seed": seed,
        "accuracy": metrics.final_accuracy,
        "epochs": len(metrics.rows),
        "n_clients": len(clients),
        "upload_bytes": upload_bytes,
        "checkpoint_bytes": upload_bytes // len(clients),
        "seconds": time.perf_counter() - t_start,
    }


def run_experiment(config: ExperimentConfig, out_dir=None,
                   workers: int | None = None) -> dict:
    """Full multi-seed experiment; returns the summary dict it also writes."""
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_copy(config, out)
    data = load_data(config)
    workers = _effective_workers(config, workers)

    per_seed = [run_single_seed(config, seed, out / f"seed{seed}", data, workers)
                for seed in config.seeds]

    accs = np.array([r["accuracy"] for r in per_seed])
    summary = {
        "method": config.method,
        "config_hash": config.content_hash(),
        "seeds": list(config.seeds),
        "per_seed": per_seed,
        "accuracy_mean": float(accs.mean()),
        "accuracy_std": float(accs.std(ddof=1)) if len(accs) > 1 else 0.0,
        "communication": {
            "rounds": 1,            # one-shot: a single client upload, ever
            "one_shot": True,
            "n_clients": per_seed[0]["n_clients"],
            "checkpoint_bytes": per_seed[0]["checkpoint_bytes"],
            "upload_bytes_total": per_seed[0]["upload_bytes"],
        },
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def run_diagnostics(config: ExperimentConfig, out_dir=None,
                    checkpoint_dir=None, workers: int | None = None) -> dict:
    """Gradient-norm comparison, error-signal norms, and closed-form bounds."""
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_config_copy(config, out)
    train, test = load_data(config)
    workers = _effective_workers(config, workers)
    diag = config.diagnostics

    rows = []
    per_seed = []
    for seed in config.seeds:
        part = PartitionSpec(**{**config.partition.to_dict(),
                                "seed": child_seed(seed, _STAGE_PARTITION)})
        shards = partition(train, part)
        ckpts = None
        if checkpoint_dir is not None:
            cdir = Path(checkpoint_dir) / f"seed{seed}"
            paths = sorted(cdir.glob("client*.ckpt"))
            if paths:
                ckpts = [load_checkpoint(p) for p in paths]
        if ckpts is None:
            init = ViTParams.init(config.vit,
                                  seed=child_seed(seed, _STAGE_CLIENT, 10**6))
            ckpts = _train_clients(shards, init, config.local, seed, workers)
        weights_vec = _client_weights(config, shards)
        ensemble = Ensemble(members=ckpts, weights=weights_vec)
        server = fedavg_aggregate(ckpts, weights_vec)

        noise, labels = init_noise(diag.noise_batch, config.vit,
                                   child_seed(seed, _STAGE_INVERSION, 7))
        hard, soft = error_signal_norms(server, ensemble, noise, labels)

        inv = InversionConfig(**{**config.inversion.to_dict(),
                                 "seed": child_seed(seed, _STAGE_INVERSION)})
        report = lipschitz_comparison(
            ckpts, server, ensemble, inv, config.weights, steps=diag.steps,
            lr=diag.lr, momentum=diag.momentum, weight_decay=diag.weight_decay,
            clip_norm=config.server.grad_clip,
            seed=child_seed(seed, _STAGE_SERVER))
        rows.extend(report.csv_rows(seed))

        n_samples = len(train)
        bounds = {
            "dense": StabilityReport.compute(
                L=report.sup_dense, mu=diag.mu, c=diag.c, T=diag.t_steps,
                N=n_samples, M=diag.loss_bound,
                delta_conf=diag.delta_conf).to_dict(),
            "fed": StabilityReport.compute(
                L=report.sup_fed, mu=diag.mu, c=diag.c, T=diag.t_steps,
                N=n_samples, M=diag.loss_bound,
                delta_conf=diag.delta_conf).to_dict(),
        }
        per_seed.append({
            "seed": seed,
            "sup_dense": report.sup_dense,
            "sup_fed": report.sup_fed,
            "fed_below_dense": bool(report.sup_fed < report.sup_dense),
            "error_sq_hard": hard,
            "error_sq_soft": soft,
            "bounds": bounds,
        })

    with open(out / "diagnostics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "step", "norm_dense", "norm_fed",
                         "bg_dense", "bg_fed"])
        for r in rows:
            writer.writerow([r[0], r[1]] + [_fmt(v) for v in r[2:]])

    majority = sum(r["fed_below_dense"] for r in per_seed)
    result = {
        "config_hash": config.content_hash(),
        "seeds": list(config.seeds),
        "per_seed": per_seed,
        "fed_below_dense_count": majority,
        "beta_at_zero_lipschitz": sgd_stability_bound(
            0.0, config.diagnostics.mu, config.diagnostics.c,
            config.diagnostics.t_steps, max(2, len(train))),
    }
    with open(out / "bounds.json", "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
    return result


# -- argparse surface -----------------------------------------------------------


def _add_common(sub):
    sub.add_argument("--config", required=False,
                     help="JSON config file (defaults to the toy profile)")
    sub.add_argument("--profile", choices=sorted(PROFILES),
                     help="named built-in profile when no --config is given")
    sub.add_argument("--seed", type=int, default=None,
                     help="override: run only this single seed")
    sub.add_argument("--out", default=None, help="output directory/file")
    sub.add_argument("--workers", type=int, default=None,
                     help="parallel client-training workers (SIM_WORKERS fallback)")


def _load_config(args) -> ExperimentConfig:
    if args.config:
        config = ExperimentConfig.from_file(args.config)
    else:
        config = PROFILES[args.profile or "toy"]()
    if args.seed is not None:
        config.seeds = [args.seed]
    return config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="simulator",
        description="One-shot federated learning simulator (sparse ViT "
                    "inversion + token-relabel distillation)")
    subs = parser.add_subparsers(dest="command", required=True)
    for name, desc in [
            ("gen-data", "generate the toy dataset and write it to disk"),
            ("partition", "write a non-IID shard manifest"),
            ("train-clients", "train all client models, save checkpoints"),
            ("run", "full experiment: partition, train, server phase, eval"),
            ("diagnose", "gradient-norm comparison and stability bounds"),
            ("eval", "evaluate a checkpoint on the test split")]:
        sub = subs.add_parser(name, help=desc)
        _add_common(sub)
        if name == "partition":
            sub.add_argument("--data", default=None, help="dataset file to split")
        if name == "train-clients":
            sub.add_argument("--data", default=None)
            sub.add_argument("--shards", default=None, help="shard manifest JSON")
        if name == "eval":
            sub.add_argument("--checkpoint", required=True)
            sub.add_argument("--data", default=None)
    args = parser.parse_args(argv)

    try:
        config = _load_config(args)
        return _dispatch(args, config)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args, config: ExperimentConfig) -> int:
    cmd = args.command
    if cmd == "gen-data":
        out = args.out or "dataset.bin"
        train, test = load_data(config)
        save_dataset(train, out)
        test_path = str(out) + ".test"
        save_dataset(test, test_path)
        print(f"wrote {len(train)} train records to {out}, "
              f"{len(test)} test records to {test_path}")
        return 0

    if cmd == "partition":
        if args.data:
            train = load_dataset(args.data)
        else:
            train, _ = load_data(config)
        seed = args.seed if args.seed is not None else config.partition.seed
        spec = PartitionSpec(**{**config.partition.to_dict(), "seed": seed})
        shards = partition(train, spec)
        out = args.out or "shards.json"
        save_shard_manifest(shards, out)
        sizes = {s.client_id: len(s) for s in shards}
        print(f"wrote {out}: shard sizes {sizes}")
        return 0

    if cmd == "train-clients":
        if args.data:
            train = load_dataset(args.data)
        else:
            train, _ = load_data(config)
        seed = args.seed if args.seed is not None else config.seeds[0]
        if args.shards:
            shards = shards_from_manifest(train, args.shards)
        else:
            spec = PartitionSpec(**{**config.partition.to_dict(),
                                    "seed": child_seed(seed, _STAGE_PARTITION)})
            shards = partition(train, spec)
        out = Path(args.out or "checkpoints")
        out.mkdir(parents=True, exist_ok=True)
        init = ViTParams.init(config.vit, seed=child_seed(seed, _STAGE_CLIENT, 10**6))
        workers = _effective_workers(config, args.workers)
        clients = _train_clients(shards, init, config.local, seed, workers)
        for shard, params in zip(shards, clients):
            save_checkpoint(params, out / f"client{shard.client_id}.ckpt")
        print(f"wrote {len(clients)} checkpoints to {out}")
        return 0

    if cmd == "run":
        summary = run_experiment(config, out_dir=args.out, workers=args.workers)
        print(f"method={summary['method']} "
              f"accuracy={summary['accuracy_mean']:.4f}"
              f"±{summary['accuracy_std']:.4f} over seeds {summary['seeds']}")
        return 0

    if cmd == "diagnose":
        result = run_diagnostics(config, out_dir=args.out, workers=args.workers)
        print(f"gradient-supremum ordering holds in "
              f"{result['fed_below_dense_count']}/{len(result['seeds'])} seeds")
        return 0

    if cmd == "eval":
        params = load_checkpoint(args.checkpoint)
        if args.data:
            test = load_dataset(args.data, split="test")
        else:
            _, test = load_data(config)
        acc = evaluate(params, test)
        print(f"accuracy {acc:.4f} on {len(test)} samples")
        return 0

    raise ValueError(f"unhandled command {cmd}")


if __name__ == "__main__":
    sys.exit(main())
