"""How Dirichlet concentration and pathological splits shape client data."""

import numpy as np

from fedinv.datasets import generate_toyshapes
from fedinv.federation import (PartitionSpec, dirichlet_partition,
                               pathological_partition)

train, _ = generate_toyshapes(4, 100, seed=0)
labels = np.asarray(train.labels)


def label_table(shards):
    return [np.bincount(labels[s.indices], minlength=4).tolist() for s in shards]


print("Dirichlet partitions over 4 clients (rows are clients, cols classes):")
for alpha in (100.0, 1.0, 0.1):
    spec = PartitionSpec(kind="dirichlet", alpha=alpha, n_clients=4, seed=7)
    shards = dirichlet_partition(train, spec)
    print(f"  alpha={alpha}:")
    for counts in label_table(shards):
        print(f"    {counts}")

print("\npathological #C=2 partition (each client holds exactly 2 classes):")
spec = PartitionSpec(kind="pathological", classes_per_client=2, n_clients=4, seed=7)
for counts in label_table(pathological_partition(train, spec)):
    print(f"    {counts}")

# shards always stay disjoint and exhaustive
spec = PartitionSpec(kind="dirichlet", alpha=0.1, n_clients=4, seed=3)
shards = dirichlet_partition(train, spec)
together = np.sort(np.concatenate([s.indices for s in shards]))
print("\ndisjoint and exhaustive:", np.array_equal(together, np.arange(len(train))))
