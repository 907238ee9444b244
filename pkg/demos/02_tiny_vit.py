"""Train the tiny ViT centrally on toy shapes and look at its attention."""

import numpy as np

from fedinv.datasets import generate_toyshapes, foreground_patches
from fedinv.distill import evaluate
from fedinv.federation import ClientShard, LocalTrainConfig, local_train
from fedinv.vit import ViTConfig, ViTParams, vit_forward

config = ViTConfig()      # 16x16 image, 4x4 patches, 2 layers, 2 heads
train, test = generate_toyshapes(4, 150, noise_std=1.0, seed=0)
print(f"{len(train)} train / {len(test)} test images, {config.num_patches} patches")

shard = ClientShard(0, np.arange(len(train)), train)
hp = LocalTrainConfig(lr=0.1, momentum=0.9, weight_decay=1e-3,
                      epochs=8, batch_size=32)
model = local_train(shard, ViTParams.init(config, seed=7), hp, seed=1)
print(f"test accuracy after {hp.epochs} epochs: {evaluate(model, test):.3f}")

# where does the class token look? average over a few test images
fg = foreground_patches()
scores = np.zeros(config.num_patches)
for img in test.images[:32]:
    scores += vit_forward(model, img).cls_attention
scores /= 32
grid = scores.reshape(config.grid, config.grid)
print("mean cls attention per patch (rows of the patch grid):")
for row in grid:
    print("  " + " ".join(f"{v:.3f}" for v in row))
print(f"attention mass on the pattern block: {scores[fg].sum():.3f} "
      f"(uniform would be {fg.mean():.3f})")
