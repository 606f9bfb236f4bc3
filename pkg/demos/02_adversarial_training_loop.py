"""Walk through the two-step min-max training loop at desk scale.

Trains for a handful of steps on toy data and prints every loss term so
the alternation is visible: the segmenter step descends on supervision
plus cross-view consistency, the adversary step ascends on consistency
plus the patch-contrastive bound while the segmenter stays frozen.

    python3 demos/02_adversarial_training_loop.py
"""

import numpy as np
import torch

from advsdg.config import ModelConfig, TrainConfig
from advsdg.data import normalize_zscore
from advsdg.toy import make_toy_dataset
from advsdg.torchutil import parameter_hash
from advsdg.trainer import init_state, train_step_adversary, train_step_segmenter

samples = make_toy_dataset(8, "flat", seed=1, image_size=32)
images = torch.from_numpy(
    np.stack([normalize_zscore(s.image) for s in samples])).float().unsqueeze(1)
labels = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))

config = TrainConfig(
    epochs=1, batch_size=8, lr=1e-3, mode="full", seed=0, num_patches=16,
    model=ModelConfig(num_classes=4, seg_base_width=8, seg_stages=2,
                      mi_base_width=8, mi_embed_dim=32))
state = init_state(config, total_steps=10)

print("step  sup_1   sup_2   cons    mi_1    mi_2")
for step in range(5):
    seg = train_step_segmenter(state, images, labels)
    adv = train_step_adversary(state, images)
    state.step += 1
    print(f"{step:4d}  {seg.sup_1:.4f}  {seg.sup_2:.4f}  {adv.cons:.4f}  "
          f"{adv.mi_1:+.4f}  {adv.mi_2:+.4f}")

# the adversary step must never touch segmenter weights
before = parameter_hash(state.segmenter)
train_step_adversary(state, images)
assert parameter_hash(state.segmenter) == before
print("segmenter hash unchanged by the adversary step:", before[:16])
