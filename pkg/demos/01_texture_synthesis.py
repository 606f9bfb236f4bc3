"""Show what the texture synthesizers do to a single source image.

Renders one toy scene, pushes it through a few randomly initialized
synthesizers at increasing mix ratios, and writes the panels side by side
to demo_synthesis.png. Run from the repository root:

    python3 demos/01_texture_synthesis.py
"""

import numpy as np
import torch
from PIL import Image

from advsdg.synthesizer import random_init, sample_style, synthesize
from advsdg.toy import make_toy_dataset

sample = make_toy_dataset(1, "flat", seed=7, image_size=96)[0]
image = torch.from_numpy(sample.image).float().view(1, 1, 96, 96)

panels = [image]
gen = torch.Generator().manual_seed(0)
for row in range(3):
    net = random_init(gen)
    z = sample_style(gen, net.channel_counts)
    for alpha in (0.3, 0.6, 1.0):
        with torch.no_grad():
            panels.append(synthesize(image, z, alpha, net))

# one row per synthesizer, original image first in every row
grid = torch.cat([torch.cat(panels[1 + 3 * r:4 + 3 * r], dim=3) for r in range(3)], dim=2)
grid = torch.cat([image.repeat(1, 1, 3, 1)[:, :, :grid.shape[2]], grid], dim=3)
arr = grid[0, 0].numpy()
lo, hi = arr.min(), arr.max()
png = ((arr - lo) / (hi - lo + 1e-9) * 255).astype(np.uint8)
Image.fromarray(png).save("demo_synthesis.png")

print("mix ratios 0.3 / 0.6 / 1.0, one row per random synthesizer")
print(f"input range [{image.min():.3f}, {image.max():.3f}]")
print(f"panel range [{lo:.3f}, {hi:.3f}]")
print("wrote demo_synthesis.png")
