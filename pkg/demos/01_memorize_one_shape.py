"""
Memorizing a single shape
=========================

The prior is a coordinate MLP: (x, y, z, latent) -> occupancy probability.
Trained on one shape it simply memorizes it. This is the quickest way to see
the whole training loop working.
"""
import numpy as np

from shapeprior import TrainConfig, VoxelGrid, binarize, dice_score, reconstruct, train
from shapeprior.voxels import grid_coords

# a 24^3 ball; voxel centers live in [-1, 1]^3
dims = (24, 24, 24)
coords = grid_coords(dims)
ball = VoxelGrid.from_flat(np.linalg.norm(coords, axis=1) < 0.6, dims, subject_id="ball")
print("occupied voxels:", ball.count)

# the default network is 8 layers of width 512; a narrower one is enough
# for a single shape and keeps this under a minute on one core. A narrow
# network also tolerates (and needs) a larger weight learning rate.
cfg = TrainConfig(epochs=300, hidden=32, d=16, lr_theta=1e-3)


def progress(epoch, row):
    if epoch % 50 == 0:
        print(f"epoch {epoch:4d}  soft dice {row['mean_soft_dice']:.4f}  total {row['mean_total']:.4f}")


prior = train([ball], cfg, progress=progress)

# reconstruct on the same grid and threshold at 0.5
recon = binarize(reconstruct(prior.model, prior.latents["ball"], dims))
print("reconstruction DSC:", round(dice_score(recon, ball), 4))

# the network is continuous: query it on a finer grid too
fine = binarize(reconstruct(prior.model, prior.latents["ball"], (48, 48, 48)))
print("fine-grid occupancy fraction:", round(fine.count / 48 ** 3, 4),
      "(ball: %.4f)" % (4 / 3 * np.pi * 0.6 ** 3 / 8))
