"""Auto-decoder training: shared network weights and one latent per shape,
optimized jointly over whole-volume, one-shape-per-step updates."""
from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import ShapePriorModel, loss_and_grads, model_init, predict_occupancy
from .tensor import AdamState, ContractError, adam_step
from .voxels import ProbGrid, VoxelGrid, grid_coords

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "mean_soft_dice", "mean_ce", "mean_latent_reg", "mean_total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 2500
    lr_theta: float = 1e-4
    lr_latent: float = 1e-3
    lam: float = 1e-4
    latent_init_std: float = 0.1
    d: int = 128
    hidden: int = 512
    n_layers: int = 8
    skip_layer: int | None = 4
    ce_weight: float = 1.0
    seed: int = 0
    shuffle: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ContractError("epochs must be >= 1")
        if not (self.lr_theta > 0 and self.lr_latent > 0):
            raise ContractError("learning rates must be positive")
        if self.lam < 0 or self.latent_init_std < 0 or self.ce_weight < 0:
            raise ContractError("lam, latent_init_std and ce_weight must be >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ContractError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainedPrior:
    model: ShapePriorModel
    latents: dict  # key -> LatentCode (1-D array)
    history: list = field(default_factory=list)  # one dict per epoch, HISTORY_FIELDS
    guard_ok: bool = True

    def write_loss_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, lineterminator="\n")
            w.writeheader()
            for row in self.history:
                w.writerow({k: (row[k] if k == "epoch" else repr(float(row[k]))) for k in HISTORY_FIELDS})


def init_latents(n: int, d: int, std: float, seed) -> np.ndarray:
    """``n`` latent codes drawn from N(0, std^2), as an (n, d) array."""
    if n < 1:
        raise ContractError("need at least one latent")
    rng = np.random.default_rng(seed)
    return rng.normal(0.0, 1.0, size=(n, d)) * std


def _coords_cache(dtype):
    cache = {}

    def get(dims):
        if dims not in cache:
            cache[dims] = grid_coords(dims, dtype)
        return cache[dims]

    return get


def train(shapes: list[VoxelGrid], cfg: TrainConfig, keys=None, model=None, progress=None) -> TrainedPrior:
    """Jointly fit the network and one latent per shape.

    Each epoch visits every shape once (shuffled by a seeded generator when
    ``cfg.shuffle``); each visit evaluates every voxel of the shape and takes
    one Adam step on the weights and one on that shape's latent, each with
    its own moment state.
    """
    if not shapes:
        raise ContractError("need at least one training shape")
    keys = [g.subject_id for g in shapes] if keys is None else list(keys)
    if len(set(keys)) != len(keys) or len(keys) != len(shapes):
        raise ContractError("shape keys must be unique, one per shape")
    for k, g in zip(keys, shapes):
        if g.count == 0:
            raise ContractError(f"training shape {k!r} is empty")

    dtype = np.dtype(cfg.dtype)
    if model is None:
        model = model_init(cfg.d, cfg.hidden, cfg.seed, cfg.n_layers, cfg.skip_layer, dtype)
    else:
        model = model.copy()
    z = init_latents(len(shapes), model.latent_dim, cfg.latent_init_std, [cfg.seed, 1]).astype(dtype)
    order_rng = np.random.default_rng([cfg.seed, 2])
    coords_for = _coords_cache(dtype)
    targets = [g.flat().astype(dtype) for g in shapes]

    theta_state = AdamState.fresh(model.params.size)
    z_states = [AdamState.fresh(model.latent_dim) for _ in shapes]
    history = []
    for epoch in range(1, int(cfg.epochs) + 1):
        order = order_rng.permutation(len(shapes)) if cfg.shuffle else np.arange(len(shapes))
        sums = np.zeros(4)
        for i in order:
            lb, g_theta, g_z = loss_and_grads(model, z[i], coords_for(shapes[i].dims), targets[i],
                                              cfg.lam, cfg.ce_weight)
            if not math.isfinite(lb.total) or not np.all(np.isfinite(g_theta)) or not np.all(np.isfinite(g_z)):
                raise TrainingError(f"non-finite loss or gradient at epoch {epoch}, shape {keys[i]!r}: {lb}")
            model.params, theta_state = adam_step(model.params, g_theta, theta_state, cfg.lr_theta)
            z[i], z_states[i] = adam_step(z[i], g_z, z_states[i], cfg.lr_latent)
            sums += (lb.soft_dice, lb.cross_entropy, lb.latent_reg, lb.total)
        means = sums / len(shapes)
        history.append(dict(zip(HISTORY_FIELDS, (epoch, *means))))
        if progress is not None:
            progress(epoch, history[-1])
        elif epoch == 1 or epoch % 100 == 0:
            log.info("epoch %d mean total %.6f", epoch, means[3])

    best = min(h["mean_total"] for h in history)
    guard_ok = bool(history[-1]["mean_total"] <= 1.2 * best)
    if not guard_ok:
        warnings.warn(f"final epoch loss {history[-1]['mean_total']:.4g} exceeds 120% of best {best:.4g}",
                      RuntimeWarning, stacklevel=2)
    latents = {k: z[i].copy() for i, k in enumerate(keys)}
    return TrainedPrior(model, latents, history, guard_ok)


def reconstruct(model: ShapePriorModel, z, dims, spacing=(1.0, 1.0, 1.0)) -> ProbGrid:
    """Occupancy probabilities at every voxel center of a ``dims`` grid."""
    dims = tuple(int(d) for d in dims)
    probs = predict_occupancy(model, z, grid_coords(dims, model.dtype))
    return ProbGrid.from_flat(probs, dims, spacing)
