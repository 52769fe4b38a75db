"""Latent inference for unseen shapes with the network weights frozen."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ShapePriorModel, breakdown, logits_array, loss_and_grads, loss_graph
from .tensor import AdamState, ContractError, Tensor, adam_step, sigmoid_array
from .train import init_latents
from .voxels import ProbGrid, VolErr, VoxelGrid, binarize, dice_score, grid_coords, vol_err

log = logging.getLogger(__name__)


class InferenceError(RuntimeError):
    pass


@dataclass
class InferConfig:
    epochs: int = 1500
    lr_latent: float = 1e-3
    lam: float = 1e-4
    init_std: float = 0.1
    ce_weight: float = 1.0
    seed: int = 0
    restarts: int = 1

    def __post_init__(self):
        if int(self.epochs) < 1 or int(self.restarts) < 1:
            raise ContractError("epochs and restarts must be >= 1")
        if not self.lr_latent > 0 or self.lam < 0:
            raise ContractError("lr_latent must be > 0 and lam >= 0")


@dataclass
class InferResult:
    z: np.ndarray
    recon: ProbGrid
    dice_vs_input: float
    vol_err: VolErr
    initial_loss: float
    final_loss: float
    history: list = field(default_factory=list)  # total loss before each update
    restart: int = 0
    failed_restarts: int = 0


def _final_loss(model, z, coords, target, cfg):
    logits = logits_array(model, z, coords)
    zt = Tensor(np.asarray(z, dtype=model.dtype).reshape(1, -1))
    lb = breakdown(*loss_graph(Tensor(logits.reshape(-1, 1)), target.reshape(-1, 1), zt, cfg.lam, cfg.ce_weight))
    return lb.total, logits


def infer_latent(model: ShapePriorModel, s: VoxelGrid, cfg: InferConfig | None = None) -> InferResult:
    """Fit a latent code to ``s`` by Adam on the combined loss; weights stay fixed.

    With several restarts, the restart with the lowest final loss is kept.
    A restart whose loss turns non-finite is dropped.
    """
    cfg = cfg or InferConfig()
    if s.count == 0:
        raise ContractError("cannot infer a latent for an empty shape")
    coords = grid_coords(s.dims, model.dtype)
    target = s.flat().astype(model.dtype)
    best = None
    failed = 0
    for r in range(int(cfg.restarts)):
        z = init_latents(1, model.latent_dim, cfg.init_std, [cfg.seed, 3, r])[0].astype(model.dtype)
        state = AdamState.fresh(model.latent_dim)
        history = []
        ok = True
        for _ in range(int(cfg.epochs)):
            lb, _, gz = loss_and_grads(model, z, coords, target, cfg.lam, cfg.ce_weight, want_theta=False)
            if not math.isfinite(lb.total) or not np.all(np.isfinite(gz)):
                ok = False
                break
            history.append(lb.total)
            z, state = adam_step(z, gz, state, cfg.lr_latent)
        if ok:
            final, logits = _final_loss(model, z, coords, target, cfg)
            ok = math.isfinite(final)
        if not ok:
            failed += 1
            log.warning("inference restart %d for %r diverged", r, s.subject_id)
            continue
        if best is None or final < best[0]:
            best = (final, z, logits, history, r)
    if best is None:
        raise InferenceError(f"all {cfg.restarts} inference restarts failed for {s.subject_id!r}")
    final, z, logits, history, r = best
    recon = ProbGrid.from_flat(sigmoid_array(logits), s.dims, s.spacing)
    pred = binarize(recon, 0.5)
    return InferResult(z, recon, dice_score(pred, s), vol_err(s, pred), history[0], final, history, r, failed)
