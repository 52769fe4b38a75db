"""Conditional occupancy MLP f(x, z) -> [0, 1] and its training loss.

Layout (defaults): 8 linear layers, ReLU after the first seven, sigmoid at
the output. The output of layer 4 is concatenated with the 3 input
coordinates before layer 5. Layer 1 sees ``[x, z]`` (3 + d inputs).

Layer 1 is evaluated as ``x @ W[:3] + (z @ W[3:] + b)`` so the latent half
of the product is computed once per shape instead of once per voxel. This
is algebraically the same as feeding the concatenation.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor
from .voxels import ProbGrid, VoxelGrid

SOFT_DICE_EPS = 1e-6
CHECKPOINT_MAGIC = "INRC1"
_DTYPES = {"f32": np.float32, "f64": np.float64}
_WIRE_DTYPES = {"f32": "<f4", "f64": "<f8"}


@dataclass(eq=False)
class ShapePriorModel:
    latent_dim: int
    hidden: int
    params: np.ndarray
    n_layers: int = 8
    skip_layer: int | None = 4
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"
    seed: int | None = None

    def __post_init__(self):
        if self.n_layers < 2:
            raise ContractError("need at least 2 layers")
        if self.skip_layer is not None and not 1 <= self.skip_layer < self.n_layers:
            raise ContractError(f"skip layer {self.skip_layer} outside 1..{self.n_layers - 1}")
        expected = sum(i * o + o for i, o in self.layer_shapes())
        if self.params.shape != (expected,):
            raise ContractError(f"parameter vector has {self.params.size} entries, expected {expected}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        return layer_shapes(self.latent_dim, self.hidden, self.n_layers, self.skip_layer)

    @property
    def dtype(self):
        return self.params.dtype

    def unpack(self, flat=None) -> list[tuple[np.ndarray, np.ndarray]]:
        """Views of ``(W, b)`` per layer into the flat parameter vector."""
        flat = self.params if flat is None else flat
        out, off = [], 0
        for i, o in self.layer_shapes():
            w = flat[off:off + i * o].reshape(i, o)
            off += i * o
            out.append((w, flat[off:off + o]))
            off += o
        return out

    def copy(self) -> "ShapePriorModel":
        return ShapePriorModel(self.latent_dim, self.hidden, self.params.copy(), self.n_layers,
                               self.skip_layer, self.hidden_activation, self.output_activation, self.seed)

    def checksum(self) -> str:
        import hashlib

        return hashlib.sha256(np.ascontiguousarray(self.params).tobytes()).hexdigest()


def layer_shapes(d, hidden, n_layers=8, skip_layer=4):
    shapes = []
    for k in range(1, n_layers + 1):
        fan_in = 3 + d if k == 1 else hidden
        if skip_layer is not None and k == skip_layer + 1:
            fan_in = hidden + 3
        fan_out = 1 if k == n_layers else hidden
        shapes.append((fan_in, fan_out))
    return shapes


def model_init(d=128, hidden=512, seed=0, n_layers=8, skip_layer=4, dtype=np.float32) -> ShapePriorModel:
    """He-normal hidden weights, 1/fan_in variance on the output layer, zero biases."""
    if d < 1 or hidden < 1:
        raise ContractError("latent dim and hidden width must be >= 1")
    rng = np.random.default_rng(seed)
    chunks = []
    shapes = layer_shapes(d, hidden, n_layers, skip_layer)
    for k, (i, o) in enumerate(shapes, start=1):
        std = math.sqrt((1.0 if k == n_layers else 2.0) / i)
        chunks.append(rng.normal(0.0, std, size=i * o))
        chunks.append(np.zeros(o))
    params = np.concatenate(chunks).astype(dtype)
    return ShapePriorModel(d, hidden, params, n_layers, skip_layer, seed=seed)


def forward_logits(model: ShapePriorModel, layers, z: Tensor, coords: Tensor) -> Tensor:
    """Traced forward pass. ``layers`` is a list of ``(W, b)`` tensors."""
    w1, b1 = layers[0]
    h = T.dense(coords, w1[:3], z @ w1[3:] + b1, relu=True)
    last = len(layers) - 1
    for k in range(1, len(layers)):
        if model.skip_layer is not None and k == model.skip_layer:
            h = T.concat([h, coords], axis=1)
        w, b = layers[k]
        h = T.dense(h, w, b, relu=k < last)
    return h


def logits_array(model: ShapePriorModel, z, coords, chunk=1 << 16) -> np.ndarray:
    """Untraced forward pass; returns one logit per coordinate row."""
    z = np.asarray(z, dtype=model.dtype).reshape(1, -1)
    coords = np.asarray(coords, dtype=model.dtype)
    layers = model.unpack()
    w1, b1 = layers[0]
    zb = z @ w1[3:] + b1
    out = np.empty(len(coords), dtype=model.dtype)
    for s in range(0, len(coords), chunk):
        x = coords[s:s + chunk]
        h = T.relu_array(x @ w1[:3] + zb)
        for k in range(1, len(layers)):
            if model.skip_layer is not None and k == model.skip_layer:
                h = np.concatenate([h, x], axis=1)
            w, b = layers[k]
            h = h @ w + b
            if k < len(layers) - 1:
                h = T.relu_array(h)
        out[s:s + chunk] = h[:, 0]
    return out


def _check_latent(model, z):
    z = np.asarray(z)
    if z.size != model.latent_dim:
        raise ContractError(f"latent has {z.size} entries, model expects {model.latent_dim}")
    if not np.all(np.isfinite(z)):
        raise ValueError("latent code contains non-finite values")
    return z


def predict_occupancy(model: ShapePriorModel, z, coords) -> np.ndarray:
    """Occupancy probability in (0, 1) for each row of ``coords`` (M, 3)."""
    z = _check_latent(model, z)
    coords = np.asarray(coords)
    if coords.ndim != 2 or coords.shape[1] != 3 or len(coords) == 0:
        raise ContractError("coords must be a non-empty (M, 3) array")
    return T.sigmoid_array(logits_array(model, z, coords))


# -- loss ---------------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    soft_dice: float
    cross_entropy: float
    latent_reg: float
    total: float


def loss_graph(logits: Tensor, target: np.ndarray, z: Tensor, lam: float, ce_weight: float = 1.0):
    """Traced combined loss from logits.

    Returns ``(total, soft_dice, ce, reg)`` tensors. ``target`` is a float
    array with the same shape as ``logits``.
    """
    if logits.shape != target.shape:
        raise ContractError(f"logits {logits.shape} and target {target.shape} differ")
    if lam < 0:
        raise ContractError("regularization weight must be >= 0")
    y = Tensor(target.astype(logits.dtype, copy=False))
    p = T.sigmoid(logits)
    inter = T.reduce_sum(p * y)
    denom = T.reduce_sum(p) + float(target.sum(dtype=np.float64)) + SOFT_DICE_EPS
    soft_dice = 1.0 - (2.0 * inter + SOFT_DICE_EPS) / denom
    # -[y log p + (1-y) log(1-p)] == softplus(l) - y*l
    ce = T.reduce_mean(T.softplus(logits) - y * logits)
    reg = T.reduce_sum(z * z)
    total = soft_dice + ce_weight * ce + lam * reg
    return total, soft_dice, ce, reg


def breakdown(total, soft_dice, ce, reg) -> LossBreakdown:
    return LossBreakdown(float(soft_dice.data), float(ce.data), float(reg.data), float(total.data))


def compute_loss(probs: ProbGrid, target: VoxelGrid, z, lam: float, ce_weight: float = 1.0) -> LossBreakdown:
    """Loss of a probability grid against a binary target.

    Probabilities are mapped back to logits so the same (logit-stable) path
    as training is used; probabilities of exactly 0 or 1 are clipped to the
    float64 open interval first.
    """
    if probs.dims != target.dims:
        raise ContractError(f"dims differ: {probs.dims} vs {target.dims}")
    fi = np.finfo(np.float64)
    p = np.clip(probs.flat().astype(np.float64), fi.tiny, 1 - fi.epsneg)
    logits = np.log(p) - np.log1p(-p)
    y = target.flat().astype(np.float64)
    zt = Tensor(np.asarray(z, dtype=np.float64).reshape(1, -1))
    return breakdown(*loss_graph(Tensor(logits.reshape(-1, 1)), y.reshape(-1, 1), zt, lam, ce_weight))


def loss_and_grads(model: ShapePriorModel, z, coords, target, lam, ce_weight=1.0,
                   params=None, want_theta=True):
    """Combined loss for one shape plus gradients.

    Returns ``(LossBreakdown, grad_theta_flat or None, grad_z)``. ``params``
    overrides the model's flat parameter vector (used by finite-difference
    checks); ``target`` is the flat 0/1 occupancy in the order of ``coords``.
    """
    flat = model.params if params is None else params
    with T.Tape() as tape:
        layer_tensors = [(Tensor(w, requires_grad=want_theta), Tensor(b, requires_grad=want_theta))
                         for w, b in model.unpack(flat)]
        zt = Tensor(np.asarray(z, dtype=flat.dtype).reshape(1, -1), requires_grad=True)
        ct = Tensor(np.asarray(coords, dtype=flat.dtype))
        logits = forward_logits(model, layer_tensors, zt, ct)
        terms = loss_graph(logits, np.asarray(target).reshape(-1, 1), zt, lam, ce_weight)
    leaves = [zt] + ([t for pair in layer_tensors for t in pair] if want_theta else [])
    grads = T.backward(tape, terms[0], leaves=leaves)
    gz = np.asarray(grads[id(zt)], dtype=np.float64).reshape(-1)
    gtheta = None
    if want_theta:
        gtheta = np.concatenate([np.asarray(grads[id(t)], dtype=np.float64).reshape(-1)
                                 for pair in layer_tensors for t in pair])
    return breakdown(*terms), gtheta, gz


# -- INRC1 checkpoints -----------------------------------------------------------

def save_checkpoint(path, model: ShapePriorModel, latents: dict | None = None, *,
                    ce_weight=1.0, lam=1e-4, extra=None) -> None:
    """Write an INRC1 checkpoint; latents go to ``<path>.latents.csv``."""
    dtype_tag = "f64" if model.dtype == np.float64 else "f32"
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": 1,
        "latent_dim": model.latent_dim,
        "hidden": model.hidden,
        "n_layers": model.n_layers,
        "skip_layer": model.skip_layer,
        "layer_shapes": [list(s) for s in model.layer_shapes()],
        "activations": {"hidden": model.hidden_activation, "output": model.output_activation},
        "ce_weight": ce_weight,
        "lambda": lam,
        "seed": model.seed,
        "dtype": dtype_tag,
        "n_params": int(model.params.size),
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(model.params, dtype=_WIRE_DTYPES[dtype_tag]).tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC.encode() + b"\n")
        fh.write(struct.pack("<I", len(head)) + head + b"\n")
        fh.write(payload)
    if latents is not None:
        write_latent_table(latent_table_path(path), latents)


def latent_table_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".latents.csv")


def load_checkpoint(path):
    """Returns ``(model, header, latents)``; latents is {} if no table exists."""
    raw = Path(path).read_bytes()
    magic = CHECKPOINT_MAGIC.encode() + b"\n"
    if not raw.startswith(magic):
        raise ValueError(f"{path}: not an INRC1 checkpoint")
    off = len(magic)
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off:off + n].decode("utf-8"))
    off += n + 1
    if header.get("dtype") not in _DTYPES:
        raise ValueError(f"{path}: unsupported parameter dtype {header.get('dtype')!r}")
    dtype = _DTYPES[header["dtype"]]
    params = np.frombuffer(raw, dtype=_WIRE_DTYPES[header["dtype"]], count=header["n_params"], offset=off)
    model = ShapePriorModel(header["latent_dim"], header["hidden"], params.astype(dtype),
                            header["n_layers"], header["skip_layer"],
                            header["activations"]["hidden"], header["activations"]["output"],
                            header["seed"])
    table = latent_table_path(path)
    latents = read_latent_table(table, dtype) if table.exists() else {}
    return model, header, latents


def write_latent_table(path, latents: dict) -> None:
    """CSV: subject_id, z0..z{d-1}; values written as exact float reprs."""
    rows = list(latents.items())
    d = len(np.asarray(rows[0][1]).reshape(-1)) if rows else 0
    lines = ["subject_id," + ",".join(f"z{i}" for i in range(d))]
    for sid, z in rows:
        lines.append(sid + "," + ",".join(repr(float(v)) for v in np.asarray(z).reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_latent_table(path, dtype=np.float64) -> dict:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    out = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        sid, *vals = line.split(",")
        out[sid] = np.array([float(v) for v in vals]).astype(dtype)
    return out
