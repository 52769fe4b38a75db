"""Procedural muscle-like voxel populations and subject-wise k-fold splits.

Normal shapes are elongated solids with superelliptic cross-sections whose
radius tapers toward both ends, bowed by a low-frequency bend. Each subject
is scanned several times; every scan applies a small volume-preserving
squash (the probe-compression analogue). Anomalous shapes start from a
normal base, get band-limited radial boundary noise plus a few notches,
and are rescaled so their volume stays close to the base.

Normal subjects belong to one of ``n_cohorts`` cohorts (cohort 0 flatter
and more bent, cohort 1 rounder and straighter), standing in for the two
normal sub-populations that the latent projection is fitted on.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .tensor import ContractError
from .voxels import Group, VoxelGrid, grid_coords, read_voxl, volume_cm3, write_voxl

MANIFEST_FIELDS = ("subject_id", "scan_index", "group", "path", "volume_cm3", "cohort")


@dataclass
class PopulationSpec:
    n_normal: int = 25
    n_anomalous: int = 5
    dims: tuple = (48, 48, 48)
    spacing: tuple = (2.0, 2.0, 2.0)
    scans_per_subject: int = 3
    n_cohorts: int = 2
    # normal shape family, in normalized [-1, 1] units
    half_length: tuple = (0.72, 0.88)
    radius_a: tuple = (0.34, 0.44)
    radius_b: tuple = (0.22, 0.30)
    taper: tuple = (0.35, 0.65)
    bend: tuple = (0.02, 0.16)
    exponent: tuple = (2.0, 3.0)
    squash: tuple = (0.01, 0.10)
    # anomaly model
    rough_amplitude: tuple = (0.18, 0.30)
    rough_frequency: tuple = (3.0, 7.0)
    notch_count: tuple = (1, 3)
    notch_depth: tuple = (0.35, 0.6)
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.n_normal < 0 or self.n_anomalous < 0:
            raise ContractError("population counts must be >= 0")
        if self.scans_per_subject < 1 or self.n_cohorts < 1:
            raise ContractError("scans_per_subject and n_cohorts must be >= 1")
        if len(self.dims) != 3 or min(self.dims) < 4 or len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ContractError("dims must be three counts >= 4 and spacing positive")
        for name in ("half_length", "radius_a", "radius_b", "taper", "bend", "exponent", "squash",
                     "rough_amplitude", "rough_frequency", "notch_count", "notch_depth"):
            lo, hi = getattr(self, name)
            setattr(self, name, (lo, hi))
            if not (0 < lo <= hi) and not (name in ("bend", "squash") and 0 <= lo <= hi):
                raise ContractError(f"range {name}=({lo}, {hi}) must be nonempty and positive")
        if self.notch_count[0] < 1 or int(self.notch_count[0]) != self.notch_count[0]:
            raise ContractError("notch_count must be a range of positive integers")
        if self.half_length[1] >= 1 or self.notch_depth[1] >= 1:
            raise ContractError("half_length and notch_depth must stay below 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class _ShapeParams:
    half_length: float
    a: float
    b: float
    taper: float
    bend: float
    exponent: float
    tilt: float
    squash: float = 0.0


def _subject_params(spec: PopulationSpec, subject_seed: int, cohort: int) -> _ShapeParams:
    rng = np.random.default_rng([spec.seed, int(subject_seed), 0])
    u = rng.uniform(size=7)

    def pick(rng_range, x):
        lo, hi = rng_range
        return lo + (hi - lo) * x

    # cohorts occupy complementary halves of the aspect-ratio and bend ranges
    frac = (cohort + u[1]) / spec.n_cohorts if spec.n_cohorts > 1 else u[1]
    a = pick(spec.radius_a, 1.0 - frac)
    b = pick(spec.radius_b, frac)
    bend_frac = (spec.n_cohorts - 1 - cohort + u[4]) / spec.n_cohorts if spec.n_cohorts > 1 else u[4]
    return _ShapeParams(
        half_length=pick(spec.half_length, u[0]),
        a=a,
        b=b,
        taper=pick(spec.taper, u[2]),
        bend=pick(spec.bend, bend_frac),
        exponent=pick(spec.exponent, u[3]),
        tilt=0.15 * (u[5] - 0.5),
    )


def _scan_squash(spec: PopulationSpec, subject_seed: int, scan_index: int) -> float:
    rng = np.random.default_rng([spec.seed, int(subject_seed), 1, int(scan_index)])
    lo, hi = spec.squash
    return lo + (hi - lo) * rng.uniform()


def _local_frame(spec: PopulationSpec, p: _ShapeParams):
    """Per-voxel (t, u, v, angle) relative to the bent centerline."""
    c = grid_coords(spec.dims)
    x, y, zc = c[:, 0], c[:, 1], c[:, 2]
    # volume-preserving squash: compress y by (1 - s), stretch x and z to compensate
    s = p.squash
    x = x * math.sqrt(1 - s)
    y = y / (1 - s)
    zc = zc * math.sqrt(1 - s)
    t = zc / p.half_length
    inside_t = np.abs(t) < 1
    tt = np.clip(t, -1, 1)
    cx = p.bend * (1 - tt ** 2) + p.tilt * tt
    u = x - cx
    v = y
    ang = np.arctan2(v / p.b, u / p.a)
    return tt, u, v, ang, inside_t


def _rasterize(spec: PopulationSpec, p: _ShapeParams, modulation=None, scale=1.0) -> np.ndarray:
    t, u, v, ang, inside_t = _local_frame(spec, p)
    f = np.where(inside_t, np.clip(1 - t ** 2, 0, None) ** p.taper, 0.0) * scale
    rho = np.ones_like(t) if modulation is None else modulation(t, ang)
    with np.errstate(divide="ignore", invalid="ignore"):
        lhs = (np.abs(u) / (p.a * f)) ** p.exponent + (np.abs(v) / (p.b * f)) ** p.exponent
        occ = inside_t & (f > 0) & (lhs <= np.clip(rho, 0, None) ** p.exponent)
    return _largest_component(occ.reshape(spec.dims, order="F"))


def _largest_component(occ: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(occ)  # 6-connectivity
    if n <= 1:
        return occ
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (1 + int(np.argmax(sizes)))


def _check_fraction(occ: np.ndarray, what: str):
    if not occ.any():
        raise ContractError(f"{what}: degenerate parameters produced an empty shape")


def gen_normal_shape(spec: PopulationSpec, subject_seed: int, scan_index: int, cohort: int | None = None,
                     subject_id: str | None = None) -> VoxelGrid:
    """Deterministic smooth elongated solid for one scan of one subject.

    ``cohort`` defaults to ``subject_seed % spec.n_cohorts``.
    """
    cohort = int(subject_seed) % spec.n_cohorts if cohort is None else int(cohort)
    p = _subject_params(spec, subject_seed, cohort)
    p.squash = _scan_squash(spec, subject_seed, scan_index)
    occ = _rasterize(spec, p)
    _check_fraction(occ, "normal shape")
    sid = subject_id if subject_id is not None else f"N{int(subject_seed):03d}"
    return VoxelGrid(occ, spec.spacing, sid, Group.synthetic_normal)


def _anomaly_modulation(spec: PopulationSpec, subject_seed: int):
    rng = np.random.default_rng([spec.seed, int(subject_seed), 2])
    amp = rng.uniform(*spec.rough_amplitude)
    n_modes = 6
    ka = rng.integers(int(spec.rough_frequency[0]), int(spec.rough_frequency[1]) + 1, size=n_modes)
    kt = rng.uniform(*spec.rough_frequency, size=n_modes)
    phase = rng.uniform(0, 2 * np.pi, size=(n_modes, 2))
    weight = rng.normal(size=n_modes)
    weight /= np.abs(weight).sum()
    lo, hi = spec.notch_count
    n_notch = int(rng.integers(int(lo), int(hi) + 1))
    notch_t = rng.uniform(-0.6, 0.6, size=n_notch)
    notch_ang = rng.uniform(-np.pi, np.pi, size=n_notch)
    notch_depth = rng.uniform(*spec.notch_depth, size=n_notch)

    def modulation(t, ang):
        rough = np.zeros_like(t)
        for w, a_k, t_k, (p1, p2) in zip(weight, ka, kt, phase):
            rough += w * np.cos(a_k * ang + p1) * np.cos(np.pi * t_k * t + p2)
        rho = 1.0 + amp * rough
        for t0, a0, dep in zip(notch_t, notch_ang, notch_depth):
            dang = np.angle(np.exp(1j * (ang - a0)))
            rho -= dep * np.exp(-((t - t0) / 0.12) ** 2 - (dang / 0.6) ** 2)
        return rho

    return modulation


def anomalous_with_base(spec: PopulationSpec, subject_seed: int, scan_index: int,
                        cohort: int | None = None, subject_id: str | None = None):
    """Anomalous grid and the normal base it was derived from."""
    cohort = int(subject_seed) % spec.n_cohorts if cohort is None else int(cohort)
    sid = subject_id if subject_id is not None else f"A{int(subject_seed):03d}"
    base = gen_normal_shape(spec, subject_seed, scan_index, cohort, subject_id=sid)
    p = _subject_params(spec, subject_seed, cohort)
    p.squash = _scan_squash(spec, subject_seed, scan_index)
    mod = _anomaly_modulation(spec, subject_seed)
    target = base.count
    scale = 1.0
    occ = _rasterize(spec, p, mod, scale)
    for _ in range(4):
        if occ.sum() == 0:
            break
        ratio = target / occ.sum()
        if abs(ratio - 1) < 0.02:
            break
        scale *= ratio ** 0.5  # cross-sectional area scales with radius squared
        occ = _rasterize(spec, p, mod, scale)
    _check_fraction(occ, "anomalous shape")
    anom = VoxelGrid(occ, spec.spacing, sid, Group.synthetic_anomalous)
    return anom, base


def gen_anomalous_shape(spec: PopulationSpec, subject_seed: int, scan_index: int,
                        cohort: int | None = None, subject_id: str | None = None) -> VoxelGrid:
    return anomalous_with_base(spec, subject_seed, scan_index, cohort, subject_id)[0]


def surface_faces(g: VoxelGrid) -> int:
    """Number of exposed voxel faces (6-neighbourhood), grid border counted as outside."""
    occ = np.pad(g.occupancy, 1)
    return int(sum(np.count_nonzero(occ != np.roll(occ, 1, axis=ax)) for ax in range(3)))


def surface_to_volume(g: VoxelGrid) -> float:
    return surface_faces(g) / max(g.count, 1)


# -- populations ------------------------------------------------------------------

@dataclass
class Subject:
    subject_id: str
    group: Group
    cohort: int
    seed: int


def population_subjects(spec: PopulationSpec) -> list[Subject]:
    subjects = [Subject(f"N{i:03d}", Group.synthetic_normal, i % spec.n_cohorts, i)
                for i in range(spec.n_normal)]
    # anomalous subjects use seeds disjoint from the normals
    subjects += [Subject(f"A{i:03d}", Group.synthetic_anomalous, i % spec.n_cohorts, 10_000 + i)
                 for i in range(spec.n_anomalous)]
    return subjects


@dataclass
class ScanEntry:
    subject_id: str
    scan_index: int
    group: Group
    path: str
    volume_cm3: float
    cohort: int

    @property
    def key(self) -> str:
        return f"{self.subject_id}_s{self.scan_index}"


def generate_scan(spec: PopulationSpec, subject: Subject, scan_index: int) -> VoxelGrid:
    if subject.group.is_anomalous:
        return gen_anomalous_shape(spec, subject.seed, scan_index, subject.cohort, subject.subject_id)
    return gen_normal_shape(spec, subject.seed, scan_index, subject.cohort, subject.subject_id)


def write_population(spec: PopulationSpec, out_dir) -> list[ScanEntry]:
    """Write every scan as VOXL1 plus ``manifest.csv``. Paths are relative to ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for subj in population_subjects(spec):
        for s in range(spec.scans_per_subject):
            grid = generate_scan(spec, subj, s)
            rel = f"{subj.subject_id}_s{s}.voxl"
            write_voxl(out_dir / rel, grid)
            entries.append(ScanEntry(subj.subject_id, s, subj.group, rel, volume_cm3(grid), subj.cohort))
    write_manifest(out_dir / "manifest.csv", entries)
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in entries:
            w.writerow([e.subject_id, e.scan_index, e.group.name, e.path, repr(float(e.volume_cm3)), e.cohort])


def read_manifest(path) -> list[ScanEntry]:
    with open(path, newline="") as fh:
        return [ScanEntry(r["subject_id"], int(r["scan_index"]), Group[r["group"]], r["path"],
                          float(r["volume_cm3"]), int(r.get("cohort") or 0))
                for r in csv.DictReader(fh)]


def load_scans(data_dir, entries) -> list[VoxelGrid]:
    data_dir = Path(data_dir)
    return [read_voxl(data_dir / e.path) for e in entries]


# -- folds -----------------------------------------------------------------------

@dataclass
class FoldPlan:
    k: int
    folds: list = field(default_factory=list)  # [(train_ids, test_ids)]

    def train_ids(self, fold: int) -> list:
        return self.folds[fold][0]

    def test_ids(self, fold: int) -> list:
        return self.folds[fold][1]


def make_folds(subjects, k: int = 5, seed=0) -> FoldPlan:
    """Subject-wise k-fold plan over ``(subject_id, group)`` pairs.

    Normal subjects are shuffled with a seeded generator and cut into k
    contiguous, near-equal test folds; the rest of the normals train.
    Anomalous subjects are test-only in every fold.
    """
    subjects = list(dict.fromkeys((sid, Group(g)) for sid, g in subjects))
    normals = [sid for sid, g in subjects if not g.is_anomalous]
    anomalous = [sid for sid, g in subjects if g.is_anomalous]
    if k < 1 or k > len(normals):
        raise ContractError(f"k={k} must lie in 1..{len(normals)} (number of normal subjects)")
    rng = np.random.default_rng(seed)
    order = [normals[i] for i in rng.permutation(len(normals))]
    chunks = np.array_split(np.arange(len(order)), k)
    folds = []
    for chunk in chunks:
        test = [order[i] for i in chunk]
        held = set(test)
        train = [sid for sid in order if sid not in held]
        folds.append((train, test + anomalous))
    return FoldPlan(k, folds)
