"""Shared domain types, slice access, intensity scaling and the synthetic phantom.

Storage convention: ``Volume.data`` is a C-ordered array of shape
``(nz, ny, nx)``, so the flat buffer is x-fastest. Slices are taken along the
slowest axis (called ``z`` throughout the package); ``orientation`` records
which anatomical axis that is. For the pipeline it is the left-right axis, so
every slice is a sagittal plane.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GROUP_I, GROUP_II, GROUP_III = 1, 2, 3
DEFAULT_ORIENTATION = "slices=LR"


class InvalidSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    orientation: str = DEFAULT_ORIENTATION

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D and non-empty, got {data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        """``(nx, ny, nz)`` voxel counts."""
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @property
    def nz(self) -> int:
        return self.data.shape[0]

    def slice(self, z: int) -> "SagittalSlice":
        return extract_sagittal_slice(self, z)


@dataclass(frozen=True)
class SagittalSlice:
    z_index: int
    pixels: np.ndarray  # (height=ny, width=nx)


@dataclass(frozen=True)
class GroupPartition:
    """Slice counts ``k1..k4`` splitting a volume into groups I/II/III/II/I."""

    k1: int
    k2: int
    k3: int
    k4: int
    nz: int

    def __post_init__(self):
        if not 0 <= self.k1 <= self.k2 <= self.k3 <= self.k4 <= self.nz:
            raise ValueError(f"non-monotone partition {self.ks} for nz={self.nz}")

    @property
    def ks(self) -> tuple[int, int, int, int]:
        return self.k1, self.k2, self.k3, self.k4

    @property
    def labels(self) -> np.ndarray:
        out = np.full(self.nz, GROUP_I, dtype=np.int8)
        out[self.k1:self.k2] = GROUP_II
        out[self.k2:self.k3] = GROUP_III
        out[self.k3:self.k4] = GROUP_II
        return out

    @classmethod
    def from_labels(cls, labels) -> "GroupPartition":
        labels = np.asarray(labels)
        runs = _runs(labels)
        expected = [GROUP_I, GROUP_II, GROUP_III, GROUP_II, GROUP_I]
        # leading/trailing group I runs may be absent, the middle three may not
        seq = [v for v, _ in runs]
        if seq and seq[0] != GROUP_I:
            runs.insert(0, (GROUP_I, 0))
        if seq and runs[-1][0] != GROUP_I:
            runs.append((GROUP_I, 0))
        if [v for v, _ in runs] != expected:
            raise ValueError(f"group labels out of order: run sequence {seq}")
        counts = np.cumsum([n for _, n in runs])
        return cls(int(counts[0]), int(counts[1]), int(counts[2]), int(counts[3]), len(labels))


def _runs(labels) -> list[tuple[int, int]]:
    runs: list[tuple[int, int]] = []
    for v in labels:
        v = int(v)
        if runs and runs[-1][0] == v:
            runs[-1] = (v, runs[-1][1] + 1)
        else:
            runs.append((v, 1))
    return runs


def extract_sagittal_slice(v: Volume, z: int) -> SagittalSlice:
    if not 0 <= z < v.nz:
        raise IndexError(f"slice index {z} outside [0, {v.nz})")
    return SagittalSlice(int(z), v.data[z])


def normalize_intensity(pixels, lower: float = 1.0, upper: float = 99.0) -> np.ndarray:
    """Robust min-max scaling between the 1st and 99th percentiles, clamped to [0, 1].

    Works on any array shape; a constant input maps to all zeros.
    """
    arr = np.asarray(pixels, dtype=np.float64)
    if isinstance(pixels, SagittalSlice):
        arr = np.asarray(pixels.pixels, dtype=np.float64)
    p1, p99 = np.percentile(arr, [lower, upper])
    if p99 <= p1:
        return np.zeros_like(arr)
    return np.clip((arr - p1) / (p99 - p1), 0.0, 1.0)


def normalize_slice(s: SagittalSlice) -> SagittalSlice:
    return SagittalSlice(s.z_index, normalize_intensity(s.pixels))


@dataclass(frozen=True)
class PhantomSpec:
    """Ellipsoidal brain inside a skull shell; center and semi-axes are (x, y, z) voxels."""

    dims: tuple[int, int, int] = (64, 64, 48)
    center: tuple[float, float, float] = (31.5, 31.5, 23.5)
    semi_axes: tuple[float, float, float] = (22.0, 25.0, 19.0)
    skull_thickness: float = 3.0
    noise_sigma: float = 0.03
    seed: int = 0

    def validate(self):
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidSpecError(f"bad dims {self.dims}")
        if self.noise_sigma < 0:
            raise InvalidSpecError("noise_sigma must be >= 0")
        if self.skull_thickness < 0 or min(self.semi_axes) <= 0:
            raise InvalidSpecError("semi-axes must be positive and thickness >= 0")
        for c, a, n in zip(self.center, self.semi_axes, self.dims):
            if c - a < 0 or c + a > n - 1:
                raise InvalidSpecError(
                    f"ellipsoid (center {self.center}, semi-axes {self.semi_axes}) "
                    f"exceeds dims {self.dims}")


BACKGROUND, SKULL, BRAIN = 0.1, 0.5, 0.8


def _ellipsoid_level(dims, center, semi_axes) -> np.ndarray:
    nx, ny, nz = dims
    z, y, x = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    cx, cy, cz = center
    ax, ay, az = semi_axes
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 + ((z - cz) / az) ** 2


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, np.ndarray]:
    """Return ``(volume, brain_mask)``; identical specs give bit-identical output."""
    spec.validate()
    brain = _ellipsoid_level(spec.dims, spec.center, spec.semi_axes) <= 1.0
    outer_axes = tuple(a + spec.skull_thickness for a in spec.semi_axes)
    head = _ellipsoid_level(spec.dims, spec.center, outer_axes) <= 1.0
    data = np.full(brain.shape, BACKGROUND)
    data[head] = SKULL
    data[brain] = BRAIN
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)
    return Volume(data), brain.astype(np.uint8)


def group_labels_from_mask(mask: np.ndarray, low: float = 0.5, high: float = 0.85) -> np.ndarray:
    """Reference group labels from per-slice brain area relative to the largest slice.

    Area fraction below ``low`` is group I, at least ``high`` is group III,
    anything in between is group II.
    """
    areas = mask.reshape(mask.shape[0], -1).sum(axis=1).astype(np.float64)
    frac = areas / max(areas.max(), 1.0)
    labels = np.full(len(areas), GROUP_II, dtype=np.int8)
    labels[frac < low] = GROUP_I
    labels[frac >= high] = GROUP_III
    return labels


def as_binary(mask) -> np.ndarray:
    m = np.asarray(mask)
    if m.dtype != bool and not np.isin(m, (0, 1)).all():
        raise ValueError("mask labels must be in {0, 1}")
    return m.astype(bool)


@dataclass
class Subject:
    """A named volume with optional reference mask and group labels."""

    name: str
    volume: Volume
    mask: np.ndarray | None = None
    groups: np.ndarray | None = field(default=None, repr=False)


def random_phantom_spec(seed: int, dims=(64, 64, 48), noise_sigma: float = 0.03,
                        skull_thickness: float = 3.0) -> PhantomSpec:
    """Phantom with seeded jitter of brain position (about 2 voxels) and size (about 8%)."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = dims
    base = np.array([0.34 * nx, 0.39 * ny, 0.40 * nz])
    axes = base * rng.uniform(0.92, 1.08, size=3)
    center = np.array([(nx - 1) / 2, (ny - 1) / 2, (nz - 1) / 2]) + rng.uniform(-2, 2, size=3)
    margin = skull_thickness + 1
    for i, n in enumerate(dims):
        axes[i] = min(axes[i], center[i] - margin, n - 1 - margin - center[i])
    return PhantomSpec(tuple(int(d) for d in dims), tuple(float(c) for c in center),
                       tuple(float(a) for a in axes), skull_thickness, noise_sigma, seed)
