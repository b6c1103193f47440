"""Deterministic synthetic CT-like phantom generation and dose simulation.

Phantoms are piecewise-constant bodies (water-equivalent ellipsoid in air)
with randomly placed soft-tissue and bone inserts plus one low-contrast
insert. Boundaries get a one-voxel partial-volume ramp so edges resemble
reconstructed CT rather than binary masks.

Low-dose simulation adds white Gaussian noise in the image domain with
sigma(d) = sigma_full * sqrt(1/d - 1) for dose fraction d in (0, 1].
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .volume_io import Volume

HU_MIN = -1024.0
HU_MAX = 3071.0

AIR_HU = -1000.0
WATER_HU = 0.0

DEFAULT_DOSES = (0.05, 0.1, 0.25, 0.5)


@dataclass
class PhantomSpec:
    seed: int = 0
    nx: int = 128
    ny: int = 128
    nz: int = 32
    spacing: tuple = (1.0, 1.0, 2.0)
    background_hu: float = WATER_HU
    n_soft: int = 6
    soft_hu: tuple = (30.0, 90.0)
    n_bone: int = 2
    bone_hu: tuple = (700.0, 1200.0)
    low_contrast_delta: float = 15.0

    def __post_init__(self):
        for v in (self.background_hu, *self.soft_hu, *self.bone_hu):
            if not (HU_MIN <= v <= HU_MAX):
                raise ValueError(f"HU value {v} outside [{HU_MIN}, {HU_MAX}]")


@dataclass
class DoseLevel:
    """Dose fraction with its derived additive noise sigma (HU)."""

    fraction: float
    sigma_full: float = 10.0

    def __post_init__(self):
        if not (0.0 < self.fraction <= 1.0):
            raise ValueError(f"dose fraction must be in (0, 1], got {self.fraction}")

    @property
    def sigma(self):
        return self.sigma_full * math.sqrt(1.0 / self.fraction - 1.0)


def _ellipsoid_field(zz, yy, xx, center, radii):
    cz, cy, cx = center
    rz, ry, rx = radii
    return np.sqrt(
        ((zz - cz) / rz) ** 2 + ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
    )


def _soft_mask(dist_field, edge=0.08):
    """1 inside, 0 outside, linear ramp of relative width `edge` at the shell."""
    return np.clip((1.0 + edge - dist_field) / (2.0 * edge), 0.0, 1.0)


def _blend(vol, mask, hu):
    return vol * (1.0 - mask) + hu * mask


def generate_phantom(spec):
    """Deterministic phantom volume for a spec; same seed -> identical bits."""
    if spec.nx < 32 or spec.ny < 32 or spec.nz < 16:
        raise ValueError(
            f"phantom extents too small: {spec.nx}x{spec.ny}x{spec.nz} (need >= 32x32x16)"
        )
    rng = np.random.default_rng(spec.seed)
    zz, yy, xx = np.meshgrid(
        np.arange(spec.nz, dtype=np.float64),
        np.arange(spec.ny, dtype=np.float64),
        np.arange(spec.nx, dtype=np.float64),
        indexing="ij",
    )
    vol = np.full((spec.nz, spec.ny, spec.nx), AIR_HU, dtype=np.float64)

    # body: large water ellipsoid, slightly randomized but always well inside
    body_center = (
        spec.nz / 2.0,
        spec.ny / 2.0 + rng.uniform(-2, 2),
        spec.nx / 2.0 + rng.uniform(-2, 2),
    )
    body_radii = (
        spec.nz * 0.75,
        spec.ny * rng.uniform(0.36, 0.42),
        spec.nx * rng.uniform(0.36, 0.42),
    )
    body_d = _ellipsoid_field(zz, yy, xx, body_center, body_radii)
    body = _soft_mask(body_d, edge=0.03)
    vol = _blend(vol, body, spec.background_hu)

    def random_insert(hu_range, rel_r):
        hu = rng.uniform(*hu_range)
        center = (
            rng.uniform(spec.nz * 0.2, spec.nz * 0.8),
            body_center[1] + rng.uniform(-0.5, 0.5) * body_radii[1],
            body_center[2] + rng.uniform(-0.5, 0.5) * body_radii[2],
        )
        radii = (
            max(2.0, spec.nz * rng.uniform(*rel_r)),
            max(2.5, spec.ny * rng.uniform(*rel_r)),
            max(2.5, spec.nx * rng.uniform(*rel_r)),
        )
        return center, radii, hu

    for _ in range(spec.n_soft):
        center, radii, hu = random_insert(spec.soft_hu, (0.06, 0.16))
        d = _ellipsoid_field(zz, yy, xx, center, radii)
        vol = _blend(vol, _soft_mask(d) * body, hu)

    for _ in range(spec.n_bone):
        center, radii, hu = random_insert(spec.bone_hu, (0.03, 0.07))
        d = _ellipsoid_field(zz, yy, xx, center, radii)
        vol = _blend(vol, _soft_mask(d) * body, hu)

    # one guaranteed low-contrast insert against the background
    lc_center = (
        spec.nz / 2.0,
        body_center[1] - 0.25 * body_radii[1],
        body_center[2] - 0.25 * body_radii[2],
    )
    lc_radii = (spec.nz * 0.2, spec.ny * 0.09, spec.nx * 0.09)
    d = _ellipsoid_field(zz, yy, xx, lc_center, lc_radii)
    vol = _blend(vol, _soft_mask(d) * body, spec.background_hu + spec.low_contrast_delta)

    vol = np.clip(vol, HU_MIN, HU_MAX)
    return Volume(
        nx=spec.nx,
        ny=spec.ny,
        nz=spec.nz,
        spacing=spec.spacing,
        data=vol.astype(np.float32),
    )


def simulate_low_dose(reference, dose, seed):
    """reference + white Gaussian noise at the dose level's sigma; d=1 is exact."""
    if not isinstance(dose, DoseLevel):
        dose = DoseLevel(float(dose))
    if dose.fraction == 1.0:
        return Volume(
            nx=reference.nx,
            ny=reference.ny,
            nz=reference.nz,
            spacing=reference.spacing,
            data=reference.data.copy(),
        )
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, dose.sigma, size=reference.data.shape)
    noisy = reference.data.astype(np.float64) + noise
    return Volume(
        nx=reference.nx,
        ny=reference.ny,
        nz=reference.nz,
        spacing=reference.spacing,
        data=noisy.astype(np.float32),
    )
