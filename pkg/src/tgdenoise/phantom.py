"""Synthetic ground truth: blob volumes and particle canvases with known
coordinates, for quantitative end-to-end checks where real data cannot be.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import PackingError, PhantomSpecError
from .evaluation import ParticleSet, write_coords
from .mrc_io import Micrograph, Volume, write_mrc
from .noise_model import (
    GaussianNoiseParams,
    PoissonGaussianParams,
    corrupt_gaussian,
    corrupt_poisson_gaussian,
)
from .target_bank import project_volume, rotation_matrix_zyz


@dataclass
class PhantomSpec:
    # (center xyz in voxels, std, amplitude); >= 2 distinct centers so
    # projections differ across views and the bank is nondegenerate
    volume_blobs: list[tuple[tuple[float, float, float], float, float]]
    volume_size: int = 36
    canvas_size: tuple[int, int] = (256, 256)
    n_particles: int = 10
    min_separation: int = 40
    particle_size: int = 36
    rotation_seed: int = 0
    poisson_gaussian: PoissonGaussianParams | None = field(
        default_factory=PoissonGaussianParams
    )
    gaussian: GaussianNoiseParams = field(default_factory=lambda: GaussianNoiseParams(0.3))
    pixel_size_angstrom: float = 1.0

    def __post_init__(self):
        if len(self.volume_blobs) < 2:
            raise PhantomSpecError("need at least 2 blobs for an asymmetric volume")
        centers = [tuple(np.round(np.asarray(c), 6)) for c, _, _ in self.volume_blobs]
        if len(set(centers)) != len(centers):
            raise PhantomSpecError("blob centers must be distinct")
        if self.min_separation < self.particle_size:
            raise PhantomSpecError(
                f"min_separation {self.min_separation} < particle_size {self.particle_size}"
            )
        if self.particle_size < self.volume_size:
            raise PhantomSpecError(
                f"particle_size {self.particle_size} < volume_size {self.volume_size}; "
                "projections would not fit"
            )


def default_phantom_spec(**overrides) -> PhantomSpec:
    """Two asymmetric Gaussian blobs; overrides are applied to the dataclass."""
    d = overrides.pop("volume_size", 36)
    c = (d - 1) / 2.0
    blobs = [
        ((c - 4.0, c - 3.0, c - 2.0), 3.0, 1.0),
        ((c + 4.5, c + 3.5, c + 2.5), 2.2, 0.8),
    ]
    return PhantomSpec(volume_blobs=blobs, volume_size=d, **overrides)


@dataclass
class GroundTruth:
    clean: Micrograph
    noisy: Micrograph
    coordinates: ParticleSet
    rotations: list[np.ndarray]


def make_volume(spec: PhantomSpec) -> Volume:
    """Sum of 3-D Gaussian blobs on a cubic grid."""
    d = spec.volume_size
    grid = np.arange(d, dtype=np.float64)
    zz, yy, xx = np.meshgrid(grid, grid, grid, indexing="ij")
    data = np.zeros((d, d, d))
    for (cx, cy, cz), std, amp in spec.volume_blobs:
        for coord, name in ((cx, "x"), (cy, "y"), (cz, "z")):
            if coord - 4 * std < 0 or coord + 4 * std > d - 1:
                raise PhantomSpecError(
                    f"blob at {name}={coord} with std {std} escapes the {d}^3 grid"
                )
        r2 = (xx - cx) ** 2 + (yy - cy) ** 2 + (zz - cz) ** 2
        data += amp * np.exp(-r2 / (2.0 * std**2))
    return Volume(data=data, voxel_size_angstrom=spec.pixel_size_angstrom)


def _random_rotation(rng: np.random.Generator) -> np.ndarray:
    # Haar-uniform via ZYZ with uniform azimuths and uniform cos(beta)
    alpha = rng.uniform(0.0, 2.0 * np.pi)
    beta = float(np.arccos(rng.uniform(-1.0, 1.0)))
    gamma = rng.uniform(0.0, 2.0 * np.pi)
    return rotation_matrix_zyz(alpha, beta, gamma)


def make_micrograph(spec: PhantomSpec) -> GroundTruth:
    """Place randomly rotated projections at separated positions, then corrupt.

    The clean canvas is exactly the superposition of the placed projections,
    rescaled to peak near 1 so the same intensity scale serves the corruption
    models and the clean reference; recorded coordinates are the exact
    projection centers in (x, y) pixels.
    """
    rng = np.random.default_rng(spec.rotation_seed)
    volume = make_volume(spec)
    h, w = spec.canvas_size
    ps = spec.particle_size
    half = ps // 2

    # one global scale keeps the canvas nonnegative with peak ~0.9, so the
    # Poisson rate alpha*y + b is valid without per-image renormalization
    probe = project_volume(volume, np.eye(3), ps)
    scale = 0.9 / probe.max() if probe.max() > 0 else 1.0

    centers: list[tuple[int, int]] = []  # integer anchor (x, y)
    budget = 10_000 * max(spec.n_particles, 1)
    attempts = 0
    while len(centers) < spec.n_particles:
        if attempts >= budget:
            raise PackingError(
                f"placed only {len(centers)}/{spec.n_particles} particles after "
                f"{budget} attempts; enlarge the canvas or reduce min_separation"
            )
        attempts += 1
        cx = int(rng.integers(half, w - ps + half + 1))
        cy = int(rng.integers(half, h - ps + half + 1))
        ok = all(
            (cx - ox) ** 2 + (cy - oy) ** 2 >= spec.min_separation**2
            for ox, oy in centers
        )
        if ok:
            centers.append((cx, cy))

    clean = np.zeros((h, w))
    rotations = []
    coords = []
    for cx, cy in centers:
        rot = _random_rotation(rng)
        rotations.append(rot)
        proj = scale * project_volume(volume, rot, ps)
        x0, y0 = cx - half, cy - half
        clean[y0 : y0 + ps, x0 : x0 + ps] += proj
        # the projection grid center sits at (ps - 1) / 2 from the anchor
        coords.append((x0 + (ps - 1) / 2.0, y0 + (ps - 1) / 2.0))

    noisy = clean
    if spec.poisson_gaussian is not None:
        noisy = corrupt_poisson_gaussian(noisy, spec.poisson_gaussian, rng, normalize=False)
    if spec.gaussian.sigma_a > 0:
        noisy, _ = corrupt_gaussian(noisy, spec.gaussian, rng)
    else:
        noisy = np.array(noisy, dtype=np.float64)

    return GroundTruth(
        clean=Micrograph(data=clean, pixel_size_angstrom=spec.pixel_size_angstrom,
                         provenance="phantom clean"),
        noisy=Micrograph(data=noisy, pixel_size_angstrom=spec.pixel_size_angstrom,
                         provenance="phantom noisy"),
        coordinates=ParticleSet(coordinates=np.asarray(coords).reshape(-1, 2)),
        rotations=rotations,
    )


def write_ground_truth(gt: GroundTruth, out_dir, stem: str = "") -> dict[str, str]:
    """Write clean/noisy MRCs and the coordinates text file; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    prefix = f"{stem}_" if stem else ""
    paths = {
        "clean": os.path.join(out_dir, f"{prefix}clean.mrc"),
        "noisy": os.path.join(out_dir, f"{prefix}noisy.mrc"),
        "coords": os.path.join(out_dir, f"{prefix}coords.txt"),
    }
    write_mrc(gt.clean, paths["clean"])
    write_mrc(gt.noisy, paths["noisy"])
    write_coords(gt.coordinates, paths["coords"])
    return paths
