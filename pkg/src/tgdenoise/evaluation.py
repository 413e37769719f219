"""Downstream metrics: distance-based particle matching and Fourier shell
correlation with threshold-crossing resolution."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from skimage.feature import match_template, peak_local_max

from .errors import DimensionError, ParameterError
from .mrc_io import Volume


@dataclass
class ParticleSet:
    coordinates: np.ndarray  # (n, 2) as (x, y) in pixels
    micrograph_id: str = ""

    def __post_init__(self):
        coords = np.asarray(self.coordinates, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(coords)):
            raise ParameterError("particle coordinates must be finite")
        self.coordinates = coords

    def __len__(self) -> int:
        return self.coordinates.shape[0]


def write_coords(ps: ParticleSet, path) -> None:
    """Write one "x y" pair per line, pixel units."""
    with open(path, "w") as fh:
        for x, y in ps.coordinates:
            fh.write(f"{x:.3f} {y:.3f}\n")


def read_coords(path, micrograph_id: str = "") -> ParticleSet:
    coords = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            coords.append((float(parts[0]), float(parts[1])))
    arr = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    return ParticleSet(coordinates=arr, micrograph_id=micrograph_id)


@dataclass
class MatchOutcome:
    tp: list[tuple[int, int]]  # (pred index, gt index)
    fp: list[int]
    fn: list[int]

    @property
    def counts(self) -> tuple[int, int, int]:
        return len(self.tp), len(self.fp), len(self.fn)


def match_particles(pred: ParticleSet, gt: ParticleSet, threshold: float) -> MatchOutcome:
    """Greedy nearest-first one-to-one matching within an inclusive threshold.

    Candidate pairs within ``threshold`` pixels are visited in ascending
    distance order and accepted when both endpoints are still unmatched.
    """
    if threshold <= 0:
        raise ParameterError(f"threshold must be > 0, got {threshold}")
    p, g = pred.coordinates, gt.coordinates
    if len(p) and len(g):
        d = np.linalg.norm(p[:, None, :] - g[None, :, :], axis=2)
        ii, jj = np.nonzero(d <= threshold)
        order = np.lexsort((jj, ii, d[ii, jj]))
        candidates = [(int(ii[k]), int(jj[k])) for k in order]
    else:
        candidates = []

    used_p, used_g = set(), set()
    tp = []
    for i, j in candidates:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        tp.append((i, j))
    fp = [i for i in range(len(p)) if i not in used_p]
    fn = [j for j in range(len(g)) if j not in used_g]
    return MatchOutcome(tp=tp, fp=fp, fn=fn)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


@dataclass
class PickingMetrics:
    micro_precision: float
    micro_recall: float
    micro_f1: float
    macro_precision_mean: float
    macro_precision_std: float
    macro_recall_mean: float
    macro_recall_std: float
    macro_f1_mean: float
    macro_f1_std: float
    per_micrograph: list[tuple[float, float, float]] = field(default_factory=list)


def picking_metrics(outcomes: list[MatchOutcome]) -> PickingMetrics:
    """Micro (globally pooled counts) and macro (per-micrograph averaged)
    precision/recall/F1; macro spread is the population std."""
    if not outcomes:
        raise ParameterError("need at least one micrograph")
    counts = np.array([o.counts for o in outcomes], dtype=np.int64)
    micro = _prf(*counts.sum(axis=0))
    per = [_prf(*c) for c in counts]
    per_arr = np.asarray(per)
    means = per_arr.mean(axis=0)
    stds = per_arr.std(axis=0)  # population std
    return PickingMetrics(
        micro_precision=micro[0], micro_recall=micro[1], micro_f1=micro[2],
        macro_precision_mean=means[0], macro_precision_std=stds[0],
        macro_recall_mean=means[1], macro_recall_std=stds[1],
        macro_f1_mean=means[2], macro_f1_std=stds[2],
        per_micrograph=per,
    )


@dataclass
class FSCCurve:
    shell_centers: np.ndarray  # 1/Angstrom, strictly increasing
    correlations: np.ndarray
    voxel_size: float


def fsc(v1: Volume, v2: Volume) -> FSCCurve:
    """Fourier shell correlation over integer-radius shells (DC excluded)."""
    if v1.data.shape != v2.data.shape:
        raise DimensionError(f"volume shapes differ: {v1.data.shape} vs {v2.data.shape}")
    if not math.isclose(v1.voxel_size_angstrom, v2.voxel_size_angstrom, rel_tol=1e-9):
        raise ParameterError("volumes must share a voxel size")
    n = max(v1.data.shape)
    voxel = v1.voxel_size_angstrom

    f1 = np.fft.fftn(v1.data)
    f2 = np.fft.fftn(v2.data)
    freqs = [np.fft.fftfreq(s, d=voxel) for s in v1.data.shape]
    fz, fy, fx = np.meshgrid(*freqs, indexing="ij")
    radius = np.sqrt(fz**2 + fy**2 + fx**2)
    shell_width = 1.0 / (n * voxel)
    shell_idx = np.rint(radius / shell_width).astype(np.int64)

    n_shells = n // 2
    centers, corr = [], []
    cross = np.real(f1 * np.conj(f2))
    p1 = np.abs(f1) ** 2
    p2 = np.abs(f2) ** 2
    for r in range(1, n_shells + 1):
        mask = shell_idx == r
        denom = math.sqrt(p1[mask].sum() * p2[mask].sum())
        centers.append(r * shell_width)
        corr.append(cross[mask].sum() / denom if denom > 0 else 0.0)
    return FSCCurve(
        shell_centers=np.asarray(centers),
        correlations=np.asarray(corr),
        voxel_size=voxel,
    )


@dataclass
class ResolutionEstimate:
    angstrom: float
    nyquist_limited: bool
    crossing_freq: float | None = None  # 1/Angstrom


def resolution_at(curve: FSCCurve, threshold: float = 0.143) -> ResolutionEstimate:
    """Resolution at the first downward threshold crossing (linear interpolation).

    A curve that never drops below the threshold is Nyquist limited and is
    reported as twice the voxel size, flagged.
    """
    f = curve.shell_centers
    c = curve.correlations
    if f.size == 0:
        raise ParameterError("empty curve")
    for i in range(len(c)):
        if c[i] < threshold:
            if i == 0:
                crossing = float(f[0])
            else:
                span = c[i] - c[i - 1]
                t = (threshold - c[i - 1]) / span if span != 0 else 0.0
                crossing = float(f[i - 1] + t * (f[i] - f[i - 1]))
            return ResolutionEstimate(
                angstrom=1.0 / crossing, nyquist_limited=False, crossing_freq=crossing
            )
    return ResolutionEstimate(angstrom=2.0 * curve.voxel_size, nyquist_limited=True)


def template_pick(
    image: np.ndarray, template: np.ndarray, n_peaks: int, min_distance: int
) -> ParticleSet:
    """Pick the ``n_peaks`` strongest normalized-cross-correlation peaks.

    Peaks are non-max suppressed within ``min_distance`` pixels; coordinates
    are returned as (x, y) particle centers.
    """
    ncc = match_template(
        np.asarray(image, dtype=np.float64), np.asarray(template, dtype=np.float64),
        pad_input=True,
    )
    peaks = peak_local_max(
        ncc, min_distance=min_distance, num_peaks=n_peaks, exclude_border=False
    )
    coords = np.stack([peaks[:, 1], peaks[:, 0]], axis=1).astype(np.float64) \
        if peaks.size else np.zeros((0, 2))
    return ParticleSet(coordinates=coords)
