"""Bank of coarse structural targets and similarity-based matching.

A reference volume is low-pass filtered and projected along quasi-uniform
viewing directions; the projections are centered and embedded by a feature
map into a subspace whose orthogonal projector screens noisy-patch features
before cosine matching. Matching produces simplex weights, a weighted target
patch, and a confidence score used to gate target-guided supervision.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import (
    DegenerateBankError,
    DimensionError,
    FrequencyError,
    ParameterError,
)
from .mrc_io import Micrograph, Volume, read_mrc, write_mrc

# fraction of centered-to-raw projection energy below which the bank carries
# no usable variation; interpolation artifacts on a symmetric reference sit
# near 1e-3, genuinely asymmetric references above 0.1
_DEGENERATE_REL_VARIANCE = 1e-2
_RANK_RTOL = 1e-8


@dataclass
class TargetBank:
    projections: np.ndarray  # (m, H, W), centered
    features: np.ndarray  # (m, q)
    basis: np.ndarray  # (q, r), orthonormal columns
    sigma2_surrogate: float
    center: np.ndarray  # (H, W) bank mean prior to centering
    lowpass_cutoff: float
    n_views: int
    temperature: float = 0.1
    feature_map: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.projections = np.asarray(self.projections, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.basis = np.asarray(self.basis, dtype=np.float64)
        if self.projections.ndim != 3 or self.projections.shape[0] < 1:
            raise DimensionError("projections must be a (m, H, W) stack with m >= 1")
        norms = np.linalg.norm(self.features, axis=1)
        if np.any(norms <= 0):
            raise DegenerateBankError("bank features must have positive norm")
        gram = self.basis.T @ self.basis
        if not np.allclose(gram, np.eye(self.basis.shape[1]), atol=1e-8):
            raise ParameterError("basis columns are not orthonormal")
        if self.sigma2_surrogate <= 0:
            raise DegenerateBankError(
                f"surrogate variance must be positive, got {self.sigma2_surrogate}"
            )
        if self.feature_map is None:
            self.feature_map = fallback_feature_map

    @property
    def size(self) -> int:
        return self.projections.shape[0]


@dataclass
class MatchResult:
    weights: np.ndarray  # (m,), on the simplex
    similarities: np.ndarray  # (m,), cosine values
    target: np.ndarray  # (H, W) weighted aggregate of bank projections
    confidence: float  # max weight
    temperature: float
    degenerate: bool = False


def fallback_feature_map(patch: np.ndarray, factor: int = 8) -> np.ndarray:
    """Deterministic feature map: low-pass, block-downsample, flatten, L2-normalize.

    Usable without a trained network; the trained encoder is the primary map.
    """
    patch = np.asarray(patch, dtype=np.float64)
    smoothed = ndimage.gaussian_filter(patch, sigma=factor / 2.0)
    h, w = smoothed.shape
    hc, wc = (h // factor) * factor, (w // factor) * factor
    if hc < factor or wc < factor:
        raise DimensionError(f"patch {patch.shape} too small for {factor}x downsampling")
    blocks = smoothed[:hc, :wc].reshape(hc // factor, factor, wc // factor, factor)
    feat = blocks.mean(axis=(1, 3)).ravel()
    norm = np.linalg.norm(feat)
    return feat / norm if norm > 0 else feat


def lowpass_filter(v: Volume, cutoff: float, rolloff_frac: float = 0.1) -> Volume:
    """Radial Fourier low-pass with a raised-cosine rolloff above ``cutoff``.

    ``cutoff`` is in 1/Angstrom and must not exceed Nyquist; the rolloff
    spans ``rolloff_frac * cutoff`` (0 gives a hard cut).
    """
    nyquist = 1.0 / (2.0 * v.voxel_size_angstrom)
    if cutoff <= 0 or cutoff > nyquist + 1e-12:
        raise FrequencyError(f"cutoff {cutoff} outside (0, {nyquist}] 1/A")
    freqs = [np.fft.fftfreq(n, d=v.voxel_size_angstrom) for n in v.data.shape]
    fz, fy, fx = np.meshgrid(*freqs, indexing="ij")
    radius = np.sqrt(fz**2 + fy**2 + fx**2)
    width = rolloff_frac * cutoff
    mask = np.ones_like(radius)
    if width > 0:
        t = np.clip((radius - cutoff) / width, 0.0, 1.0)
        mask = 0.5 * (1.0 + np.cos(np.pi * t))
        mask[radius <= cutoff] = 1.0
    else:
        mask[radius > cutoff] = 0.0
    filtered = np.fft.ifftn(np.fft.fftn(v.data) * mask).real
    return Volume(data=filtered.astype(np.float64), voxel_size_angstrom=v.voxel_size_angstrom)


def rotation_matrix_zyz(alpha: float, beta: float, gamma: float) -> np.ndarray:
    """Intrinsic ZYZ Euler rotation matrix (angles in radians)."""
    return Rotation.from_euler("ZYZ", [alpha, beta, gamma]).as_matrix()


def view_rotations(n_views: int, in_plane: int = 1) -> list[np.ndarray]:
    """Quasi-uniform viewing rotations: Fibonacci-sphere axes x in-plane spins."""
    if n_views < 1:
        raise ParameterError(f"n_views must be >= 1, got {n_views}")
    n_dirs = -(-n_views // in_plane)
    rotations = []
    for j in range(n_dirs):
        z = 1.0 - 2.0 * (j + 0.5) / n_dirs
        beta = float(np.arccos(np.clip(z, -1.0, 1.0)))
        alpha = float((j * np.pi * (3.0 - np.sqrt(5.0))) % (2.0 * np.pi))
        for i in range(in_plane):
            if len(rotations) == n_views:
                break
            gamma = 2.0 * np.pi * i / in_plane
            rotations.append(rotation_matrix_zyz(alpha, beta, gamma))
    return rotations


def project_volume(v: Volume, rotation, out_size: int) -> np.ndarray:
    """Parallel-beam projection of the rotated volume along the z axis.

    ``rotation`` is a 3x3 matrix or a ZYZ Euler triple in radians. The volume
    is resampled with trilinear interpolation (zero outside its support) on a
    centered cube of side ``out_size`` and summed along the viewing axis.
    """
    if isinstance(rotation, np.ndarray) and rotation.shape == (3, 3):
        rot = rotation
    else:
        angles = np.asarray(rotation, dtype=np.float64)
        if angles.shape != (3,) or not np.all(np.isfinite(angles)):
            raise ParameterError(f"rotation must be 3x3 or 3 finite Euler angles, got {rotation!r}")
        rot = rotation_matrix_zyz(*angles)
    if not np.all(np.isfinite(rot)):
        raise ParameterError("rotation matrix contains non-finite entries")

    d = max(v.data.shape)
    if out_size < d:
        raise DimensionError(f"out_size {out_size} smaller than volume extent {d}")

    half_out = (out_size - 1) / 2.0
    centers = [(n - 1) / 2.0 for n in v.data.shape]
    idx = np.arange(out_size) - half_out
    zz, yy, xx = np.meshgrid(idx, idx, idx, indexing="ij")
    # physical coordinates are (x, y, z); array axes are (z, y, x)
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()])
    src = rot.T @ pts
    coords = np.stack(
        [src[2] + centers[0], src[1] + centers[1], src[0] + centers[2]]
    )
    sampled = ndimage.map_coordinates(
        v.data.astype(np.float64), coords, order=1, mode="constant", cval=0.0
    ).reshape(out_size, out_size, out_size)
    return sampled.sum(axis=0)


def build_bank(
    v: Volume,
    n_views: int = 64,
    cutoff: float | None = None,
    feature_map=None,
    temperature: float = 0.1,
    out_size: int | None = None,
    in_plane: int = 1,
) -> TargetBank:
    """Construct a target bank from a reference volume.

    Low-pass filters the volume, projects it along ``n_views`` quasi-uniform
    rotations, centers the projection stack, embeds each projection with
    ``feature_map``, and extracts an orthonormal basis of the feature span.
    The surrogate variance is the mean squared deviation of the projections
    from their mean, per pixel.
    """
    if feature_map is None:
        feature_map = fallback_feature_map
    if cutoff is None:
        cutoff = min(1.0 / 20.0, 1.0 / (2.0 * v.voxel_size_angstrom))
    if out_size is None:
        out_size = max(v.data.shape)
    if temperature <= 0:
        raise ParameterError(f"temperature must be > 0, got {temperature}")

    filtered = lowpass_filter(v, cutoff)
    rotations = view_rotations(n_views, in_plane=in_plane)
    stack = np.stack([project_volume(filtered, rot, out_size) for rot in rotations])

    center = stack.mean(axis=0)
    centered = stack - center
    m, h, w = centered.shape
    d = h * w

    sigma2 = float(np.sum(centered**2) / (m * d))
    raw_energy = float(np.sum(stack**2) / (m * d))
    if m < 2 or raw_energy <= 0 or sigma2 <= _DEGENERATE_REL_VARIANCE * raw_energy:
        raise DegenerateBankError(
            f"bank degenerate: {m} views with relative variance "
            f"{sigma2 / raw_energy if raw_energy > 0 else 0.0:.3g}; "
            "use an asymmetric reference or more views"
        )

    features = np.stack([feature_map(p) for p in centered])
    basis = _orthonormal_span(features)
    return TargetBank(
        projections=centered,
        features=features,
        basis=basis,
        sigma2_surrogate=sigma2,
        center=center,
        lowpass_cutoff=cutoff,
        n_views=n_views,
        temperature=temperature,
        feature_map=feature_map,
    )


def _orthonormal_span(features: np.ndarray) -> np.ndarray:
    _, s, vt = np.linalg.svd(features, full_matrices=False)
    if s.size == 0 or s[0] <= 0:
        raise DegenerateBankError("feature span has rank 0")
    rank = int(np.sum(s > _RANK_RTOL * s[0]))
    if rank == 0:
        raise DegenerateBankError("feature span has rank 0")
    return vt[:rank].T


def refresh_bank_features(bank: TargetBank, feature_map) -> TargetBank:
    """Rebuild features and basis with a new feature map; projections unchanged."""
    features = np.stack([feature_map(p) for p in bank.projections])
    basis = _orthonormal_span(features)
    return TargetBank(
        projections=bank.projections,
        features=features,
        basis=basis,
        sigma2_surrogate=bank.sigma2_surrogate,
        center=bank.center,
        lowpass_cutoff=bank.lowpass_cutoff,
        n_views=bank.n_views,
        temperature=bank.temperature,
        feature_map=feature_map,
    )


def project_to_subspace(x_feat: np.ndarray, bank: TargetBank) -> np.ndarray:
    """Orthogonal projection of a feature vector onto the bank feature span."""
    x_feat = np.asarray(x_feat, dtype=np.float64)
    if x_feat.shape != (bank.basis.shape[0],):
        raise DimensionError(
            f"feature dim {x_feat.shape} does not match bank dim ({bank.basis.shape[0]},)"
        )
    return bank.basis @ (bank.basis.T @ x_feat)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max()
    e = np.exp(shifted)
    return e / e.sum()


def match(x: np.ndarray, bank: TargetBank, feature_map=None) -> MatchResult:
    """Match a patch against the bank.

    Computes cosine similarities between the subspace-projected patch feature
    and each bank feature, temperature-softmaxes them into simplex weights,
    and aggregates the bank projections into a per-input target. A patch
    whose projected feature vanishes matches nothing: uniform weights with
    confidence 1/m and the degenerate flag set.
    """
    psi = feature_map if feature_map is not None else bank.feature_map
    x_feat = psi(np.asarray(x))
    projected = project_to_subspace(x_feat, bank)
    norm = np.linalg.norm(projected)
    m = bank.size
    if norm < 1e-12:
        weights = np.full(m, 1.0 / m)
        target = np.tensordot(weights, bank.projections, axes=1)
        return MatchResult(
            weights=weights,
            similarities=np.zeros(m),
            target=target,
            confidence=1.0 / m,
            temperature=bank.temperature,
            degenerate=True,
        )
    feat_norms = np.linalg.norm(bank.features, axis=1)
    sims = (bank.features @ projected) / (feat_norms * norm)
    weights = _softmax(sims / bank.temperature)
    target = np.tensordot(weights, bank.projections, axes=1)
    return MatchResult(
        weights=weights,
        similarities=sims,
        target=target,
        confidence=float(weights.max()),
        temperature=bank.temperature,
        degenerate=False,
    )


BANK_VERSION = 1


def save_bank(bank: TargetBank, path) -> None:
    """Serialize a bank to a single archive (projections as an MRC stack,
    features/basis/center as binary arrays, metadata as JSON).

    Entries carry fixed timestamps so identical banks produce identical bytes.
    """
    meta = {
        "version": BANK_VERSION,
        "m": bank.size,
        "q": int(bank.features.shape[1]),
        "r": int(bank.basis.shape[1]),
        "sigma2": bank.sigma2_surrogate,
        "tau": bank.temperature,
        "cutoff": bank.lowpass_cutoff,
        "n_views": bank.n_views,
    }
    proj_buf = io.BytesIO()
    _write_mrc_bytes(bank.projections.astype(np.float32), proj_buf)

    def npy_bytes(arr):
        buf = io.BytesIO()
        np.save(buf, arr)
        return buf.getvalue()

    entries = [
        ("meta.json", json.dumps(meta, sort_keys=True).encode()),
        ("projections.mrc", proj_buf.getvalue()),
        ("features.npy", npy_bytes(bank.features)),
        ("basis.npy", npy_bytes(bank.basis)),
        ("center.npy", npy_bytes(bank.center)),
    ]
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, payload in entries:
            info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, payload)


def _write_mrc_bytes(stack: np.ndarray, buf: io.BytesIO) -> None:
    import tempfile
    import os

    with tempfile.NamedTemporaryFile(suffix=".mrc", delete=False) as tmp:
        tmp_path = tmp.name
    try:
        write_mrc(Volume(data=stack, voxel_size_angstrom=1.0), tmp_path)
        with open(tmp_path, "rb") as fh:
            buf.write(fh.read())
    finally:
        os.unlink(tmp_path)


def load_bank(path, feature_map=None) -> TargetBank:
    with zipfile.ZipFile(path, "r") as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta["version"] != BANK_VERSION:
            raise ParameterError(f"unsupported bank version {meta['version']}")
        import tempfile
        import os

        with tempfile.NamedTemporaryFile(suffix=".mrc", delete=False) as tmp:
            tmp.write(zf.read("projections.mrc"))
            tmp_path = tmp.name
        try:
            vol = read_mrc(tmp_path)
        finally:
            os.unlink(tmp_path)
        projections = vol.data if isinstance(vol, Volume) else vol.data[np.newaxis]
        features = np.load(io.BytesIO(zf.read("features.npy")))
        basis = np.load(io.BytesIO(zf.read("basis.npy")))
        center = np.load(io.BytesIO(zf.read("center.npy")))
    return TargetBank(
        projections=projections,
        features=features,
        basis=basis,
        sigma2_surrogate=meta["sigma2"],
        center=center,
        lowpass_cutoff=meta["cutoff"],
        n_views=meta["n_views"],
        temperature=meta["tau"],
        feature_map=feature_map,
    )
