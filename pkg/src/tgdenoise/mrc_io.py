"""MRC2014 I/O plus patch tiling and overlap-blended stitching.

Only modes 0 (int8), 1 (int16) and 2 (float32) are read; files are always
written as mode 2, little-endian, so that write -> read round-trips are
bit-exact on the data section.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionError,
    LayoutError,
    MrcFormatError,
    ParameterError,
    TruncatedFileError,
    UnsupportedModeError,
)

HEADER_BYTES = 1024
_MODE_DTYPES = {0: "i1", 1: "i2", 2: "f4"}
_MACHST_LITTLE = b"\x44\x44\x00\x00"
_MACHST_BIG = b"\x11\x11\x00\x00"


@dataclass
class Micrograph:
    """A single 2-D grayscale image with pixel-size metadata."""

    data: np.ndarray
    pixel_size_angstrom: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    provenance: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2 or self.data.shape[0] < 1 or self.data.shape[1] < 1:
            raise DimensionError(f"micrograph data must be 2-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("micrograph contains non-finite values")
        if self.pixel_size_angstrom <= 0:
            raise ParameterError(f"pixel size must be positive, got {self.pixel_size_angstrom}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


@dataclass
class Volume:
    """A 3-D density map on a cubic voxel grid."""

    data: np.ndarray
    voxel_size_angstrom: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise DimensionError(f"volume data must be 3-D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("volume contains non-finite values")
        if self.voxel_size_angstrom <= 0:
            raise ParameterError(f"voxel size must be positive, got {self.voxel_size_angstrom}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class TileLayout:
    """Placement of fixed-size tiles covering an image."""

    tile_size: int
    overlap: int
    image_shape: tuple[int, int]
    grid: list[tuple[int, int, int, int]] = field(default_factory=list)  # (row, col, y, x)


def _unpack_header(raw: bytes):
    if len(raw) < HEADER_BYTES:
        raise MrcFormatError(f"header truncated: expected {HEADER_BYTES} bytes, got {len(raw)}")
    if raw[208:212] != b"MAP ":
        raise MrcFormatError(f"field MAP: expected b'MAP ', got {raw[208:212]!r}")
    machst = raw[212:216]
    if machst[0] == 0x44:
        order = "<"
    elif machst[0] == 0x11:
        order = ">"
    else:
        raise MrcFormatError(f"field MACHST: unrecognized machine stamp {machst!r}")

    nx, ny, nz, mode = struct.unpack(order + "4i", raw[0:16])
    if nx < 1 or ny < 1 or nz < 1:
        raise MrcFormatError(f"field NX/NY/NZ: dimensions must be >= 1, got ({nx}, {ny}, {nz})")
    if mode not in _MODE_DTYPES:
        raise UnsupportedModeError(f"field MODE: mode {mode} not supported (want 0, 1 or 2)")
    mx, = struct.unpack(order + "i", raw[28:32])
    xlen, = struct.unpack(order + "f", raw[40:44])
    nsymbt, = struct.unpack(order + "i", raw[92:96])
    if nsymbt < 0:
        raise MrcFormatError(f"field NSYMBT: negative extended-header size {nsymbt}")
    xorg, yorg = struct.unpack(order + "2f", raw[196:204])
    nlabl, = struct.unpack(order + "i", raw[220:224])
    label = ""
    if 1 <= nlabl <= 10:
        label = raw[224:304].decode("ascii", errors="replace").rstrip("\x00 ")

    pixel = float(xlen) / mx if mx > 0 and xlen > 0 else 1.0
    return order, (nx, ny, nz), mode, nsymbt, pixel, (float(xorg), float(yorg)), label


def read_mrc(path) -> Micrograph | Volume:
    """Read an MRC2014 file.

    Returns a :class:`Volume` when NZ > 1, otherwise a :class:`Micrograph`.
    Byte order is taken from the machine stamp; modes 0/1/2 are converted to
    float32 (exact for the integer modes).
    """
    with open(path, "rb") as fh:
        raw = fh.read(HEADER_BYTES)
        order, (nx, ny, nz), mode, nsymbt, pixel, origin, label = _unpack_header(raw)
        fh.seek(HEADER_BYTES + nsymbt)
        dtype = np.dtype(order + _MODE_DTYPES[mode])
        expected = nx * ny * nz * dtype.itemsize
        payload = fh.read(expected)
    if len(payload) != expected:
        raise TruncatedFileError(
            f"data section truncated: expected {expected} bytes, got {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx).astype(np.float32)
    if nz > 1:
        return Volume(data=data, voxel_size_angstrom=pixel)
    return Micrograph(
        data=data[0], pixel_size_angstrom=pixel, origin=origin, provenance=label
    )


def write_mrc(obj: Micrograph | Volume, path) -> None:
    """Write a micrograph or volume as a mode-2 little-endian MRC2014 file."""
    if isinstance(obj, Micrograph):
        data = obj.data[np.newaxis, :, :]
        pixel = obj.pixel_size_angstrom
        origin = (obj.origin[0], obj.origin[1], 0.0)
        label = obj.provenance
    elif isinstance(obj, Volume):
        data = obj.data
        pixel = obj.voxel_size_angstrom
        origin = (0.0, 0.0, 0.0)
        label = ""
    else:
        raise TypeError(f"cannot write object of type {type(obj).__name__}")

    data = np.ascontiguousarray(data, dtype="<f4")
    if not np.all(np.isfinite(data)):
        raise ParameterError("refusing to write non-finite data")
    nz, ny, nx = data.shape

    header = bytearray(HEADER_BYTES)
    struct.pack_into("<4i", header, 0, nx, ny, nz, 2)
    struct.pack_into("<3i", header, 28, nx, ny, nz)  # mx, my, mz
    struct.pack_into("<3f", header, 40, nx * pixel, ny * pixel, nz * pixel)
    struct.pack_into("<3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into("<3i", header, 64, 1, 2, 3)  # mapc, mapr, maps
    struct.pack_into(
        "<3f", header, 76, float(data.min()), float(data.max()), float(data.mean())
    )
    struct.pack_into("<i", header, 108, 20140)  # nversion
    struct.pack_into("<3f", header, 196, *origin)
    header[208:212] = b"MAP "
    header[212:216] = _MACHST_LITTLE
    struct.pack_into("<f", header, 216, float(data.std()))
    if label:
        encoded = label.encode("ascii", errors="replace")[:80]
        struct.pack_into("<i", header, 220, 1)
        header[224 : 224 + len(encoded)] = encoded

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(data.tobytes())


def tile(m: Micrograph, tile_size: int, overlap: int) -> tuple[TileLayout, list[np.ndarray]]:
    """Cut an image into full-size tiles on a sliding-window grid.

    Tiles advance by ``tile_size - overlap``; the final row/column is shifted
    inward so every tile stays full-size and every pixel is covered.
    """
    h, w = m.data.shape
    if tile_size > min(h, w):
        raise DimensionError(f"tile size {tile_size} exceeds image {h}x{w}")
    if not 0 <= overlap < tile_size:
        raise ParameterError(f"overlap must be in [0, tile_size), got {overlap}")

    stride = tile_size - overlap

    def offsets(extent: int) -> list[int]:
        offs = list(range(0, extent - tile_size + 1, stride))
        if offs[-1] + tile_size < extent:
            offs.append(extent - tile_size)
        return offs

    layout = TileLayout(tile_size=tile_size, overlap=overlap, image_shape=(h, w))
    tiles = []
    for r, y in enumerate(offsets(h)):
        for c, x in enumerate(offsets(w)):
            layout.grid.append((r, c, y, x))
            tiles.append(m.data[y : y + tile_size, x : x + tile_size].copy())
    return layout, tiles


def _axis_window(tile_size: int, overlap: int) -> np.ndarray:
    # raised-cosine tapers over the declared overlap; half-pixel offset keeps
    # weights strictly positive so border pixels survive normalization
    w = np.ones(tile_size)
    if overlap > 0:
        u = (np.arange(overlap) + 0.5) / overlap
        ramp = 0.5 - 0.5 * np.cos(np.pi * u)
        w[:overlap] *= ramp
        w[tile_size - overlap :] *= ramp[::-1]
    return w


def stitch(layout: TileLayout, tiles: list[np.ndarray], pixel_size_angstrom: float = 1.0,
           origin: tuple[float, float] = (0.0, 0.0), provenance: str = "") -> Micrograph:
    """Reassemble tiles into one image, blending overlaps.

    Each tile is weighted by a separable raised-cosine window and the
    accumulated weight is divided out, so stitching tiles cut from an image
    reproduces that image.
    """
    if len(tiles) != len(layout.grid):
        raise LayoutError(f"layout expects {len(layout.grid)} tiles, got {len(tiles)}")
    t = layout.tile_size
    win = np.outer(_axis_window(t, layout.overlap), _axis_window(t, layout.overlap))
    acc = np.zeros(layout.image_shape, dtype=np.float64)
    wacc = np.zeros(layout.image_shape, dtype=np.float64)
    for (_, _, y, x), patch in zip(layout.grid, tiles):
        patch = np.asarray(patch)
        if patch.shape != (t, t):
            raise LayoutError(f"tile shape {patch.shape} does not match tile size {t}")
        acc[y : y + t, x : x + t] += win * patch
        wacc[y : y + t, x : x + t] += win
    out = (acc / wacc).astype(np.float32)
    return Micrograph(
        data=out,
        pixel_size_angstrom=pixel_size_angstrom,
        origin=origin,
        provenance=provenance,
    )
