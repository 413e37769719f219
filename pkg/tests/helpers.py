"""Independent oracles shared across test modules.

These deliberately avoid the library code paths they check.
"""

import math
import struct

import numpy as np


def mrc_bytes(data: np.ndarray, byte_order: str, pixel: float = 1.0) -> bytes:
    """Byte-level MRC2014 writer for mode-2 files, independent of the library."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[None]
    nz, ny, nx = data.shape
    bo = byte_order
    header = bytearray(1024)
    struct.pack_into(bo + "4i", header, 0, nx, ny, nz, 2)
    struct.pack_into(bo + "3i", header, 28, nx, ny, nz)
    struct.pack_into(bo + "3f", header, 40, nx * pixel, ny * pixel, nz * pixel)
    struct.pack_into(bo + "3f", header, 52, 90.0, 90.0, 90.0)
    struct.pack_into(bo + "3i", header, 64, 1, 2, 3)
    struct.pack_into(bo + "3f", header, 76, float(data.min()), float(data.max()),
                     float(data.mean()))
    header[208:212] = b"MAP "
    header[212:216] = b"\x44\x44\x00\x00" if bo == "<" else b"\x11\x11\x00\x00"
    swapped = data.astype(bo + "f4")
    return bytes(header) + swapped.tobytes()


def raised_cosine_ramp(overlap: int) -> np.ndarray:
    """Closed-form blend profile across an overlap of the given width."""
    u = (np.arange(overlap) + 0.5) / overlap
    return 0.5 - 0.5 * np.cos(np.pi * u)


def candidate_edges(pred: np.ndarray, gt: np.ndarray, threshold: float):
    edges = []
    for i in range(len(pred)):
        for j in range(len(gt)):
            d = math.dist(pred[i], gt[j])
            if d <= threshold:
                edges.append((i, j, d))
    return edges


def _padded_key(dists, n_pad):
    seq = sorted(dists)
    return tuple(seq + [math.inf] * (n_pad - len(seq)))


def brute_force_nearest_first_matching(pred, gt, threshold):
    """Exhaustive optimum of the nearest-first objective.

    Enumerates every one-to-one matching among the candidate pairs and
    returns the one whose ascending distance sequence is lexicographically
    smallest (padded with +inf, so larger matchings beat prefix-equal smaller
    ones). Greedy nearest-first provably attains this optimum, which makes
    the enumeration an independent reference for it.
    """
    edges = candidate_edges(np.asarray(pred), np.asarray(gt), threshold)
    n_max = min(len(pred), len(gt))
    best = {"key": _padded_key([], n_max), "pairs": []}

    def recurse(k, used_p, used_g, pairs, dists):
        if k == len(edges):
            key = _padded_key(dists, n_max)
            if key < best["key"]:
                best["key"] = key
                best["pairs"] = list(pairs)
            return
        i, j, d = edges[k]
        if i not in used_p and j not in used_g:
            recurse(k + 1, used_p | {i}, used_g | {j}, pairs + [(i, j)], dists + [d])
        recurse(k + 1, used_p, used_g, pairs, dists)

    recurse(0, frozenset(), frozenset(), [], [])
    return best["pairs"]


def brute_force_max_cardinality(pred, gt, threshold):
    """Maximum-cardinality one-to-one matching size (independent reference)."""
    edges = candidate_edges(np.asarray(pred), np.asarray(gt), threshold)

    best = [0]

    def recurse(k, used_p, used_g, count):
        if count + (len(edges) - k) <= best[0]:
            return
        if k == len(edges):
            best[0] = max(best[0], count)
            return
        i, j, _ = edges[k]
        if i not in used_p and j not in used_g:
            recurse(k + 1, used_p | {i}, used_g | {j}, count + 1)
        recurse(k + 1, used_p, used_g, count)

    recurse(0, frozenset(), frozenset(), 0)
    return best[0]


def gaussian_blob_mass(std: float, amplitude: float) -> float:
    """Analytic integral of an isotropic 3-D Gaussian blob."""
    return amplitude * (2.0 * math.pi) ** 1.5 * std**3
