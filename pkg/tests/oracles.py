"""Independent brute-force oracles for the geometry descriptor.

Everything here is deliberately written with plain Python loops and, where an
algorithm is needed, a different one than the library uses (Jarvis march
instead of monotone chain, eigvalsh instead of the closed-form quadratic).
These are the reference implementations the acceptance suite trusts.
"""

from __future__ import annotations

import math

import numpy as np


def _pixels(mask) -> list[tuple[int, int]]:
    m = np.asarray(mask)
    out = []
    for y in range(m.shape[0]):
        for x in range(m.shape[1]):
            if m[y, x]:
                out.append((x, y))
    return out


def oracle_area(mask) -> float:
    m = np.asarray(mask)
    h, w = m.shape
    count = 0
    for y in range(h):
        for x in range(w):
            if m[y, x]:
                count += 1
    return count / (h * w)


def oracle_centroid(mask) -> tuple[float, float]:
    m = np.asarray(mask)
    h, w = m.shape
    count = 0
    sx = 0
    sy = 0
    for y in range(h):
        for x in range(w):
            if m[y, x]:
                count += 1
                sx += x
                sy += y
    if count == 0:
        return (0.5, 0.5)
    # pixel centers: mean(x) + 1/2, normalized by width; exact integer core
    return ((2 * sx + count) / (2 * count * w), (2 * sy + count) / (2 * count * h))


def oracle_bbox(mask) -> tuple[float, float, float, float]:
    m = np.asarray(mask)
    h, w = m.shape
    xs = [x for (x, _) in _pixels(m)]
    ys = [y for (_, y) in _pixels(m)]
    if not xs:
        return (0.0, 0.0, 0.0, 0.0)
    return (min(xs) / w, min(ys) / h, (max(xs) + 1) / w, (max(ys) + 1) / h)


def oracle_perimeter_edges(mask) -> int:
    """Exposed 4-neighbor edges, image border included."""
    m = np.asarray(mask)
    h, w = m.shape
    edges = 0
    for y in range(h):
        for x in range(w):
            if not m[y, x]:
                continue
            for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                nx, ny = x + dx, y + dy
                if nx < 0 or ny < 0 or nx >= w or ny >= h or not m[ny, nx]:
                    edges += 1
    return edges


def _row_extremes(mask) -> list[tuple[int, int]]:
    m = np.asarray(mask)
    pts = []
    for y in range(m.shape[0]):
        row = [x for x in range(m.shape[1]) if m[y, x]]
        if row:
            pts.append((row[0], y))
            if row[-1] != row[0]:
                pts.append((row[-1], y))
    return pts


def oracle_hull_area(mask) -> float:
    """Convex hull area via Jarvis march (gift wrapping) and shoelace.

    Interior pixels are dropped first (per-row extremes); that cannot remove a
    hull vertex. Collinear or pointlike sets return the pixel count, matching
    the library's degenerate convention.
    """
    m = np.asarray(mask)
    area_px = sum(1 for _ in _pixels(m))
    if area_px == 0:
        raise ValueError("empty mask")
    pts = sorted(set(_row_extremes(m)))
    if len(pts) <= 2:
        return float(area_px)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    def dist2(a, b):
        return (a[0] - b[0]) ** 2 + (a[1] - b[1]) ** 2

    start = min(pts)
    hull = [start]
    current = start
    while True:
        candidate = pts[0] if pts[0] != current else pts[1 % len(pts)]
        for p in pts:
            if p == current:
                continue
            c = cross(current, candidate, p)
            if c < 0 or (c == 0 and dist2(current, p) > dist2(current, candidate)):
                candidate = p
        if candidate == start:
            break
        hull.append(candidate)
        current = candidate
        if len(hull) > len(pts) + 1:
            raise RuntimeError("gift wrapping failed to close")
    if len(hull) <= 2:
        return float(area_px)
    twice = 0
    for i in range(len(hull)):
        x0, y0 = hull[i]
        x1, y1 = hull[(i + 1) % len(hull)]
        twice += x0 * y1 - x1 * y0
    if twice == 0:
        return float(area_px)
    return abs(twice) / 2.0


def oracle_ecc_orientation(mask) -> tuple[float, float]:
    """Eccentricity and normalized orientation from loop-computed moments.

    Eigenvalues come from numpy's symmetric eigensolver rather than a closed
    form. Returns (eccentricity, orientation in [0, 1]).
    """
    pix = _pixels(mask)
    n = len(pix)
    if n == 0:
        return (0.0, 0.0)
    xb = sum(p[0] for p in pix) / n
    yb = sum(p[1] for p in pix) / n
    mu20 = sum((p[0] - xb) ** 2 for p in pix) / n
    mu02 = sum((p[1] - yb) ** 2 for p in pix) / n
    mu11 = sum((p[0] - xb) * (p[1] - yb) for p in pix) / n
    lam2, lam1 = np.linalg.eigvalsh(np.array([[mu20, mu11], [mu11, mu02]]))
    lam1 = float(lam1)
    lam2 = max(float(lam2), 0.0)
    if lam1 <= 1e-12:
        return (0.0, 0.5)
    ecc = math.sqrt(max(0.0, 1.0 - lam2 / lam1))
    if (lam1 - lam2) <= 1e-12 * max(lam1, 1.0):
        theta = 0.0
    else:
        theta = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    return (ecc, (theta + math.pi / 2.0) / math.pi)


def oracle_solidity(mask) -> float:
    m = np.asarray(mask)
    area_px = sum(1 for _ in _pixels(m))
    if area_px == 0:
        return 0.0
    return min(area_px / oracle_hull_area(m), 1.0)


def oracle_descriptor_vector(mask) -> np.ndarray:
    """Full 13-vector in canonical block order, computed only from oracles."""
    m = np.asarray(mask)
    h, w = m.shape
    pix = _pixels(m)
    n = len(pix)
    if n == 0:
        return np.array([0.0, 0.5, 0.5, 0, 0, 0, 0, 1.0, 0, 0, 0, 0, 0], dtype=np.float64)
    cx, cy = oracle_centroid(m)
    bbox = oracle_bbox(m)
    xs = [p[0] for p in pix]
    ys = [p[1] for p in pix]
    w_box = max(xs) - min(xs) + 1
    h_box = max(ys) - min(ys) + 1
    aspect = min(w_box / h_box, 10.0) / 10.0
    edges = oracle_perimeter_edges(m)
    perim = min(edges / (2 * (h + w)), 1.0)
    compact = min(4.0 * math.pi * n / edges**2, 1.0)
    sol = oracle_solidity(m)
    ecc, orient = oracle_ecc_orientation(m)
    return np.array(
        [n / (h * w), cx, cy, *bbox, aspect, perim, compact, sol, ecc, orient],
        dtype=np.float64,
    )


def random_mask(rng: np.random.Generator, max_side: int = 64) -> np.ndarray:
    """A varied random mask: noise fields, rectangles, discs, rings, edge cases."""
    h = int(rng.integers(1, max_side + 1))
    w = int(rng.integers(1, max_side + 1))
    kind = int(rng.integers(0, 6))
    if kind == 0:
        p = float(rng.uniform(0.02, 0.9))
        return (rng.random((h, w)) < p).astype(np.uint8)
    if kind == 1:  # random rectangle
        m = np.zeros((h, w), dtype=np.uint8)
        y0 = int(rng.integers(0, h))
        x0 = int(rng.integers(0, w))
        y1 = int(rng.integers(y0, h))
        x1 = int(rng.integers(x0, w))
        m[y0 : y1 + 1, x0 : x1 + 1] = 1
        return m
    if kind == 2:  # disc or ring
        yy, xx = np.mgrid[0:h, 0:w]
        cy0 = rng.uniform(0, h)
        cx0 = rng.uniform(0, w)
        r = rng.uniform(1, max(h, w) / 2)
        d2 = (yy + 0.5 - cy0) ** 2 + (xx + 0.5 - cx0) ** 2
        m = (d2 <= r * r).astype(np.uint8)
        if rng.random() < 0.3:
            m &= (d2 >= (0.5 * r) ** 2).astype(np.uint8)
        return m
    if kind == 3:  # empty or full
        return np.full((h, w), int(rng.integers(0, 2)), dtype=np.uint8)
    if kind == 4:  # single pixel / row / column
        m = np.zeros((h, w), dtype=np.uint8)
        which = int(rng.integers(0, 3))
        if which == 0:
            m[int(rng.integers(0, h)), int(rng.integers(0, w))] = 1
        elif which == 1:
            m[int(rng.integers(0, h)), :] = 1
        else:
            m[:, int(rng.integers(0, w))] = 1
        return m
    # diagonal line (collinear hull degeneracy)
    m = np.zeros((h, w), dtype=np.uint8)
    for i in range(min(h, w)):
        m[i, i] = 1
    return m
