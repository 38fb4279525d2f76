"""Geometric shape descriptors extracted from binary segmentation masks.

A mask is a 2-D array whose entries are exactly 0 or 1 (background /
foreground). Pixel ``(x, y)`` (column ``x``, row ``y``) is treated as a unit
square centered at ``(x + 0.5, y + 0.5)``; every reported quantity is
normalized to [0, 1] by the image width ``W`` and height ``H`` so the
descriptor can serve directly as a regression target. Under this convention
horizontal/vertical flips act as exact involutions on the descriptor
(``cx -> 1 - cx`` and so on), which the test-time consensus relies on.

Exact quantities (area, centroid, bounding box, perimeter) are computed with
integer arithmetic followed by a single float division, so independent
enumeration orders reproduce them bit for bit.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
from PIL import Image

__all__ = [
    "DegenerateMaskError",
    "GeometryDescriptor",
    "ViewTransform",
    "GEO_BLOCKS",
    "GEO_VECTOR_SIZE",
    "as_mask",
    "extract_geometry",
    "area_centroid",
    "boundary_edge_count",
    "convex_hull_area",
    "map_centroid_between_views",
    "read_mask_image",
    "write_mask_image",
]


class DegenerateMaskError(ValueError):
    """Raised when an operation needs foreground pixels and the mask has none."""


# Canonical layout of the 13-scalar geometry vector: 9 named property blocks.
# Block order is load bearing; regression heads and the geometry loss group
# scalars by these slices.
GEO_BLOCKS: tuple[tuple[str, slice], ...] = (
    ("area", slice(0, 1)),
    ("centroid", slice(1, 3)),
    ("bbox", slice(3, 7)),
    ("aspect_ratio", slice(7, 8)),
    ("perimeter", slice(8, 9)),
    ("compactness", slice(9, 10)),
    ("solidity", slice(10, 11)),
    ("eccentricity", slice(11, 12)),
    ("orientation", slice(12, 13)),
)
GEO_VECTOR_SIZE = 13

# Aspect ratio is min(w/h, 10)/10; the cap keeps extreme bars bounded.
_ASPECT_CAP = 10.0


@dataclass(frozen=True)
class GeometryDescriptor:
    """Normalized shape properties of one binary mask.

    Attributes
    ----------
    area : float
        Foreground fraction, ``A / (H * W)``.
    centroid : tuple of float
        ``(cx, cy)`` center of mass of pixel centers, normalized by ``W``/``H``.
    bbox : tuple of float
        Half-open box ``(x_min, y_min, x_max, y_max)`` in normalized
        coordinates; contains the centroid whenever the mask is nonempty.
    aspect_ratio : float
        ``min(w_box / h_box, 10) / 10`` where the box extents are in pixels.
    perimeter : float
        Exposed 4-neighbor edge count (image border counts) over ``2 (H + W)``,
        clamped to 1 so fragmented masks stay regressable by a sigmoid head.
    compactness : float
        ``min(4 pi A / P^2, 1)`` with ``A`` in pixels and ``P`` the edge count.
    solidity : float
        Pixel count over convex-hull area of pixel centers, clamped to 1.
    eccentricity : float
        ``sqrt(1 - l2 / l1)`` from the coordinate covariance eigenvalues.
    orientation : float
        Major-axis angle mapped from [-pi/2, pi/2] to [0, 1].
    """

    area: float
    centroid: tuple[float, float]
    bbox: tuple[float, float, float, float]
    aspect_ratio: float
    perimeter: float
    compactness: float
    solidity: float
    eccentricity: float
    orientation: float

    def to_vector(self) -> np.ndarray:
        """Pack into the canonical float64 13-vector (see GEO_BLOCKS)."""
        return np.array(
            [self.area, *self.centroid, *self.bbox, self.aspect_ratio,
             self.perimeter, self.compactness, self.solidity,
             self.eccentricity, self.orientation],
            dtype=np.float64,
        )

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "GeometryDescriptor":
        v = np.asarray(vec, dtype=np.float64).reshape(-1)
        if v.size != GEO_VECTOR_SIZE:
            raise ValueError(f"geometry vector must have {GEO_VECTOR_SIZE} entries, got {v.size}")
        return cls(
            area=float(v[0]),
            centroid=(float(v[1]), float(v[2])),
            bbox=(float(v[3]), float(v[4]), float(v[5]), float(v[6])),
            aspect_ratio=float(v[7]),
            perimeter=float(v[8]),
            compactness=float(v[9]),
            solidity=float(v[10]),
            eccentricity=float(v[11]),
            orientation=float(v[12]),
        )

    def to_json_dict(self) -> dict:
        return {
            "area": self.area,
            "centroid": list(self.centroid),
            "bbox": list(self.bbox),
            "aspect_ratio": self.aspect_ratio,
            "perimeter": self.perimeter,
            "compactness": self.compactness,
            "solidity": self.solidity,
            "eccentricity": self.eccentricity,
            "orientation": self.orientation,
        }


# Returned for an empty mask: centered centroid, square aspect, zeros elsewhere.
EMPTY_DESCRIPTOR = GeometryDescriptor(
    area=0.0,
    centroid=(0.5, 0.5),
    bbox=(0.0, 0.0, 0.0, 0.0),
    aspect_ratio=1.0,
    perimeter=0.0,
    compactness=0.0,
    solidity=0.0,
    eccentricity=0.0,
    orientation=0.0,
)


def as_mask(arr: np.ndarray) -> np.ndarray:
    """Validate and normalize a mask-like array to uint8 {0, 1}.

    Accepts bool or numeric arrays whose values are exactly 0/1; anything else
    (wrong rank, empty axes, other values) raises ValueError.
    """
    a = np.asarray(arr)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"mask must be 2-D and nonempty, got shape {a.shape}")
    if a.dtype == bool:
        return a.astype(np.uint8)
    vals = np.unique(a)
    if not np.isin(vals, (0, 1)).all():
        raise ValueError("mask values must be exactly 0 or 1")
    return a.astype(np.uint8)


def boundary_edge_count(mask: np.ndarray) -> int:
    """Count exposed pixel edges under 4-connectivity.

    An edge is exposed when a foreground pixel borders background or the image
    boundary, so a full-frame mask has count ``2 (H + W)``.
    """
    m = as_mask(mask).astype(bool)
    padded = np.pad(m, 1, constant_values=False)
    count = 0
    # Neighbor views of the padded array in the four axis directions.
    count += int(np.count_nonzero(m & ~padded[:-2, 1:-1]))  # up
    count += int(np.count_nonzero(m & ~padded[2:, 1:-1]))   # down
    count += int(np.count_nonzero(m & ~padded[1:-1, :-2]))  # left
    count += int(np.count_nonzero(m & ~padded[1:-1, 2:]))   # right
    return count


def _hull_reduced_points(mask_bool: np.ndarray) -> list[tuple[int, int]]:
    """Per-row extreme pixels (x, y); interior pixels cannot be hull vertices."""
    pts: list[tuple[int, int]] = []
    for y in np.nonzero(mask_bool.any(axis=1))[0]:
        xs = np.nonzero(mask_bool[y])[0]
        x0, x1 = int(xs[0]), int(xs[-1])
        pts.append((x0, int(y)))
        if x1 != x0:
            pts.append((x1, int(y)))
    return pts


def convex_hull_area(mask: np.ndarray) -> float:
    """Area of the convex hull of foreground pixel centers.

    Monotone-chain hull on integer coordinates with exact integer cross
    products and shoelace sum, so the result is exact (a multiple of 0.5).
    Degenerate inputs (single pixel or all pixels collinear) return the pixel
    count, which makes solidity come out as 1 for them.
    """
    m = as_mask(mask).astype(bool)
    area_px = int(m.sum())
    if area_px == 0:
        raise DegenerateMaskError("convex hull of an empty mask is undefined")
    pts = sorted(set(_hull_reduced_points(m)))
    if len(pts) <= 2:
        return float(area_px)

    def cross(o: tuple[int, int], a: tuple[int, int], b: tuple[int, int]) -> int:
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple[int, int]] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[int, int]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) <= 2:
        return float(area_px)
    twice_area = 0
    for i, (x0, y0) in enumerate(hull):
        x1, y1 = hull[(i + 1) % len(hull)]
        twice_area += x0 * y1 - x1 * y0
    if twice_area == 0:
        return float(area_px)
    return abs(twice_area) / 2.0


def _moments_eccentricity_orientation(xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    """Eccentricity and raw orientation angle from coordinate covariance.

    Eigenvalues of [[mu20, mu11], [mu11, mu02]] via the closed-form quadratic;
    the angle is 0.5 * atan2(2 mu11, mu20 - mu02) in (-pi/2, pi/2]. Isotropic
    or pointlike distributions report (0, 0).
    """
    xb = xs.mean()
    yb = ys.mean()
    dx = xs - xb
    dy = ys - yb
    mu20 = float((dx * dx).mean())
    mu02 = float((dy * dy).mean())
    mu11 = float((dx * dy).mean())
    half_trace = 0.5 * (mu20 + mu02)
    disc = math.sqrt((0.5 * (mu20 - mu02)) ** 2 + mu11 * mu11)
    lam1 = half_trace + disc
    lam2 = max(half_trace - disc, 0.0)
    if lam1 <= 1e-12:
        return 0.0, 0.0
    ecc = math.sqrt(max(0.0, 1.0 - lam2 / lam1))
    if disc <= 1e-12 * max(lam1, 1.0):
        # lam1 == lam2: no major axis direction.
        return ecc, 0.0
    theta = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    return ecc, theta


def extract_geometry(mask: np.ndarray) -> GeometryDescriptor:
    """Compute the full 9-property descriptor of a binary mask.

    An empty mask returns the default descriptor (area 0, centroid (0.5, 0.5),
    aspect 1, everything else 0) instead of raising.
    """
    m = as_mask(mask).astype(bool)
    height, width = m.shape
    area_px = int(m.sum())
    if area_px == 0:
        return EMPTY_DESCRIPTOR

    ys, xs = np.nonzero(m)
    sx = int(xs.sum(dtype=np.int64))
    sy = int(ys.sum(dtype=np.int64))
    # mean(x) + 0.5 over W, kept in integers until one final division.
    cx = (2 * sx + area_px) / (2 * area_px * width)
    cy = (2 * sy + area_px) / (2 * area_px * height)

    x0, x1 = int(xs.min()), int(xs.max())
    y0, y1 = int(ys.min()), int(ys.max())
    bbox = (x0 / width, y0 / height, (x1 + 1) / width, (y1 + 1) / height)
    w_box = x1 - x0 + 1
    h_box = y1 - y0 + 1
    aspect = min(w_box / h_box, _ASPECT_CAP) / _ASPECT_CAP

    edges = boundary_edge_count(m)
    perimeter = min(edges / (2 * (height + width)), 1.0)
    compactness = min(4.0 * math.pi * area_px / float(edges) ** 2, 1.0)

    hull_area = convex_hull_area(m)
    solidity = min(area_px / hull_area, 1.0)

    ecc, theta = _moments_eccentricity_orientation(
        xs.astype(np.float64), ys.astype(np.float64)
    )
    orientation = (theta + math.pi / 2.0) / math.pi

    return GeometryDescriptor(
        area=area_px / (height * width),
        centroid=(cx, cy),
        bbox=bbox,
        aspect_ratio=aspect,
        perimeter=perimeter,
        compactness=compactness,
        solidity=solidity,
        eccentricity=ecc,
        orientation=orientation,
    )


def area_centroid(mask: np.ndarray) -> tuple[float, tuple[float, float]]:
    """Area fraction and normalized centroid only (cheap path for consensus).

    Matches extract_geometry bit for bit; an empty mask gives (0, (0.5, 0.5)).
    """
    m = as_mask(mask).astype(bool)
    height, width = m.shape
    area_px = int(m.sum())
    if area_px == 0:
        return 0.0, (0.5, 0.5)
    ys, xs = np.nonzero(m)
    sx = int(xs.sum(dtype=np.int64))
    sy = int(ys.sum(dtype=np.int64))
    cx = (2 * sx + area_px) / (2 * area_px * width)
    cy = (2 * sy + area_px) / (2 * area_px * height)
    return area_px / (height * width), (cx, cy)


class ViewTransform(enum.Enum):
    """The four flip views used by test-time consensus. Each is its own inverse."""

    IDENTITY = "identity"
    HFLIP = "hflip"
    VFLIP = "vflip"
    HVFLIP = "hvflip"

    @property
    def inverse(self) -> "ViewTransform":
        return self

    def apply(self, arr: np.ndarray) -> np.ndarray:
        """Apply the flip to a (H, W) or (H, W, C) array. Always copies."""
        a = np.asarray(arr)
        if self is ViewTransform.IDENTITY:
            return a.copy()
        if self is ViewTransform.HFLIP:
            return a[:, ::-1].copy()
        if self is ViewTransform.VFLIP:
            return a[::-1, :].copy()
        return a[::-1, ::-1].copy()


def map_centroid_between_views(
    centroid: tuple[float, float], transform: ViewTransform
) -> tuple[float, float]:
    """Map a normalized centroid from the original frame into a flipped view.

    Because flips are involutions this is also the view-to-original mapping.
    Exact under the half-pixel-center convention used by extract_geometry.
    """
    cx, cy = centroid
    if transform in (ViewTransform.HFLIP, ViewTransform.HVFLIP):
        cx = 1.0 - cx
    if transform in (ViewTransform.VFLIP, ViewTransform.HVFLIP):
        cy = 1.0 - cy
    return (cx, cy)


def read_mask_image(path) -> np.ndarray:
    """Load an 8-bit grayscale mask file; values >= 128 become foreground."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr >= 128).astype(np.uint8)


def write_mask_image(path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as an 8-bit grayscale image (foreground = 255)."""
    m = as_mask(mask)
    Image.fromarray((m * 255).astype(np.uint8), mode="L").save(path)
