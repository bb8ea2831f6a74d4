"""Deterministic pixel-level kernels for stain analysis.

Beer-Lambert optical density, H-DAB colour deconvolution, Otsu
thresholding, scale-normalised Laplacian-of-Gaussian blob detection,
Euclidean point clustering and convex hull rasterisation.  All
functions are pure and operate on plain numpy arrays; nothing here
touches the network stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage


class SingularBasisError(ValueError):
    """Stain matrix is numerically singular and cannot be inverted."""


class ShapeMismatchError(ValueError):
    """Arrays that must share a shape do not."""


# Ruifrok-Johnston H-DAB absorbance directions (rows: hematoxylin,
# eosin, DAB), renormalised to unit Euclidean norm per row.
_HED_RAW = np.array(
    [
        [0.65, 0.70, 0.29],
        [0.07, 0.99, 0.11],
        [0.27, 0.57, 0.78],
    ],
    dtype=np.float64,
)
HED_BASIS = _HED_RAW / np.linalg.norm(_HED_RAW, axis=1, keepdims=True)


@dataclass
class StainImage:
    """Per-pixel stain concentrations (H, E, DAB) in optical density units.

    Negative concentrations are allowed; consumers that need physical
    values clip at zero themselves so that compose/deconvolve stays an
    exact round trip.
    """

    channels: np.ndarray  # (H, W, 3) float
    stain_basis: np.ndarray = field(default_factory=lambda: HED_BASIS.copy())

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        self.stain_basis = np.asarray(self.stain_basis, dtype=np.float64)
        if self.channels.ndim != 3 or self.channels.shape[2] != 3:
            raise ShapeMismatchError(f"expected (H, W, 3) channels, got {self.channels.shape}")
        if not np.all(np.isfinite(self.channels)):
            raise ValueError("stain concentrations must be finite")

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.channels[..., 0]

    @property
    def eosin(self) -> np.ndarray:
        return self.channels[..., 1]

    @property
    def dab(self) -> np.ndarray:
        return self.channels[..., 2]


@dataclass(frozen=True)
class Blob:
    """Single scale-space detection (sub-pixel centre, scale, response)."""

    cx: float
    cy: float
    sigma: float
    response: float


@dataclass(frozen=True)
class BlobDetectionConfig:
    sigmas: tuple  # strictly increasing scales, pixels
    response_threshold: float
    min_separation: Optional[float] = None  # None: use the winning blob's sigma

    def __post_init__(self):
        sig = tuple(float(s) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sig)
        if not sig or any(s <= 0 for s in sig):
            raise ValueError("sigmas must be non-empty and positive")
        if any(b <= a for a, b in zip(sig, sig[1:])):
            raise ValueError("sigmas must be strictly increasing")
        if self.response_threshold <= 0:
            raise ValueError("response_threshold must be positive")


def rgb_to_optical_density(img: np.ndarray) -> np.ndarray:
    """Beer-Lambert transform of an 8-bit RGB image.

    od = -log10((v + 1) / 256) per channel, so v=255 maps to ~0 and
    v=0 to -log10(1/256).  Total on [0, 255]; output is finite, >= 0.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeMismatchError(f"expected (H, W, 3) image, got {img.shape}")
    v = img.astype(np.float64)
    if v.min() < 0 or v.max() > 255:
        raise ValueError("RGB intensities must lie in [0, 255]")
    return -np.log10((v + 1.0) / 256.0)


def deconvolve_hed(od: np.ndarray, basis: np.ndarray = HED_BASIS) -> StainImage:
    """Unmix optical densities into H/E/DAB concentrations.

    Solves od = c @ basis per pixel via the precomputed basis inverse.
    Raises SingularBasisError when |det(basis)| < 1e-8.
    """
    od = np.asarray(od, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    if od.ndim != 3 or od.shape[2] != 3:
        raise ShapeMismatchError(f"expected (H, W, 3) OD array, got {od.shape}")
    if abs(np.linalg.det(basis)) < 1e-8:
        raise SingularBasisError("stain basis is singular")
    conc = od @ np.linalg.inv(basis)
    return StainImage(channels=conc, stain_basis=basis.copy())


def compose_hed(stain: StainImage) -> np.ndarray:
    """Remix stain concentrations back to optical densities (test inverse)."""
    return stain.channels @ stain.stain_basis


def otsu_threshold(channel: np.ndarray, n_bins: int = 256) -> float:
    """Histogram threshold maximising between-class variance.

    Returns the bin-edge value; ties break toward the lower edge.  A
    constant input is degenerate: the constant itself is returned so a
    strict `> threshold` mask downstream is empty.
    """
    channel = np.asarray(channel, dtype=np.float64)
    if n_bins < 2:
        raise ValueError("n_bins must be >= 2")
    if not np.all(np.isfinite(channel)):
        raise ValueError("channel must be finite")
    mn = float(channel.min())
    mx = float(channel.max())
    if mn == mx:
        return mn  # degenerate input
    hist, edges = np.histogram(channel, bins=n_bins, range=(mn, mx))

    # Between-class variance over bin indices; the ordering over split
    # points is invariant to affine value mapping, so the argmax can be
    # taken in exact integer arithmetic (ties resolve to the lowest
    # split deterministically): maximize (K0*n1 - K1*n0)^2 / (n0*n1).
    counts = [int(c) for c in hist]
    total = sum(counts)
    kmass = [j * counts[j] for j in range(n_bins)]
    ktotal = sum(kmass)

    best_i = 1
    best_num = -1  # numerator (K0*n1 - K1*n0)^2
    best_den = 1  # denominator n0*n1
    n0 = 0
    k0 = 0
    for i in range(1, n_bins):
        n0 += counts[i - 1]
        k0 += kmass[i - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            num, den = 0, 1
        else:
            num = (k0 * n1 - (ktotal - k0) * n0) ** 2
            den = n0 * n1
        if num * best_den > best_num * den:
            best_num, best_den, best_i = num, den, i
    return float(edges[best_i])


def _gauss_1d(sigma: float, order: int) -> np.ndarray:
    """Truncated 1-D Gaussian (order 0) or its second derivative (order 2).

    Truncation at ceil(4*sigma); DC is corrected so a constant input
    produces an exactly-zero Laplacian.
    """
    radius = int(math.ceil(4.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x**2) / (2.0 * sigma**2)) / (sigma * math.sqrt(2.0 * math.pi))
    if order == 0:
        return g / g.sum()
    if order == 2:
        g2 = g * (x**2 - sigma**2) / sigma**4
        return g2 - g2.sum() / g2.size
    raise ValueError("order must be 0 or 2")


def log_response(channel: np.ndarray, sigma: float) -> np.ndarray:
    """Scale-normalised LoG response, sign-flipped for bright blobs.

    response = -sigma^2 * (laplacian(G_sigma) * channel), computed
    separably with a kernel truncated at ceil(4*sigma) and reflected
    borders, so bright-on-dark blobs yield positive peaks.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    channel = np.asarray(channel, dtype=np.float64)
    g = _gauss_1d(sigma, 0)
    g2 = _gauss_1d(sigma, 2)
    gxx = ndimage.convolve1d(ndimage.convolve1d(channel, g2, axis=1, mode="reflect"), g, axis=0, mode="reflect")
    gyy = ndimage.convolve1d(ndimage.convolve1d(channel, g, axis=1, mode="reflect"), g2, axis=0, mode="reflect")
    return -(sigma**2) * (gxx + gyy)


def _parabolic_offset(lo: float, mid: float, hi: float) -> float:
    """Sub-pixel offset of the vertex of a parabola through 3 samples."""
    denom = lo - 2.0 * mid + hi
    if denom >= -1e-12:  # flat or non-concave; keep the grid position
        return 0.0
    off = 0.5 * (lo - hi) / denom
    return float(np.clip(off, -0.5, 0.5))


def detect_blobs(
    channel: np.ndarray,
    cfg: BlobDetectionConfig,
    mask: Optional[np.ndarray] = None,
) -> list[Blob]:
    """Scale-space blob detection over the configured sigma set.

    Local maxima of the (scale, y, x) response stack within a 3x3x3
    neighbourhood, thresholded on response, optionally restricted to
    centres inside `mask`, then pruned so no two survivors sit closer
    than the minimum separation (stronger response wins, lower (y, x)
    on ties).
    """
    channel = np.asarray(channel, dtype=np.float64)
    h, w = channel.shape
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != channel.shape:
            raise ShapeMismatchError(f"mask shape {mask.shape} != channel shape {channel.shape}")

    stack = np.stack([log_response(channel, s) for s in cfg.sigmas])
    n_s = stack.shape[0]

    # 3x3x3 strict local maxima (ties resolved by strict > against the
    # dilated neighbourhood with the centre excluded).
    footprint = np.ones((3, 3, 3), dtype=bool)
    footprint[1, 1, 1] = False
    neighbour_max = ndimage.maximum_filter(stack, footprint=footprint, mode="nearest")
    peaks = (stack > neighbour_max) & (stack >= cfg.response_threshold)

    cand: list[Blob] = []
    for si, yi, xi in zip(*np.nonzero(peaks)):
        if mask is not None and not mask[yi, xi]:
            continue
        resp = stack[si, yi, xi]
        dx = _parabolic_offset(stack[si, yi, xi - 1], resp, stack[si, yi, xi + 1]) if 0 < xi < w - 1 else 0.0
        dy = _parabolic_offset(stack[si, yi - 1, xi], resp, stack[si, yi + 1, xi]) if 0 < yi < h - 1 else 0.0
        cand.append(Blob(cx=xi + dx, cy=yi + dy, sigma=cfg.sigmas[si], response=float(resp)))

    # Greedy non-maximum suppression by centre distance; the stronger
    # (already kept) blob's scale sets the separation when unconfigured.
    cand.sort(key=lambda b: (-b.response, b.cy, b.cx, b.sigma))
    kept: list[Blob] = []
    for b in cand:
        ok = True
        for k in kept:
            sep = cfg.min_separation if cfg.min_separation is not None else k.sigma
            if (b.cx - k.cx) ** 2 + (b.cy - k.cy) ** 2 < sep**2:
                ok = False
                break
        if ok:
            kept.append(b)
    return kept


def cluster_points(points: Sequence[tuple], dist_threshold: float) -> list[list[tuple]]:
    """Connected components of the <= dist_threshold proximity graph.

    Components are ordered by their smallest member index and members
    keep input order, so the partition is deterministic and independent
    of the point ordering as a set partition.
    """
    if dist_threshold <= 0:
        raise ValueError("dist_threshold must be positive")
    pts = [(float(x), float(y)) for x, y in points]
    n = len(pts)
    if n == 0:
        return []

    parent = list(range(n))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(a: int, b: int) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)

    arr = np.asarray(pts)
    if n > 1:
        from scipy.spatial import cKDTree

        tree = cKDTree(arr)
        for i, j in tree.query_pairs(dist_threshold):
            union(i, j)

    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    ordered = sorted(groups.values(), key=lambda idxs: idxs[0])
    return [[pts[i] for i in idxs] for idxs in ordered]


def _hull_vertices(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull, counter-clockwise, no repeated endpoint."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.asarray(lower[:-1] + upper[:-1])


def convex_hull_mask(points: Sequence[tuple], shape: tuple) -> np.ndarray:
    """Rasterise the convex hull of ``points`` onto an (H, W) boolean grid.

    Pixel (r, c) is set when its centre (x=c, y=r) lies inside or on the
    hull.  Degenerate hulls (single point, segment, collinear set) fall
    back to the point/segment trace dilated by one pixel.
    """
    h, w = int(shape[0]), int(shape[1])
    if h <= 0 or w <= 0:
        raise ValueError("shape must be positive")
    pts = np.asarray([(float(x), float(y)) for x, y in points], dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    if len(pts) == 0:
        return mask

    verts = _hull_vertices(pts)
    if len(verts) >= 3:
        xs = np.arange(w, dtype=np.float64)[None, :]
        ys = np.arange(h, dtype=np.float64)[:, None]
        inside = np.ones((h, w), dtype=bool)
        for i in range(len(verts)):
            x0, y0 = verts[i]
            x1, y1 = verts[(i + 1) % len(verts)]
            # CCW hull: interior has non-negative cross product per edge.
            inside &= (x1 - x0) * (ys - y0) - (xs - x0) * (y1 - y0) >= -1e-9
        return inside

    # Degenerate: trace the points / segment and dilate by one pixel.
    if len(verts) == 1:
        seg = verts[[0, 0]]
    else:
        seg = verts
    (x0, y0), (x1, y1) = seg[0], seg[1]
    length = math.hypot(x1 - x0, y1 - y0)
    n_steps = max(2, int(math.ceil(length * 4)) + 1)
    ts = np.linspace(0.0, 1.0, n_steps)
    cols = np.clip(np.rint(x0 + ts * (x1 - x0)).astype(int), 0, w - 1)
    rows = np.clip(np.rint(y0 + ts * (y1 - y0)).astype(int), 0, h - 1)
    mask[rows, cols] = True
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))
