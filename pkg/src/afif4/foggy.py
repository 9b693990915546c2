"""Foggy-face synthesis by membrane (discrete harmonic) in-fill of the face region.

Inside the region every pixel satisfies the 5-point Laplace equation
``4 f_p - sum(f_q, q in N_p) = 0`` with Dirichlet values taken from the image
on the region's outer boundary.  Pixels outside the region are untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse

from .facepatch import FaceDetection
from .imagecore import ImageBuffer, LandmarkSet, resize

METHODS = ("conjugate-gradient", "gauss-seidel", "direct-dense")
_ALIASES = {"cg": "conjugate-gradient", "gs": "gauss-seidel", "dense": "direct-dense"}
DENSE_LIMIT = 6000

_NEIGHBORS = ((-1, 0), (1, 0), (0, -1), (0, 1))


class MembraneSolveError(RuntimeError):
    def __init__(self, method: str, iterations: int, residual: float):
        self.method = method
        self.iterations = iterations
        self.residual = residual
        super().__init__(f"{method} did not converge after {iterations} iterations "
                         f"(residual {residual:.3e})")


@dataclass(frozen=True)
class MembraneSolveConfig:
    method: str = "conjugate-gradient"
    tolerance: float = 1e-6
    max_iterations: int = 100_000

    def __post_init__(self):
        method = _ALIASES.get(self.method, self.method)
        if method not in METHODS:
            raise ValueError(f"unknown membrane solver {self.method!r}; choose from {METHODS}")
        object.__setattr__(self, "method", method)
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def _outer_boundary(interior: np.ndarray) -> np.ndarray:
    grown = np.zeros_like(interior)
    grown[1:, :] |= interior[:-1, :]
    grown[:-1, :] |= interior[1:, :]
    grown[:, 1:] |= interior[:, :-1]
    grown[:, :-1] |= interior[:, 1:]
    return grown & ~interior


@dataclass(frozen=True, eq=False)
class FogRegion:
    """Interior and boundary pixel masks, both ``(height, width)`` booleans."""

    interior: np.ndarray
    boundary: np.ndarray

    @classmethod
    def from_mask(cls, interior) -> "FogRegion":
        """Region from an interior mask; pixels on the image edge become boundary."""
        inner = np.array(interior, dtype=bool)
        inner[0, :] = inner[-1, :] = False
        inner[:, 0] = inner[:, -1] = False
        inner.setflags(write=False)
        boundary = _outer_boundary(inner)
        boundary.setflags(write=False)
        return cls(inner, boundary)

    @property
    def height(self) -> int:
        return self.interior.shape[0]

    @property
    def width(self) -> int:
        return self.interior.shape[1]

    @property
    def size(self) -> int:
        return int(self.interior.sum())

    def is_empty(self) -> bool:
        return not self.interior.any()

    def interior_coords(self) -> list[tuple[int, int]]:
        """``(x, y)`` pixel coordinates of the interior, row-major."""
        rows, cols = np.nonzero(self.interior)
        return list(zip(cols.tolist(), rows.tolist()))

    def boundary_coords(self) -> list[tuple[int, int]]:
        rows, cols = np.nonzero(self.boundary)
        return list(zip(cols.tolist(), rows.tolist()))


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Counter-clockwise hull (monotone chain), collinear points dropped."""
    pts = sorted(set(map(tuple, np.asarray(points, dtype=np.float64).tolist())))
    if len(pts) < 3:
        return np.array(pts, dtype=np.float64).reshape(-1, 2)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.float64)


def _polygon_area(hull: np.ndarray) -> float:
    if len(hull) < 3:
        return 0.0
    x, y = hull[:, 0], hull[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def rasterize_convex(hull: np.ndarray, width: int, height: int) -> np.ndarray:
    """Scanline fill: pixels whose centers lie strictly inside a CCW convex polygon."""
    mask = np.zeros((height, width), dtype=bool)
    if len(hull) < 3 or _polygon_area(hull) <= 1e-12:
        return mask
    a = hull
    b = np.roll(hull, -1, axis=0)
    # For CCW order the inside of edge a->b is where cross(b - a, p - a) > 0,
    # i.e. nx * (px - ax) + ny * (py - ay) > 0 with (nx, ny) = (-(by - ay), bx - ax).
    nx = -(b[:, 1] - a[:, 1])
    ny = b[:, 0] - a[:, 0]
    xs = np.arange(width) + 0.5
    lo_row = max(int(np.floor(hull[:, 1].min())), 0)
    hi_row = min(int(np.ceil(hull[:, 1].max())), height - 1)
    for row in range(lo_row, hi_row + 1):
        y = row + 0.5
        rhs = nx * a[:, 0] - ny * (y - a[:, 1])
        left, right = -np.inf, np.inf
        feasible = True
        for k in range(len(hull)):
            if nx[k] > 0:
                left = max(left, rhs[k] / nx[k])
            elif nx[k] < 0:
                right = min(right, rhs[k] / nx[k])
            elif not ny[k] * (y - a[k, 1]) > 0:
                feasible = False
                break
        if feasible and left < right:
            mask[row] = (xs > left) & (xs < right)
    return mask


def region_from_landmarks(lm: LandmarkSet, img_w: int, img_h: int) -> FogRegion:
    """Region enclosed by the convex hull of the face-outline landmarks."""
    hull = convex_hull(lm.group("face-outline"))
    return FogRegion.from_mask(rasterize_convex(hull, img_w, img_h))


# --------------------------------------------------------------------------
# linear system


def assemble_system(region: FogRegion, channel: np.ndarray):
    """Sparse matrix, right-hand side and interior index grid for one channel.

    ``channel`` is a ``(height, width)`` array supplying the Dirichlet values.
    """
    h, w = region.interior.shape
    rows, cols = np.nonzero(region.interior)
    n = len(rows)
    index = np.full((h, w), -1, dtype=np.intp)
    index[rows, cols] = np.arange(n)
    diag = np.zeros(n)
    rhs = np.zeros(n)
    i_idx, j_idx = [], []
    for dr, dc in _NEIGHBORS:
        nr, nc = rows + dr, cols + dc
        ok = (nr >= 0) & (nr < h) & (nc >= 0) & (nc < w)
        diag += ok
        nr_ok, nc_ok = nr[ok], nc[ok]
        src = np.nonzero(ok)[0]
        nb = index[nr_ok, nc_ok]
        inner = nb >= 0
        i_idx.append(src[inner])
        j_idx.append(nb[inner])
        np.add.at(rhs, src[~inner], channel[nr_ok[~inner], nc_ok[~inner]])
    i_all = np.concatenate(i_idx + [np.arange(n)])
    j_all = np.concatenate(j_idx + [np.arange(n)])
    vals = np.concatenate([-np.ones(sum(len(x) for x in i_idx)), diag])
    A = sparse.csr_matrix((vals, (i_all, j_all)), shape=(n, n))
    return A, rhs, (rows, cols)


def _conjugate_gradient(A, b, x0, tol, max_iter):
    x = x0.copy()
    r = b - A @ x
    if np.max(np.abs(r), initial=0.0) <= tol:
        return x, 0
    d = r.copy()
    rr = r @ r
    for it in range(1, max_iter + 1):
        Ad = A @ d
        alpha = rr / (d @ Ad)
        x += alpha * d
        r -= alpha * Ad
        if it % 50 == 0:
            # refresh against drift in the recursive residual
            r = b - A @ x
        if np.max(np.abs(r)) <= tol:
            true_res = np.max(np.abs(b - A @ x))
            if true_res <= tol:
                return x, it
            r = b - A @ x
        rr_new = r @ r
        d = r + (rr_new / rr) * d
        rr = rr_new
    raise MembraneSolveError("conjugate-gradient", max_iter, float(np.max(np.abs(b - A @ x))))


def _gauss_seidel(work: np.ndarray, interior: np.ndarray, tol: float, max_iter: int) -> int:
    """Red-black Gauss-Seidel sweeps on a grid in place; returns iterations used."""
    h, w = interior.shape
    parity = (np.add.outer(np.arange(h), np.arange(w)) % 2).astype(bool)
    colors = (interior & ~parity, interior & parity)
    inner = interior[1:-1, 1:-1]

    def neighbor_sum(f):
        return f[:-2, 1:-1] + f[2:, 1:-1] + f[1:-1, :-2] + f[1:-1, 2:]

    for it in range(1, max_iter + 1):
        for mask in colors:
            s = neighbor_sum(work)
            m = mask[1:-1, 1:-1]
            work[1:-1, 1:-1][m] = 0.25 * s[m]
        if it % 10 == 0 or it == max_iter:
            res = np.abs(4.0 * work[1:-1, 1:-1] - neighbor_sum(work))[inner]
            if res.max(initial=0.0) <= tol:
                return it
    res = np.abs(4.0 * work[1:-1, 1:-1] - neighbor_sum(work))[inner]
    raise MembraneSolveError("gauss-seidel", max_iter, float(res.max(initial=0.0)))


def solve_membrane(img: ImageBuffer, region: FogRegion,
                   cfg: MembraneSolveConfig | None = None) -> ImageBuffer:
    """Replace the region interior with the harmonic interpolant of its boundary, per channel."""
    cfg = cfg or MembraneSolveConfig()
    if region.interior.shape != (img.height, img.width):
        raise ValueError(f"region shape {region.interior.shape} does not match image "
                         f"{img.height}x{img.width}")
    if region.is_empty():
        return img
    out = img.copy_pixels()
    rows, cols = np.nonzero(region.interior)

    if cfg.method == "gauss-seidel":
        # work on the bounding box of the region plus its boundary ring
        r0, r1 = rows.min() - 1, rows.max() + 2
        c0, c1 = cols.min() - 1, cols.max() + 2
        sub_interior = region.interior[r0:r1, c0:c1]
        for ch in range(img.channels):
            work = np.array(img.pixels[r0:r1, c0:c1, ch])
            bvals = work[region.boundary[r0:r1, c0:c1]]
            work[sub_interior] = bvals.mean()
            _gauss_seidel(work, sub_interior, cfg.tolerance, cfg.max_iterations)
            out[r0:r1, c0:c1, ch][sub_interior] = np.clip(work[sub_interior], 0.0, 1.0)
        return ImageBuffer(out)

    A, _, _ = assemble_system(region, img.pixels[:, :, 0])
    n = A.shape[0]
    if cfg.method == "direct-dense" and n > DENSE_LIMIT:
        raise ValueError(f"direct-dense solve limited to {DENSE_LIMIT} unknowns, region has {n}")
    dense = A.toarray() if cfg.method == "direct-dense" else None
    for ch in range(img.channels):
        _, b, _ = assemble_system(region, img.pixels[:, :, ch])
        if dense is not None:
            x = np.linalg.solve(dense, b)
            res = float(np.max(np.abs(b - A @ x)))
            if res > cfg.tolerance:
                raise MembraneSolveError("direct-dense", 1, res)
        else:
            start = np.full(n, img.pixels[:, :, ch][region.boundary].mean())
            x, _ = _conjugate_gradient(A, b, start, cfg.tolerance, cfg.max_iterations)
        out[rows, cols, ch] = np.clip(x, 0.0, 1.0)
    return ImageBuffer(out)


def foggy_face(img: ImageBuffer, det: FaceDetection, cfg: MembraneSolveConfig | None = None,
               out: int = 32) -> ImageBuffer:
    region = region_from_landmarks(det.landmarks, img.width, img.height)
    return resize(solve_membrane(img, region, cfg), out, out)
