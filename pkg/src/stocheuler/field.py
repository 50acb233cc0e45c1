"""Grids, fields, finite-difference operators and norms on the unit square.

Arrays hold interior values only, indexed ``data[i, j]`` at
``(x_i, y_j) = ((i+1)h, (j+1)h)`` with ``h = 1/(n+1)``.  Axis 0 is x, axis 1
is y.  Array-level helpers accept leading batch dimensions so ensembles can be
advanced together.
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft

from .errors import DataError, ParameterError

P_MAX = 64
DEFAULT_P = (2, 4, 8, 16, 32, 64)
THREADS_ENV = "STOCHEULER_THREADS"


def fft_workers() -> int:
    """Worker count for the sine transforms (environment override)."""
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class Grid:
    """n interior points per axis on [0, 1]^2."""

    n: int

    def __post_init__(self):
        if not isinstance(self.n, (int, np.integer)) or self.n < 3:
            raise ParameterError("grid needs n >= 3 interior points")

    @property
    def h(self) -> float:
        return 1.0 / (self.n + 1)

    def coords(self) -> np.ndarray:
        return np.arange(1, self.n + 1) * self.h

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.coords()
        return np.meshgrid(x, x, indexing="ij")


def _checked(grid: Grid, a, name: str) -> np.ndarray:
    a = np.array(a, dtype=float)
    if a.shape != (grid.n, grid.n):
        raise DataError(f"{name} has shape {a.shape}, expected {(grid.n, grid.n)}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite values")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ScalarField:
    """Interior values of a scalar; ``homogeneous`` marks a zero boundary trace."""

    grid: Grid
    data: np.ndarray
    homogeneous: bool = True

    def __post_init__(self):
        object.__setattr__(self, "data", _checked(self.grid, self.data, "scalar data"))

    def __add__(self, other: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self.data + other.data, self.homogeneous and other.homogeneous)

    def __sub__(self, other: ScalarField) -> ScalarField:
        return ScalarField(self.grid, self.data - other.data, self.homogeneous and other.homogeneous)

    def scale(self, c: float) -> ScalarField:
        return ScalarField(self.grid, c * self.data, self.homogeneous)

    @classmethod
    def zeros(cls, grid: Grid) -> ScalarField:
        return cls(grid, np.zeros((grid.n, grid.n)))


@dataclass(frozen=True)
class VectorField:
    grid: Grid
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", _checked(self.grid, self.u, "u component"))
        object.__setattr__(self, "v", _checked(self.grid, self.v, "v component"))

    def __add__(self, other: VectorField) -> VectorField:
        return VectorField(self.grid, self.u + other.u, self.v + other.v)

    def __sub__(self, other: VectorField) -> VectorField:
        return VectorField(self.grid, self.u - other.u, self.v - other.v)

    def scale(self, c: float) -> VectorField:
        return VectorField(self.grid, c * self.u, c * self.v)

    @classmethod
    def zeros(cls, grid: Grid) -> VectorField:
        z = np.zeros((grid.n, grid.n))
        return cls(grid, z, z)


@dataclass(frozen=True)
class NormReport:
    l2: float
    h1: float
    linf: float
    lp: dict = field(default_factory=dict)


# ---------------------------------------------------------------- array level

def pad(a: np.ndarray) -> np.ndarray:
    """Surround the last two axes with a ring of zeros (the boundary)."""
    width = [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(a, width)


def laplacian_array(a: np.ndarray, h: float) -> np.ndarray:
    """5-point Laplacian with homogeneous Dirichlet data."""
    p = pad(a)
    return (p[..., 2:, 1:-1] + p[..., :-2, 1:-1] + p[..., 1:-1, 2:] + p[..., 1:-1, :-2]
            - 4.0 * a) / (h * h)


def centered_laplacian_array(a: np.ndarray, h: float) -> np.ndarray:
    """Laplacian assembled from two centered first differences (stride 2h).

    This is what ``curl(grad_perp(psi))`` reproduces exactly away from the
    edge ring; it agrees with the compact 5-point stencil up to O(h^2).
    """
    p = np.pad(a, [(0, 0)] * (a.ndim - 2) + [(2, 2), (2, 2)])
    return (p[..., 4:, 2:-2] + p[..., :-4, 2:-2] + p[..., 2:-2, 4:] + p[..., 2:-2, :-4]
            - 4.0 * a) / (4.0 * h * h)


@functools.lru_cache(maxsize=16)
def _dirichlet_eigenvalues(n: int) -> np.ndarray:
    h = 1.0 / (n + 1)
    s = np.sin(np.arange(1, n + 1) * np.pi * h / 2.0) ** 2
    lam = 4.0 / (h * h) * (s[:, None] + s[None, :])
    lam.flags.writeable = False
    return lam


def solve_poisson_array(rhs: np.ndarray) -> np.ndarray:
    """Solve -Lap_h psi = rhs exactly via the type-I sine transform."""
    n = rhs.shape[-1]
    w = fft_workers()
    coef = fft.dstn(rhs, type=1, axes=(-2, -1), workers=w)
    return fft.idstn(coef / _dirichlet_eigenvalues(n), type=1, axes=(-2, -1), workers=w)


def grad_perp_array(psi: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """(d psi/dy, -d psi/dx) by centered differences using psi = 0 on the boundary."""
    p = pad(psi)
    u = (p[..., 1:-1, 2:] - p[..., 1:-1, :-2]) / (2.0 * h)
    v = -(p[..., 2:, 1:-1] - p[..., :-2, 1:-1]) / (2.0 * h)
    return u, v


def _d(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    # centered inside, one-sided second order on the edge ring
    return np.gradient(a, h, axis=axis, edge_order=2)


def curl_array(u: np.ndarray, v: np.ndarray, h: float) -> np.ndarray:
    return _d(v, h, -2) - _d(u, h, -1)


def divergence_array(u: np.ndarray, v: np.ndarray, h: float) -> np.ndarray:
    return _d(u, h, -2) + _d(v, h, -1)


def lp_array(mag: np.ndarray, h: float, p: float) -> np.ndarray:
    """Grid L^p norm of a non-negative magnitude over the last two axes.

    Scaled by the maximum first so that p up to 64 cannot overflow.
    """
    m = mag.max(axis=(-2, -1))
    safe = np.where(m > 0, m, 1.0)
    s = np.sum((mag / safe[..., None, None]) ** p, axis=(-2, -1)) * h * h
    return np.where(m > 0, safe * s ** (1.0 / p), 0.0)


def l2_array(a: np.ndarray, h: float) -> np.ndarray:
    return np.sqrt(np.sum(a * a, axis=(-2, -1))) * h


def velocity_gradient_sq(u: np.ndarray, v: np.ndarray, h: float) -> np.ndarray:
    """Pointwise |grad v|^2 (Frobenius) for a collocated vector field."""
    return _d(u, h, -2) ** 2 + _d(u, h, -1) ** 2 + _d(v, h, -2) ** 2 + _d(v, h, -1) ** 2


# ---------------------------------------------------------------- field level

def laplacian(f: ScalarField) -> ScalarField:
    return ScalarField(f.grid, laplacian_array(f.data, f.grid.h))


def centered_laplacian(f: ScalarField) -> ScalarField:
    return ScalarField(f.grid, centered_laplacian_array(f.data, f.grid.h))


def poisson_solve(rhs: ScalarField) -> ScalarField:
    """psi with -Lap_h psi = rhs at interior points and psi = 0 on the boundary."""
    return ScalarField(rhs.grid, solve_poisson_array(rhs.data))


def grad_perp(psi: ScalarField) -> VectorField:
    u, v = grad_perp_array(psi.data, psi.grid.h)
    return VectorField(psi.grid, u, v)


def curl(vf: VectorField) -> ScalarField:
    return ScalarField(vf.grid, curl_array(vf.u, vf.v, vf.grid.h), homogeneous=False)


def divergence(vf: VectorField) -> ScalarField:
    return ScalarField(vf.grid, divergence_array(vf.u, vf.v, vf.grid.h), homogeneous=False)


def velocity_from_vorticity(rho: ScalarField) -> VectorField:
    return grad_perp(poisson_solve(rho))


def _check_p(p: float) -> None:
    if not 2 <= p <= P_MAX:
        raise ParameterError(f"p must lie in [2, {P_MAX}]")


def norms(f: ScalarField | VectorField, p_list=DEFAULT_P) -> NormReport:
    """L^2, H^1, L^inf and L^p norms by grid quadrature (weight h^2 per point)."""
    h = f.grid.h
    if isinstance(f, ScalarField):
        mag = np.abs(f.data)
        base = pad(f.data) if f.homogeneous else f.data
        gx, gy = _d(base, h, 0), _d(base, h, 1)
        if f.homogeneous:
            gx, gy = gx[1:-1, 1:-1], gy[1:-1, 1:-1]
        grad_sq = gx ** 2 + gy ** 2
    elif isinstance(f, VectorField):
        mag = np.hypot(f.u, f.v)
        grad_sq = velocity_gradient_sq(f.u, f.v, h)
    else:
        raise ParameterError("norms expects a ScalarField or VectorField")
    l2 = float(l2_array(mag, h))
    h1 = float(np.sqrt(l2 * l2 + np.sum(grad_sq) * h * h))
    lp = {}
    for p in p_list:
        _check_p(p)
        lp[p] = l2 if p == 2 else float(lp_array(mag, h, p))
    return NormReport(l2=l2, h1=h1, linf=float(mag.max()), lp=lp)


def sobolev_ratio(vf: VectorField, p: float) -> float:
    """||v||_{L^p} / (sqrt(p) ||v||_{H^1})."""
    _check_p(p)
    rep = norms(vf, p_list=(p,))
    if rep.h1 == 0.0:
        raise ParameterError("ratio undefined for the zero field")
    return rep.lp[p] / (np.sqrt(p) * rep.h1)


def gradient_lp(vf: VectorField, p: float) -> float:
    """||grad v||_{L^p} with the Frobenius norm pointwise."""
    _check_p(p)
    mag = np.sqrt(velocity_gradient_sq(vf.u, vf.v, vf.grid.h))
    return float(lp_array(mag, vf.grid.h, p))


def _grad_curl_raw(vf: VectorField, p: float) -> float:
    rho = curl(vf)
    denom = float(lp_array(np.abs(rho.data), vf.grid.h, p))
    if denom == 0.0:
        raise ParameterError("ratio undefined for curl-free fields")
    return gradient_lp(vf, p) * (p - 1) / (p * p * denom)


def calibrate_grad_curl_constant(fields, p_list=(2, 4, 8, 16, 32), headroom: float = 1.1) -> float:
    """Smallest C making the gradient-vs-curl ratio <= 1 on ``fields``, times headroom.

    The headroom is part of the calibration so held-out fields from the same
    family are covered; the value is reported, not proven.
    """
    return headroom * max(_grad_curl_raw(vf, p) for vf in fields for p in p_list)


def grad_curl_ratio(vf: VectorField, p: float, c: float) -> float:
    """||grad v||_p (p-1) / (C p^2 ||curl v||_p)."""
    _check_p(p)
    return _grad_curl_raw(vf, p) / c


def sine_series(grid: Grid, coef: np.ndarray) -> np.ndarray:
    """Evaluate sum_jk coef[j-1, k-1] sin(j pi x) sin(k pi y) on the interior grid."""
    x = grid.coords()
    sx = np.sin(np.pi * np.outer(x, np.arange(1, coef.shape[0] + 1)))
    sy = np.sin(np.pi * np.outer(x, np.arange(1, coef.shape[1] + 1)))
    return sx @ coef @ sy.T


def random_smooth_vorticity(grid: Grid, rng: np.random.Generator, modes: int = 8,
                            decay: float = 1.0) -> ScalarField:
    """Band-limited random field from the lowest ``modes`` x ``modes`` sine modes.

    Coefficients are N(0,1) scaled by (j^2 + k^2)^(-decay/2).
    """
    j = np.arange(1, modes + 1)
    weight = (j[:, None] ** 2 + j[None, :] ** 2) ** (-decay / 2.0)
    coef = rng.standard_normal((modes, modes)) * weight
    return ScalarField(grid, sine_series(grid, coef))


def save_field(path: str | Path, f: ScalarField | VectorField) -> None:
    """Row-major interior values with a one-line grid header."""
    if isinstance(f, ScalarField):
        kind, blocks = "scalar", [f.data]
    else:
        kind, blocks = "vector", [f.u, f.v]
    header = f"kind={kind} n={f.grid.n} h={f.grid.h!r}"
    if isinstance(f, ScalarField):
        header += f" homogeneous={int(f.homogeneous)}"
    np.savetxt(path, np.vstack(blocks), fmt="%.17g", delimiter=",", header=header)


def load_field(path: str | Path) -> ScalarField | VectorField:
    try:
        with open(path) as fh:
            meta = dict(tok.split("=", 1) for tok in fh.readline().lstrip("# ").split())
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        n = int(meta["n"])
        kind = meta["kind"]
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read field file {path}: {exc}") from exc
    grid = Grid(n)
    if kind == "scalar":
        if data.shape != (n, n):
            raise DataError("scalar field file has the wrong shape")
        return ScalarField(grid, data, homogeneous=bool(int(meta.get("homogeneous", 1))))
    if kind == "vector":
        if data.shape != (2 * n, n):
            raise DataError("vector field file has the wrong shape")
        return VectorField(grid, data[:n], data[n:])
    raise DataError(f"unknown field kind {kind!r}")
