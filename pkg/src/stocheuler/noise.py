"""Two-sided Wiener paths and the stationary Ornstein-Uhlenbeck process.

Paths live on a uniform grid ``t_k = (start + k) * dt`` where ``start`` is an
integer offset, so shifting a path is pure re-indexing and grid times are
reproduced exactly.  The OU process solves ``dy + y dt = dW`` and is started
from its stationary law N(0, 1/2) at the leftmost grid time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import cumulative_trapezoid, trapezoid
from scipy.signal import lfilter

from .errors import DataError, ParameterError, RangeError

STATIONARY_VAR = 0.5
_ALIGN_TOL = 1e-9


def _grid_index(t: float, dt: float) -> int:
    """Integer k with k*dt == t, or ParameterError if t is off the grid."""
    k = round(t / dt)
    if abs(k * dt - t) > _ALIGN_TOL * max(1.0, abs(t)):
        raise ParameterError(f"time {t!r} is not a multiple of dt={dt!r}")
    return int(k)


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class WienerPath:
    """Sampled two-sided Brownian path pinned at W(0) = 0."""

    start: int
    dt: float
    values: np.ndarray
    seed: int | None = None
    # unshifted ancestor; shifts re-pin from it so composed shifts agree bitwise
    base: WienerPath | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.dt <= 0:
            raise ParameterError("dt must be positive")
        object.__setattr__(self, "values", _frozen(self.values))
        if self.values.ndim != 1 or self.values.size == 0:
            raise ParameterError("a Wiener path needs at least one sample")
        k0 = -self.start
        if 0 <= k0 < self.values.size and self.values[k0] != 0.0:
            raise DataError("Wiener path is not pinned at the origin")

    @property
    def t0(self) -> float:
        return self.start * self.dt

    @property
    def times(self) -> np.ndarray:
        return (self.start + np.arange(self.values.size)) * self.dt

    @property
    def increments(self) -> np.ndarray:
        return np.diff(self.values)


@dataclass(frozen=True)
class OUPath:
    """Samples of t -> y(theta_t omega) on the grid of a Wiener path."""

    start: int
    dt: float
    values: np.ndarray
    stationary_var: float = STATIONARY_VAR
    wiener: WienerPath | None = field(default=None, compare=False, repr=False)
    seed: int | None = None

    def __post_init__(self):
        if self.dt <= 0:
            raise ParameterError("dt must be positive")
        object.__setattr__(self, "values", _frozen(self.values))
        if self.values.ndim != 1 or self.values.size == 0:
            raise ParameterError("an OU path needs at least one sample")
        if self.wiener is not None and (
            self.wiener.start != self.start or self.wiener.values.size != self.values.size
        ):
            raise DataError("OU path and Wiener path grids differ")

    @property
    def t0(self) -> float:
        return self.start * self.dt

    @property
    def t_min(self) -> float:
        return self.start * self.dt

    @property
    def t_max(self) -> float:
        return (self.start + self.values.size - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return (self.start + np.arange(self.values.size)) * self.dt

    def index_of(self, t: float) -> int:
        """Array index of grid time ``t``."""
        k = _grid_index(t, self.dt) - self.start
        if not 0 <= k < self.values.size:
            raise RangeError(f"time {t} outside the window [{self.t_min}, {self.t_max}]")
        return k

    def at(self, t: float) -> float:
        """Piecewise-linear evaluation between grid samples."""
        s = t / self.dt - self.start
        if s < -_ALIGN_TOL or s > self.values.size - 1 + _ALIGN_TOL:
            raise RangeError(f"time {t} outside the window [{self.t_min}, {self.t_max}]")
        k = min(max(int(math.floor(s)), 0), self.values.size - 2) if self.values.size > 1 else 0
        if self.values.size == 1:
            return float(self.values[0])
        theta = s - k
        return float(self.values[k] + theta * (self.values[k + 1] - self.values[k]))

    def segment(self, a: float, b: float) -> np.ndarray:
        """Samples at grid times in [a, b], endpoints included."""
        if a > b:
            raise ParameterError("segment needs a <= b")
        return self.values[self.index_of(a): self.index_of(b) + 1]


def sample_wiener(t_min: float, t_max: float, dt: float, seed: int) -> WienerPath:
    """Two-sided Brownian path on [t_min, t_max] with W(0) = 0.

    Forward and backward branches use independent child streams of the seed;
    a third child stream is reserved for the stationary OU start.
    """
    if dt <= 0:
        raise ParameterError("dt must be positive")
    if t_min > 0 or t_max < 0:
        raise ParameterError("the window must contain t = 0")
    n_back = -_grid_index(t_min, dt)
    n_fwd = _grid_index(t_max, dt)
    fwd_ss, back_ss, _ = np.random.SeedSequence(seed).spawn(3)
    sd = math.sqrt(dt)
    fwd = np.cumsum(np.random.default_rng(fwd_ss).normal(0.0, sd, n_fwd))
    back = np.cumsum(np.random.default_rng(back_ss).normal(0.0, sd, n_back))
    values = np.concatenate([back[::-1], [0.0], fwd])
    return WienerPath(start=-n_back, dt=dt, values=values, seed=seed)


def ou_gain(dt: float) -> tuple[float, float]:
    """Decay and increment gain of the exact OU update.

    ``y_{k+1} = a*y_k + c*dW_k`` with ``a = e^{-dt}`` and
    ``c = sqrt((1 - a^2) / (2 dt))``, so that ``c*dW_k`` has exactly the
    conditional variance ``(1 - e^{-2dt})/2`` of the stochastic convolution.
    """
    a = math.exp(-dt)
    return a, math.sqrt(-math.expm1(-2.0 * dt) / (2.0 * dt))


def ou_from_wiener(w: WienerPath, y0: float | None = None) -> OUPath:
    """Stationary OU path driven by the increments of ``w``.

    ``y0`` overrides the stationary draw at the leftmost time.
    """
    if w.values.size == 0:
        raise ParameterError("empty Wiener path")
    if y0 is None:
        init_ss = np.random.SeedSequence(w.seed).spawn(3)[2]
        y0 = float(np.random.default_rng(init_ss).normal(0.0, math.sqrt(STATIONARY_VAR)))
    a, c = ou_gain(w.dt)
    dw = w.increments
    if dw.size:
        rest, _ = lfilter([c], [1.0, -a], dw, zi=[a * y0])
        values = np.concatenate([[y0], rest])
    else:
        values = np.array([y0])
    return OUPath(start=w.start, dt=w.dt, values=values, wiener=w, seed=w.seed)


def sample_ou(t_min: float, t_max: float, dt: float, seed: int) -> OUPath:
    """Convenience: ``ou_from_wiener(sample_wiener(...))``."""
    return ou_from_wiener(sample_wiener(t_min, t_max, dt, seed))


def ou_shift(y: OUPath, s: float) -> OUPath:
    """The path t -> y(theta_{t+s} omega), obtained by re-indexing samples.

    ``s`` must be a grid time inside the window so that the shifted path is
    still defined at its own origin.
    """
    k = _grid_index(s, y.dt)
    if not y.t_min <= k * y.dt <= y.t_max:
        raise RangeError(f"shift {s} outside the window [{y.t_min}, {y.t_max}]")
    if k == 0:
        return y
    w = None
    if y.wiener is not None:
        ws = y.wiener
        root = ws.base or ws
        w = WienerPath(start=ws.start - k, dt=ws.dt,
                       values=root.values - root.values[k - ws.start], seed=ws.seed, base=root)
    return OUPath(start=y.start - k, dt=y.dt, values=y.values,
                  stationary_var=y.stationary_var, wiener=w, seed=y.seed)


@dataclass(frozen=True)
class ExponentIntegrals:
    I1: float
    I2: float
    I3: float


def ou_exponential_functionals(y: OUPath, a: float, b: float, sigma: float) -> ExponentIntegrals:
    """Trapezoid values of int y, int e^{-2 sigma y} and int e^{-sigma y} over [a, b]."""
    if a > b:
        raise ParameterError("need a <= b")
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    seg = y.segment(a, b)
    if seg.size < 2:
        return ExponentIntegrals(0.0, 0.0, 0.0)
    return ExponentIntegrals(
        I1=float(trapezoid(seg, dx=y.dt)),
        I2=float(trapezoid(np.exp(-2.0 * sigma * seg), dx=y.dt)),
        I3=float(trapezoid(np.exp(-sigma * seg), dx=y.dt)),
    )


def running_integral(values: np.ndarray, dt: float) -> np.ndarray:
    """Cumulative trapezoid integral starting from 0 at the first sample."""
    return cumulative_trapezoid(values, dx=dt, initial=0.0)


def sublinearity_diagnostic(y: OUPath, horizon: float) -> float:
    """max |y(t)|/(1+|t|) over the tail t in [horizon/2, horizon].

    Restricting to the tail makes the statistic track the growth rate of y
    rather than its value near t = 0; it should shrink as the horizon grows.
    """
    if horizon <= 0:
        raise ParameterError("horizon must be positive")
    t = y.times
    mask = (t >= 0.5 * horizon) & (t <= horizon)
    if not mask.any():
        raise RangeError("horizon outside the sampled window")
    return float(np.max(np.abs(y.values[mask]) / (1.0 + np.abs(t[mask]))))


def save_path(path: str | Path, y: OUPath) -> None:
    """Write (time, W, y) columns with a header carrying seed, dt and window."""
    if y.wiener is None:
        raise DataError("saving needs the parent Wiener path")
    header = (f"seed={y.seed} dt={y.dt!r} start={y.start} n={y.values.size} "
              f"stationary_var={y.stationary_var!r}\ntime,W,y")
    cols = np.column_stack([y.times, y.wiener.values, y.values])
    np.savetxt(path, cols, fmt="%.17g", delimiter=",", header=header)


def load_path(path: str | Path) -> OUPath:
    """Inverse of :func:`save_path`; the round trip is bit-exact."""
    try:
        with open(path) as fh:
            meta_line = fh.readline()
        meta = dict(tok.split("=", 1) for tok in meta_line.lstrip("# ").split())
        data = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        seed = None if meta["seed"] == "None" else int(meta["seed"])
        dt, start, n = float(meta["dt"]), int(meta["start"]), int(meta["n"])
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot read path file {path}: {exc}") from exc
    if data.shape != (n, 3) or not np.all(np.isfinite(data)):
        raise DataError("path file has the wrong shape or non-finite entries")
    w = WienerPath(start=start, dt=dt, values=data[:, 1], seed=seed)
    return OUPath(start=start, dt=dt, values=data[:, 2],
                  stationary_var=float(meta.get("stationary_var", STATIONARY_VAR)),
                  wiener=w, seed=seed)
