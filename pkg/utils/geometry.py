"""
A grid carries one or two charts. For t != 0 chart 0 is the x-coordinate on
the half {|x| >= |y|} and chart 1 the y-coordinate on the other half; both
sweep radii in [|t|^(1/2), 1]. For t = 0 a single chart is the punctured unit
disk; two charts give the two branches of the node.

Sample arrays have shape (charts, n_r, n_theta, *trailing).
"""
import csv
import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad

from config.settings import Config
from utils.errors import (
    GridSizeError,
    InputError,
    ParameterDomainError,
    ParameterError,
    ShapeError,
    SingularPointError,
)

logger = logging.getLogger(__name__)

METRICS = ('induced', 'flat')


# ---------------------------------------------------------------------------
# Exact integration of interpolants against exponentials
# ---------------------------------------------------------------------------

def exp_moments(z, jmax: int = 3) -> np.ndarray:
    """M_j(z) = int_0^1 u^j e^(z u) du for j = 0..jmax, vectorized over z"""
    z = np.asarray(z, dtype=float)
    small = np.abs(z) < 1.0

    zs = np.where(small, z, 0.0)
    series = np.zeros(z.shape + (jmax + 1,))
    term = np.ones_like(zs)
    for k in range(26):
        for j in range(jmax + 1):
            series[..., j] += term / (j + k + 1)
        term = term * zs / (k + 1)

    zl = np.where(small, 1.0, z)
    ez = np.exp(zl)
    rec = np.empty_like(series)
    rec[..., 0] = np.expm1(zl) / zl
    for j in range(1, jmax + 1):
        rec[..., j] = (ez - j * rec[..., j - 1]) / zl

    return np.where(small[..., None], series, rec)


def interval_stencils(n_r: int, linear: bool = False) -> np.ndarray:
    """Node indices of the interpolation stencil used on each radial interval"""
    if linear or n_r < 4:
        return np.array([[i, i + 1] for i in range(n_r - 1)], dtype=int)
    rows = []
    for i in range(n_r - 1):
        if i == 0:
            start = 0
        elif i == n_r - 2:
            start = n_r - 4
        else:
            start = i - 1
        rows.append(list(range(start, start + 4)))
    return np.array(rows, dtype=int)


def interval_weight_table(stencils: np.ndarray, h: float, z: np.ndarray, anchor: str) -> np.ndarray:
    """
    Weights for int_0^h F(anchor +/- sigma) e^(a sigma) d sigma over every interval.

    `z` holds the products a*h (one per exponent). With anchor 'left' the
    variable runs upward from node i; with 'right' it runs downward from node
    i+1. Returns an array of shape (intervals, len(z), stencil size).
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    n_int, size = stencils.shape
    moments = exp_moments(z, size - 1)
    table = np.empty((n_int, z.size, size))
    cache: Dict[Tuple[int, ...], np.ndarray] = {}
    for i in range(n_int):
        if anchor == 'left':
            offsets = tuple(int(v) for v in stencils[i] - i)
        else:
            offsets = tuple(int(v) for v in (i + 1) - stencils[i])
        if offsets not in cache:
            vander = np.vander(np.array(offsets, dtype=float), size, increasing=True)
            cache[offsets] = h * moments @ np.linalg.inv(vander)
        table[i] = cache[offsets]
    return table


def _radial_weights(s: np.ndarray, h: float, exponent: float, linear: bool = False) -> np.ndarray:
    """Weights W with sum W_i F(s_i) = int F(s) e^(exponent s) ds"""
    stencils = interval_stencils(s.size, linear=linear)
    table = interval_weight_table(stencils, h, np.array([exponent * h]), 'left')[:, 0, :]
    scaled = table * np.exp(exponent * s[:-1])[:, None]
    weights = np.zeros_like(s)
    np.add.at(weights, stencils, scaled)
    return weights


# ---------------------------------------------------------------------------
# Grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AnnulusGrid:
    """Log-polar grid with quadrature weights in the chosen metric"""
    t: complex
    n_theta: int
    charts: int
    metric: str
    step: float
    s: np.ndarray
    radii: np.ndarray
    weights: np.ndarray

    @property
    def n_r(self) -> int:
        return int(self.radii.size)

    @property
    def r_levels(self) -> np.ndarray:
        return self.radii

    @property
    def shape(self) -> Tuple[int, int, int]:
        return (self.charts, self.n_r, self.n_theta)

    @property
    def is_nodal(self) -> bool:
        return self.t == 0

    @property
    def r_min(self) -> float:
        return float(self.radii[0])

    @cached_property
    def theta(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_theta) / self.n_theta

    @cached_property
    def modes(self) -> np.ndarray:
        return np.rint(np.fft.fftfreq(self.n_theta, d=1.0 / self.n_theta)).astype(int)

    @cached_property
    def coordinates(self) -> np.ndarray:
        """Chart coordinate z at every sample, shape (n_r, n_theta)"""
        return self.radii[:, None] * np.exp(1j * self.theta)[None, :]

    def points(self, chart: int = 0) -> np.ndarray:
        self._check_chart(chart)
        return self.coordinates

    def x_points(self, chart: int) -> np.ndarray:
        """x-coordinate of the samples of a chart of an annulus grid"""
        self._check_chart(chart)
        if chart == 0:
            return self.coordinates
        if self.t == 0:
            raise ParameterDomainError('the y-branch of the nodal model has no x-coordinate')
        return self.t / self.coordinates

    def compatible(self, other: 'AnnulusGrid') -> bool:
        if other is self:
            return True
        return (
            self.t == other.t
            and self.shape == other.shape
            and math.isclose(self.step, other.step, rel_tol=1e-12)
        )

    def radial_mask(self, lo: float = 0.0, hi: float = np.inf) -> np.ndarray:
        """Boolean mask of samples whose chart radius lies in [lo, hi]"""
        inside = (self.radii >= lo * (1 - 1e-12)) & (self.radii <= hi * (1 + 1e-12))
        return np.broadcast_to(inside[None, :, None], self.shape).copy()

    def zeros(self, trailing: Sequence[int] = (2,)) -> np.ndarray:
        return np.zeros(self.shape + tuple(trailing), dtype=complex)

    def area(self) -> float:
        return float(np.sum(self.weights))

    def _check_chart(self, chart: int):
        if chart < 0 or chart >= self.charts:
            raise ParameterError(f'chart {chart} not present on a {self.charts}-chart grid')

    # -- derivative stencils -------------------------------------------------

    @cached_property
    def _stencil(self) -> Tuple[np.ndarray, np.ndarray]:
        return _fd_stencil(self.n_r, self.step)

    @cached_property
    def _dbar_coefficients(self) -> np.ndarray:
        return self._mode_coefficients(-1)

    @cached_property
    def _partial_coefficients(self) -> np.ndarray:
        return self._mode_coefficients(+1)

    def _mode_coefficients(self, sign: int) -> np.ndarray:
        """Per-mode banded matrices for (d/ds + sign*n), fitted to e^(-sign*n*s) when resolved"""
        cols, coefs = self._stencil
        offsets = self.s[cols] - self.s[:, None]
        diagonal = (cols == np.arange(self.n_r)[:, None])
        out = np.empty((self.n_theta,) + coefs.shape)
        for k, n in enumerate(self.modes):
            if abs(n) * self.step <= 2.0:
                out[k] = coefs * np.exp(np.clip(sign * n * offsets, -700.0, 700.0))
            else:
                out[k] = coefs + sign * n * diagonal
        return out


def _fd_stencil(n_r: int, h: float) -> Tuple[np.ndarray, np.ndarray]:
    """Banded d/ds stencil: columns and coefficients per row"""
    cols = np.full((n_r, 5), -1, dtype=int)
    coefs = np.zeros((n_r, 5))
    if n_r >= 5:
        for i in range(n_r):
            if i == 0:
                cols[i] = range(0, 5)
                coefs[i] = [-25, 48, -36, 16, -3]
            elif i == 1:
                cols[i] = range(0, 5)
                coefs[i] = [-3, -10, 18, -6, 1]
            elif i == n_r - 2:
                cols[i] = range(n_r - 5, n_r)
                coefs[i] = [-1, 6, -18, 10, 3]
            elif i == n_r - 1:
                cols[i] = range(n_r - 5, n_r)
                coefs[i] = [3, -16, 36, -48, 25]
            else:
                cols[i] = range(i - 2, i + 3)
                coefs[i] = [1, -8, 0, 8, -1]
        return cols, coefs / (12.0 * h)

    if n_r == 2:
        cols[:, :2] = [0, 1]
        coefs[:, :2] = [-1.0 / h, 1.0 / h]
        return cols, coefs
    for i in range(n_r):
        if i == 0:
            cols[i, :3] = [0, 1, 2]
            coefs[i, :3] = [-3, 4, -1]
        elif i == n_r - 1:
            cols[i, :3] = [n_r - 3, n_r - 2, n_r - 1]
            coefs[i, :3] = [1, -4, 3]
        else:
            cols[i, :3] = [i - 1, i, i + 1]
            coefs[i, :3] = [-1, 0, 1]
    return cols, coefs / (2.0 * h)


def _make_grid(t: complex, s: np.ndarray, h: float, n_theta: int, charts: int, metric: str) -> AnnulusGrid:
    radial = _radial_weights(s, h, 2.0)
    if metric == 'induced' and t != 0:
        radial = radial + abs(t) ** 2 * _radial_weights(s, h, -2.0)
    if s.size < 4 or np.any(radial <= 0):
        radial = _radial_weights(s, h, 2.0, linear=True)
        if metric == 'induced' and t != 0:
            radial = radial + abs(t) ** 2 * _radial_weights(s, h, -2.0, linear=True)

    weights = np.broadcast_to(
        (2.0 * np.pi / n_theta) * radial[None, :, None], (charts, s.size, n_theta)
    ).copy()
    return AnnulusGrid(
        t=complex(t),
        n_theta=int(n_theta),
        charts=int(charts),
        metric=metric,
        step=float(h),
        s=s,
        radii=np.exp(s),
        weights=weights,
    )


def build_annulus_grid(
    t: complex,
    n_r: int,
    n_theta: int,
    charts: Optional[int] = None,
    metric: Optional[str] = None,
    r_min: Optional[float] = None,
) -> AnnulusGrid:
    """Build the log-polar grid on A_t (or on the punctured disk when t = 0)"""
    t = complex(t)
    if not np.isfinite(abs(t)) or abs(t) >= 1.0:
        raise ParameterDomainError(f'gluing parameter must satisfy |t| < 1, got {t}', {'t_abs': abs(t)})
    if int(n_r) < 2:
        raise GridSizeError(f'need at least 2 radial levels, got {n_r}', {'n_r': n_r})
    n_theta = int(n_theta)
    if n_theta < 8 or n_theta & (n_theta - 1):
        raise GridSizeError(f'n_theta must be a power of two >= 8, got {n_theta}', {'n_theta': n_theta})
    metric = metric or Config.METRIC
    if metric not in METRICS:
        raise ParameterError(f'unknown metric {metric!r}', {'metric': metric})

    if t != 0:
        if charts not in (None, 2):
            raise ParameterError('annulus grids always carry two charts', {'charts': charts})
        charts = 2
        inner = math.sqrt(abs(t))
    else:
        charts = 1 if charts is None else int(charts)
        if charts not in (1, 2):
            raise ParameterError('nodal grids carry one or two charts', {'charts': charts})
        inner = Config.R_MIN if r_min is None else float(r_min)
        if not 0.0 < inner < 1.0:
            raise ParameterDomainError(f'r_min must lie in (0, 1), got {inner}')

    n_r = int(n_r)
    h = -math.log(inner) / (n_r - 1)
    s = -(n_r - 1 - np.arange(n_r)) * h
    grid = _make_grid(t, s, h, n_theta, charts, metric)
    logger.debug('[Grid] t=%s n_r=%d n_theta=%d charts=%d h=%.4g', t, n_r, n_theta, charts, h)
    return grid


def build_nodal_grid(annulus: AnnulusGrid, r_min: Optional[float] = None) -> AnnulusGrid:
    """
    Two-branch t = 0 grid sharing the radial step of `annulus`.

    Radius i of the annulus is nodal radius aligned_offset + i, and the
    reflected radius |t|/r_i is nodal radius nodal.n_r - 1 - (annulus.n_r - 1 + i).
    """
    if annulus.t == 0:
        raise ParameterDomainError('alignment needs an annulus grid with t != 0')
    inner = Config.R_MIN if r_min is None else float(r_min)
    h = annulus.step
    depth = max(int(math.ceil(-math.log(inner) / h)), 2 * (annulus.n_r - 1))
    s = -(depth - np.arange(depth + 1)) * h
    return _make_grid(0j, s, h, annulus.n_theta, 2, annulus.metric)


def aligned_offset(annulus: AnnulusGrid, nodal: AnnulusGrid) -> int:
    return nodal.n_r - annulus.n_r


def metric_weight(x, t) -> float:
    """Conformal factor 1 + |t|^2/|x|^4 of the metric induced by x -> (x, t/x)"""
    x = complex(x)
    t = complex(t)
    if x == 0:
        raise SingularPointError('metric weight is singular at x = 0')
    if t == 0:
        return 1.0
    r = abs(x)
    if r > 1.0 + 1e-12 or r < math.sqrt(abs(t)) * (1 - 1e-12):
        raise ParameterDomainError(f'|x| = {r} outside [|t|^(1/2), 1]', {'x_abs': r, 't_abs': abs(t)})
    return 1.0 + abs(t) ** 2 / r ** 4


# ---------------------------------------------------------------------------
# Sampled fields
# ---------------------------------------------------------------------------

class GridField:
    """Complex samples on a grid with pointwise arithmetic"""

    def __init__(self, grid: AnnulusGrid, data, check_finite: bool = True):
        arr = np.asarray(data, dtype=complex)
        if arr.ndim < 3 or arr.shape[:3] != grid.shape:
            raise ShapeError(
                f'samples of shape {arr.shape} do not match grid {grid.shape}',
                {'shape': list(arr.shape), 'grid': list(grid.shape)},
            )
        if check_finite and not np.all(np.isfinite(arr)):
            raise InputError('samples must be finite')
        self.grid = grid
        self.data = arr

    @property
    def trailing(self) -> Tuple[int, ...]:
        return self.data.shape[3:]

    def _new(self, data):
        return type(self)(self.grid, data, check_finite=False)

    def _other(self, other):
        if isinstance(other, GridField):
            if type(other) is not type(self):
                raise ShapeError(f'cannot combine {type(self).__name__} with {type(other).__name__}')
            if not self.grid.compatible(other.grid):
                raise ShapeError('fields live on different grids')
            return other.data
        return other

    def __add__(self, other):
        return self._new(self.data + self._other(other))

    def __sub__(self, other):
        return self._new(self.data - self._other(other))

    def __neg__(self):
        return self._new(-self.data)

    def __mul__(self, scalar):
        if isinstance(scalar, GridField):
            raise ShapeError('fields multiply by scalars only')
        return self._new(self.data * scalar)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return self._new(self.data / scalar)

    def conj(self):
        return self._new(np.conj(self.data))

    def copy(self):
        return self._new(self.data.copy())


class MapSample(GridField):
    """Sampled map or section A_t -> C^n"""

    @property
    def values(self) -> np.ndarray:
        return self.data

    @property
    def n(self) -> int:
        return int(self.data.shape[3]) if self.data.ndim > 3 else 1


class ZeroOneForm(GridField):
    """Sampled coefficient g of a (0,1)-form g dxbar"""

    @property
    def coeff(self) -> np.ndarray:
        return self.data

    @property
    def n(self) -> int:
        return int(self.data.shape[3]) if self.data.ndim > 3 else 1


def constant_map(grid: AnnulusGrid, value: Sequence[complex]) -> MapSample:
    value = np.asarray(value, dtype=complex)
    return MapSample(grid, np.broadcast_to(value, grid.shape + value.shape).copy())


def map_from_function(grid: AnnulusGrid, func, chart: int = 0) -> np.ndarray:
    """Evaluate func(z) on the chart coordinates; returns the raw sample block"""
    return np.asarray(func(grid.points(chart)), dtype=complex)


# ---------------------------------------------------------------------------
# Derivatives
# ---------------------------------------------------------------------------

def _mode_derivative(grid: AnnulusGrid, data: np.ndarray, sign: int) -> np.ndarray:
    """(d_s + sign*i*d_theta) per angular mode, times e^(-sign*i*theta)/(2r)"""
    charts, n_r, n_theta = grid.shape
    trailing = data.shape[3:]
    coeffs = np.fft.fft(data, axis=2) / n_theta
    flat = coeffs.reshape(charts, n_r, n_theta, -1)

    cols, _ = grid._stencil
    banded = grid._partial_coefficients if sign > 0 else grid._dbar_coefficients
    gathered = flat[:, cols]
    out = np.einsum('kib,cibkm->cikm', banded, gathered)

    phys = np.fft.ifft(out, axis=2) * n_theta
    factor = np.exp(-sign * 1j * grid.theta)[None, :] / (2.0 * grid.radii[:, None])
    phys = phys * factor[None, :, :, None]
    return phys.reshape((charts, n_r, n_theta) + trailing)


def dbar(f: GridField) -> ZeroOneForm:
    """Coefficient of dxbar in the Cauchy-Riemann derivative of f"""
    return ZeroOneForm(f.grid, _mode_derivative(f.grid, f.data, -1), check_finite=False)


def partial(f: GridField) -> MapSample:
    """Coefficient of dx in the derivative of f"""
    return MapSample(f.grid, _mode_derivative(f.grid, f.data, +1), check_finite=False)


class ResolvedSection:
    """
    A sampled section together with its derivatives.

    Sections produced by the right inverses know their dbar exactly (it is the
    form they were built from) and their holomorphic derivative through the
    per-mode transform formulas. Residuals of equations are then measured in
    this exact discrete algebra instead of through finite differences.
    Missing derivatives fall back to the spectral stencils.
    """

    def __init__(self, values: MapSample, dbar_form: Optional[ZeroOneForm] = None,
                 partial_map: Optional[MapSample] = None):
        self.values = values
        self._dbar = dbar_form
        self._partial = partial_map

    @classmethod
    def from_sample(cls, f: GridField) -> 'ResolvedSection':
        return cls(MapSample(f.grid, f.data, check_finite=False))

    @property
    def grid(self) -> AnnulusGrid:
        return self.values.grid

    @property
    def data(self) -> np.ndarray:
        return self.values.data

    @property
    def dbar(self) -> ZeroOneForm:
        if self._dbar is None:
            self._dbar = dbar(self.values)
        return self._dbar

    @property
    def partial(self) -> MapSample:
        if self._partial is None:
            self._partial = partial(self.values)
        return self._partial

    def __add__(self, other: 'ResolvedSection') -> 'ResolvedSection':
        return ResolvedSection(self.values + other.values, self.dbar + other.dbar, self.partial + other.partial)

    def __sub__(self, other: 'ResolvedSection') -> 'ResolvedSection':
        return ResolvedSection(self.values - other.values, self.dbar - other.dbar, self.partial - other.partial)

    def __neg__(self) -> 'ResolvedSection':
        return ResolvedSection(-self.values, -self.dbar, -self.partial)

    def __mul__(self, scalar) -> 'ResolvedSection':
        return ResolvedSection(self.values * scalar, self.dbar * scalar, self.partial * scalar)

    __rmul__ = __mul__

    def l1p_norm(self, p: float, mask: Optional[np.ndarray] = None) -> float:
        _check_p(p)
        return (
            lp_norm(self.values, p, mask)
            + lp_norm(self.partial, p, mask)
            + lp_norm(self.dbar, p, mask)
        )


def zero_section(grid: AnnulusGrid, n: int = 2) -> ResolvedSection:
    zeros = grid.zeros((n,))
    return ResolvedSection(MapSample(grid, zeros), ZeroOneForm(grid, zeros), MapSample(grid, zeros))


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def pointwise_abs(data: np.ndarray) -> np.ndarray:
    if data.ndim == 3:
        return np.abs(data)
    axes = tuple(range(3, data.ndim))
    return np.sqrt(np.sum(np.abs(data) ** 2, axis=axes))


def _check_p(p: float):
    if not np.isfinite(p) or p <= 2.0:
        raise ParameterError(f'L^p norms need 2 < p < inf, got p = {p}', {'p': p})


def _masked_weights(grid: AnnulusGrid, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return grid.weights
    return grid.weights * np.broadcast_to(mask, grid.shape)


def integrate(f: GridField, mask: Optional[np.ndarray] = None) -> complex:
    """Quadrature of a scalar field"""
    if f.data.ndim != 3:
        raise ShapeError('integrate expects a scalar field')
    return complex(np.sum(_masked_weights(f.grid, mask) * f.data))


def lp_norm(f: GridField, p: float, mask: Optional[np.ndarray] = None) -> float:
    """(int |f|^p dA)^(1/p) in the grid metric"""
    _check_p(p)
    magnitude = pointwise_abs(f.data)
    peak = float(np.max(magnitude)) if magnitude.size else 0.0
    if peak == 0.0:
        return 0.0
    total = np.sum(_masked_weights(f.grid, mask) * (magnitude / peak) ** p)
    return float(peak * total ** (1.0 / p))


def l1p_norm(f: GridField, p: float, mask: Optional[np.ndarray] = None) -> float:
    """L^p_1 norm: ||f|| + ||df|| + ||dbar f||"""
    _check_p(p)
    return lp_norm(f, p, mask) + lp_norm(partial(f), p, mask) + lp_norm(dbar(f), p, mask)


def inner_product(f: GridField, g: GridField, mask: Optional[np.ndarray] = None) -> complex:
    """Hermitian L^2 product, summed over trailing components"""
    prod = f.data * np.conj(g.data)
    if prod.ndim > 3:
        prod = np.sum(prod, axis=tuple(range(3, prod.ndim)))
    return complex(np.sum(_masked_weights(f.grid, mask) * prod))


def l2_norm(f: GridField, mask: Optional[np.ndarray] = None) -> float:
    return math.sqrt(max(inner_product(f, f, mask).real, 0.0))


def sup_norm(f: GridField, mask: Optional[np.ndarray] = None) -> float:
    magnitude = pointwise_abs(f.data)
    if mask is not None:
        magnitude = np.where(np.broadcast_to(mask, f.grid.shape), magnitude, 0.0)
    return float(np.max(magnitude))


def boundary_sup_norm(f: GridField) -> float:
    """Sup norm over the outer circles of every chart"""
    return float(np.max(pointwise_abs(f.data)[:, -1, :]))


# ---------------------------------------------------------------------------
# Cutoffs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CutoffProfile:
    """C^2 smoothstep: 0 for s <= 1, 1 for s >= 2"""
    name: str = 'smoothstep'

    def rho(self, s):
        u = np.clip(np.asarray(s, dtype=float) - 1.0, 0.0, 1.0)
        return u ** 3 * (10.0 - 15.0 * u + 6.0 * u ** 2)

    def rho_prime(self, s):
        u = np.clip(np.asarray(s, dtype=float) - 1.0, 0.0, 1.0)
        return 30.0 * u ** 2 * (1.0 - u) ** 2

    __call__ = rho

    @property
    def derivative_bound(self) -> float:
        return 1.875


SMOOTHSTEP = CutoffProfile()


def _check_delta(delta: float):
    if not 0.0 < delta < 1.0:
        raise ParameterDomainError(f'delta must lie in (0, 1), got {delta}', {'delta': delta})


def beta_cutoff(delta: float, z, profile: CutoffProfile = SMOOTHSTEP):
    """beta_delta(z) = rho(4 log|z| / log delta); equal to 1 at z = 0"""
    _check_delta(delta)
    r = np.abs(np.asarray(z, dtype=complex))
    with np.errstate(divide='ignore'):
        arg = np.where(r > 0, 4.0 * np.log(np.where(r > 0, r, 1.0)) / math.log(delta), np.inf)
    value = profile.rho(arg)
    return float(value) if np.ndim(value) == 0 else value


def beta_gradient(delta: float, z, profile: CutoffProfile = SMOOTHSTEP):
    """|grad beta_delta(z)|; zero at z = 0"""
    _check_delta(delta)
    r = np.abs(np.asarray(z, dtype=complex))
    safe = np.where(r > 0, r, 1.0)
    arg = 4.0 * np.log(safe) / math.log(delta)
    grad = np.where(r > 0, np.abs(profile.rho_prime(arg)) * 4.0 / (safe * abs(math.log(delta))), 0.0)
    return float(grad) if np.ndim(grad) == 0 else grad


def beta_radial_derivative(delta: float, r, profile: CutoffProfile = SMOOTHSTEP):
    """Signed d(beta_delta)/dr for r > 0"""
    _check_delta(delta)
    r = np.asarray(r, dtype=float)
    log_delta = math.log(delta)
    return profile.rho_prime(4.0 * np.log(r) / log_delta) * 4.0 / (r * log_delta)


def radial_derivatives(grid: AnnulusGrid, dfdr) -> Tuple[np.ndarray, np.ndarray]:
    """dbar and d of a radial function in chart coordinates, given f'(r) per radius"""
    z = grid.coordinates
    half = np.asarray(dfdr, dtype=float)[:, None] / (2.0 * grid.radii[:, None])
    return half * z, half * np.conj(z)


def beta_gradient_integral(delta: float, p: float, profile: CutoffProfile = SMOOTHSTEP) -> float:
    """int_C |grad beta_delta|^p |z|^(p-2) dA, integrated radially in log r"""

    _check_delta(delta)
    _check_p(p)
    lo = 0.5 * math.log(delta)
    hi = 0.25 * math.log(delta)

    def integrand(s):
        r = math.exp(s)
        return float(beta_gradient(delta, r, profile)) ** p * r ** p

    value, _ = quad(integrand, lo, hi, limit=200, epsabs=0.0, epsrel=1e-12)
    return 2.0 * math.pi * value


# ---------------------------------------------------------------------------
# Random test data
# ---------------------------------------------------------------------------

def random_smooth_data(
    grid: AnnulusGrid,
    rng: np.random.Generator,
    trailing: Sequence[int] = (2,),
    max_mode: int = 4,
    radial_terms: int = 3,
) -> np.ndarray:
    """Low angular modes times low cosines in log r, normalized to unit peak"""
    charts, n_r, n_theta = grid.shape
    span = grid.s[-1] - grid.s[0]
    u = (grid.s - grid.s[0]) / span if span > 0 else np.zeros_like(grid.s)
    data = np.zeros(grid.shape + tuple(trailing), dtype=complex)
    size = tuple(trailing)
    for c in range(charts):
        for k in range(-max_mode, max_mode + 1):
            angular = np.exp(1j * k * grid.theta)
            for l in range(radial_terms):
                coeff = rng.standard_normal(size) + 1j * rng.standard_normal(size)
                radial = np.cos(math.pi * l * u)
                data[c] += (radial[:, None] * angular[None, :])[(...,) + (None,) * len(size)] * coeff
    peak = np.max(pointwise_abs(data))
    return data / peak if peak > 0 else data


def random_smooth_sample(grid, rng, n: int = 2, max_mode: int = 4, radial_terms: int = 3, kind=MapSample):
    return kind(grid, random_smooth_data(grid, rng, (n,), max_mode, radial_terms))


def trial_generators(seed: int, trials: int) -> List[np.random.Generator]:
    """Independent generators per trial, derived from one seed"""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(trials)]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def to_json_envelope(f: GridField) -> Dict:
    grid = f.grid
    return {
        't_re': grid.t.real,
        't_im': grid.t.imag,
        'n_r': grid.n_r,
        'n_theta': grid.n_theta,
        'charts': grid.charts,
        'metric': grid.metric,
        'r_min': grid.r_min,
        'kind': type(f).__name__,
        'shape': list(f.data.shape),
        'values': [[float(v.real), float(v.imag)] for v in f.data.ravel()],
    }


def from_json_envelope(doc: Dict) -> GridField:
    try:
        t = complex(doc['t_re'], doc['t_im'])
        grid = build_annulus_grid(
            t,
            doc['n_r'],
            doc['n_theta'],
            charts=doc.get('charts'),
            metric=doc.get('metric'),
            r_min=doc.get('r_min') if t == 0 else None,
        )
        pairs = np.asarray(doc['values'], dtype=float)
        data = (pairs[:, 0] + 1j * pairs[:, 1]).reshape(doc['shape'])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, (ParameterDomainError, GridSizeError, ParameterError)):
            raise
        raise InputError(f'malformed sample envelope: {e}') from e
    kind = ZeroOneForm if doc.get('kind') == 'ZeroOneForm' else MapSample
    return kind(grid, data)


def dump_json(f: GridField, path: str):
    with open(path, 'w') as fh:
        json.dump(to_json_envelope(f), fh)


def write_norm_csv(path: str, rows: Iterable[Tuple[float, float, float]]):
    """Norm sweep CSV with columns t_abs, p, norm"""
    with open(path, 'w', newline='') as fh:
        writer = csv.writer(fh)
        writer.writerow(['t_abs', 'p', 'norm'])
        for t_abs, p, norm in rows:
            writer.writerow([f'{t_abs:.12e}', f'{p:.6g}', f'{norm:.12e}'])
