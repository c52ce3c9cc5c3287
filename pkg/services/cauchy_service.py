"""
Singular integral operators on the disk and on the annulus xy = t.

The Cauchy transform Pg(x) = -(1/pi) int g(z)/(z - x) dA is diagonal in the
angular index on a log-polar grid: mode n of g feeds mode n-1 of Pg through
a one-sided radial integral, which is integrated exactly against the
interpolant of the samples. Nothing two-dimensional is ever desingularized.
"""
import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.settings import Config
from utils.errors import ArtifactIOError, ParameterDomainError, ParameterError, RankError, ShapeError, ThresholdError
from utils.geometry import (
    AnnulusGrid,
    GridField,
    MapSample,
    ResolvedSection,
    ZeroOneForm,
    build_annulus_grid,
    dbar,
    interval_stencils,
    interval_weight_table,
    l1p_norm,
    l2_norm,
    lp_norm,
    random_smooth_sample,
    sup_norm,
    trial_generators,
)

logger = logging.getLogger(__name__)

INNER_FILLS = ('regular', 'zero')

NormSelector = Union[float, int, str]


@dataclass
class OperatorNormEstimate:
    """Largest observed ratio |op f| / |f| over seeded random trials (a lower bound)"""
    p: float
    estimate: float
    trials: int
    seed: int
    name: str = 'operator'
    t_abs: float = 0.0
    target: str = ''


@dataclass
class ResolventResult:
    phi: MapSample
    iterations: int
    residual: float
    contraction: float
    threshold_factor: float
    sup_phi: float
    sup_phi_inverse: float
    history: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Mode-space helpers
# ---------------------------------------------------------------------------

def _to_modes(data: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    charts, n_r, n_theta = data.shape[:3]
    trailing = data.shape[3:]
    coeffs = np.fft.fft(data, axis=2) / n_theta
    return coeffs.reshape(charts, n_r, n_theta, -1), trailing


def _from_modes(coeffs: np.ndarray, trailing: Sequence[int]) -> np.ndarray:
    n_theta = coeffs.shape[2]
    phys = np.fft.ifft(coeffs, axis=2) * n_theta
    return phys.reshape(coeffs.shape[:3] + tuple(trailing))


def _radial_profile(grid: AnnulusGrid, coeffs: np.ndarray, inner_fill: str) -> np.ndarray:
    """
    Radial profile of the mode n-1 part of the Cauchy transform, indexed by
    the input mode n. `coeffs` is one chart of mode coefficients (n_r, N, M).

    n <= 0:  2 r^(n-1) int_0^r g_n rho^(1-n) drho   (accumulated outward)
    n >= 1: -2 r^(n-1) int_r^1 g_n rho^(1-n) drho   (accumulated inward)
    """
    n_r, n_theta = grid.n_r, grid.n_theta
    modes = grid.modes
    h, s = grid.step, grid.s
    lower = modes <= 0
    upper = ~lower
    expo = (2 - modes).astype(float)

    stencils = interval_stencils(n_r)
    gathered = coeffs[stencils]
    left = interval_weight_table(stencils, h, expo * h, 'left')
    right = interval_weight_table(stencils, h, -expo * h, 'right')
    from_left = np.einsum('iks,iskm->ikm', left, gathered)
    from_right = np.einsum('iks,iskm->ikm', right, gathered)
    from_left[:, lower] = 0.0
    from_right[:, upper] = 0.0

    outward = np.zeros_like(coeffs)
    if inner_fill == 'regular':
        # g_n(rho) ~ g_n(r0) (rho/r0)^|n| below the innermost ring
        denom = np.where(lower, 2.0 - 2.0 * modes, 1.0)
        outward[0] = np.where(lower[:, None], coeffs[0] * (grid.radii[0] / denom)[:, None], 0.0)
    decay_out = np.where(lower, np.exp(np.minimum(modes - 1, 0) * h), 0.0)[:, None]
    for i in range(n_r - 1):
        outward[i + 1] = decay_out * outward[i] + math.exp(s[i + 1]) * from_right[i]

    inward = np.zeros_like(coeffs)
    decay_in = np.where(upper, np.exp(-np.maximum(modes - 1, 0) * h), 0.0)[:, None]
    for i in range(n_r - 2, -1, -1):
        inward[i] = decay_in * inward[i + 1] + math.exp(s[i]) * from_left[i]

    profile = np.where(lower[None, :, None], 2.0 * outward, -2.0 * inward)
    profile[:, modes == -(n_theta // 2)] = 0.0
    return profile


def _beurling_profile(grid: AnnulusGrid, coeffs: np.ndarray, profile: np.ndarray) -> np.ndarray:
    """Mode n-2 coefficient of d(Pg): g_n + (n-1) (Pg)_(n-1) / r, indexed by n"""
    modes = grid.modes
    out = coeffs + (modes - 1)[None, :, None] * profile / grid.radii[:, None, None]
    out[:, modes <= -(grid.n_theta // 2) + 1] = 0.0
    return out


def _reflected_tail(grid: AnnulusGrid, profile: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    The holomorphic continuation of one half's transform, seen from the other
    chart of the annulus, and its derivative. Output mode m = n-1 >= 0 becomes
    mode -m in the other coordinate.
    """
    n_r, n_theta = grid.n_r, grid.n_theta
    modes = grid.modes
    sel = np.nonzero(modes >= 1)[0]
    m = modes[sel] - 1
    edge = profile[0, sel]
    phase = np.exp(1j * m * np.angle(grid.t))
    radial = np.exp(np.outer(grid.s[0] - grid.s, m))

    values = np.zeros_like(profile)
    values[:, (-m) % n_theta] = radial[:, :, None] * (edge * phase[:, None])[None]

    deriv = np.zeros_like(profile)
    keep = m >= 1
    scale = (-m[keep])[None, :] / grid.radii[:, None]
    deriv[:, (-m[keep] - 1) % n_theta] = (
        (radial[:, keep] * scale)[:, :, None] * (edge[keep] * phase[keep, None])[None]
    )
    return values, deriv


def _norm(f, selector: NormSelector) -> float:
    if isinstance(f, ResolvedSection):
        if isinstance(selector, str) and selector.startswith('l1p'):
            return f.l1p_norm(float(selector.split(':')[1]))
        f = f.values
    if isinstance(selector, str):
        if selector == 'sup':
            return sup_norm(f)
        if selector == 'l2':
            return l2_norm(f)
        if selector.startswith('l1p:'):
            return l1p_norm(f, float(selector.split(':')[1]))
        raise ParameterError(f'unknown norm selector {selector!r}')
    return lp_norm(f, float(selector))


def _selector_exponent(selector: NormSelector) -> float:
    if isinstance(selector, str):
        if selector == 'sup':
            return math.inf
        if selector == 'l2':
            return 2.0
        return float(selector.split(':')[1])
    return float(selector)


# ---------------------------------------------------------------------------
# Service
# ---------------------------------------------------------------------------

class CauchyService:
    """Cauchy, Beurling and annulus right-inverse operators, projections and the resolvent"""

    def __init__(self, threads: Optional[int] = None, trials: Optional[int] = None, seed: Optional[int] = None,
                 resolvent_tol: Optional[float] = None, max_iter: Optional[int] = None):
        self.threads = threads or Config.THREADS
        self.trials = trials or Config.NORM_TRIALS
        self.seed = Config.SEED if seed is None else seed
        self.resolvent_tol = resolvent_tol or Config.RESOLVENT_TOL
        self.max_iter = max_iter or Config.MAX_ITER
        self._sup_norms: Dict[Tuple, float] = {}

    # -- transforms ----------------------------------------------------------

    def cauchy_transform(self, g: GridField, inner_fill: str = 'regular') -> MapSample:
        """Pg on the disk (or on each branch of a two-chart nodal grid)"""
        if g.grid.t != 0:
            raise ShapeError('cauchy_transform expects a disk grid; use annulus_right_inverse on A_t')
        values, _ = self._transform(g, inner_fill)
        return values

    def beurling_transform(self, g: GridField) -> ZeroOneForm:
        """Tg = d(Pg), evaluated exactly from the mode recurrences"""
        _, deriv = self._transform(g, 'regular' if g.grid.t == 0 else 'zero')
        return ZeroOneForm(g.grid, deriv.data, check_finite=False)

    def annulus_right_inverse(self, alpha: GridField) -> MapSample:
        """P_t: split alpha along |x| = |y| and transform each half in its own coordinate"""
        if alpha.grid.t == 0:
            raise ParameterDomainError('P_t needs t != 0; apply cauchy_transform per branch instead')
        values, _ = self._transform(alpha, 'zero')
        return values

    def right_inverse(self, alpha: GridField, normalized: bool = False) -> ResolvedSection:
        """
        P_t (or the per-branch disk transform) with its derivatives attached.
        With `normalized` the boundary-holomorphic content is removed and, on a
        nodal grid, the branch values are matched at the node first.
        """
        grid = alpha.grid
        inner_fill = 'regular' if grid.t == 0 else 'zero'
        values, deriv = self._transform(alpha, inner_fill)
        form = ZeroOneForm(grid, alpha.data, check_finite=False)
        section = ResolvedSection(values, form, deriv)
        if not normalized:
            return section
        if grid.t == 0 and grid.charts == 2:
            shift = self.node_values(values)[0] - self.node_values(values)[1]
            data = values.data.copy()
            data[1] += shift
            section = ResolvedSection(MapSample(grid, data, check_finite=False), form, deriv)
        return self.normalize(section)

    def _transform(self, g: GridField, inner_fill: str) -> Tuple[MapSample, MapSample]:
        if inner_fill not in INNER_FILLS:
            raise ParameterError(f'unknown inner fill {inner_fill!r}')
        grid = g.grid
        coeffs, trailing = _to_modes(g.data)
        values = np.zeros_like(coeffs)
        deriv = np.zeros_like(coeffs)
        for c in range(grid.charts):
            profile = _radial_profile(grid, coeffs[c], inner_fill)
            values[c] += np.roll(profile, -1, axis=1)
            deriv[c] += np.roll(_beurling_profile(grid, coeffs[c], profile), -2, axis=1)
            if grid.t != 0:
                tail, tail_deriv = _reflected_tail(grid, profile)
                values[1 - c] += tail
                deriv[1 - c] += tail_deriv
        return (
            MapSample(grid, _from_modes(values, trailing), check_finite=False),
            MapSample(grid, _from_modes(deriv, trailing), check_finite=False),
        )

    # -- projections ---------------------------------------------------------

    @staticmethod
    def node_values(f: GridField) -> np.ndarray:
        """Mean over the innermost ring of each chart (the value at the node of a nodal grid)"""
        return f.data[:, 0].mean(axis=1)

    def boundary_projection(self, f: GridField, with_partial: bool = False):
        """
        H: the holomorphic function whose Laurent content is read off the outer
        circles. Nonnegative x-modes come from |x| = 1, positive y-modes from
        |y| = 1. H fixes holomorphic functions and N = I - H annihilates them.
        """
        grid = f.grid
        n_theta = grid.n_theta
        half = n_theta // 2
        coeffs, trailing = _to_modes(f.data)
        outer = coeffs[:, -1, :half]
        own = np.zeros((grid.charts, half) + outer.shape[2:], dtype=complex)
        other = np.zeros_like(own)
        own[0] = outer[0]
        if grid.charts == 2:
            own[1, 1:] = outer[1, 1:]
            if grid.t == 0:
                own[1, 0] = outer[0, 0]
            else:
                other[0, 1:] = outer[1, 1:]
                other[1] = outer[0]

        values = np.zeros_like(coeffs)
        deriv = np.zeros_like(coeffs)
        j = np.arange(half)
        s = grid.s[:, None]
        for c in range(grid.charts):
            values[c][:, j] = np.exp(s * j)[:, :, None] * own[c][None]
            deriv[c][:, j[1:] - 1] = (j[1:] * np.exp(s * (j[1:] - 1)))[:, :, None] * own[c][None, 1:]
            if grid.t != 0:
                log_t = math.log(abs(grid.t))
                phase = np.exp(1j * j * np.angle(grid.t))
                radial = np.exp(j * log_t - s * j) * phase
                values[c][:, (-j[1:]) % n_theta] += radial[:, 1:, None] * other[c][None, 1:]
                values[c][:, 0] += other[c][None, 0]
                d_radial = -j[1:] * np.exp(j[1:] * log_t - s * (j[1:] + 1)) * phase[1:]
                deriv[c][:, (-j[1:] - 1) % n_theta] += d_radial[:, :, None] * other[c][None, 1:]

        h_values = MapSample(grid, _from_modes(values, trailing), check_finite=False)
        if not with_partial:
            return h_values
        zero = ZeroOneForm(grid, np.zeros_like(f.data), check_finite=False)
        return ResolvedSection(h_values, zero, MapSample(grid, _from_modes(deriv, trailing), check_finite=False))

    def normalize(self, f: Union[GridField, ResolvedSection]):
        """N = I - H"""
        if isinstance(f, ResolvedSection):
            return f - self.boundary_projection(f.values, with_partial=True)
        return f - self.boundary_projection(f)

    def laurent_projection(self, f: GridField) -> MapSample:
        """
        L2-orthogonal projection onto holomorphic functions, mode by mode. On A_t
        the basis is x^k (k >= 0) and y^m = (t/x)^m (m > 0), each bounded by 1;
        on the disk and on nodal branches it is x^k, k >= 0, per chart.
        """
        grid = f.grid
        n_theta = grid.n_theta
        modes = grid.modes
        coeffs, trailing = _to_modes(f.data)
        w = grid.weights[:, :, 0]
        s = grid.s[:, None]
        out = np.zeros_like(coeffs)

        if grid.t == 0:
            keep = modes >= 0
            basis = np.where(keep[None, :], np.exp(s * np.maximum(modes, 0)), 0.0)
            for c in range(grid.charts):
                num = np.einsum('i,ik,ikm->km', w[c], basis, coeffs[c])
                den = np.where(keep, np.einsum('i,ik->k', w[c], basis ** 2), 1.0)
                coef = np.where(keep[:, None], num / den[:, None], 0.0)
                out[c] = basis[:, :, None] * coef[None]
            return MapSample(grid, _from_modes(out, trailing), check_finite=False)

        log_t = math.log(abs(grid.t))
        arg_t = np.angle(grid.t)
        k = modes
        m = np.abs(k)
        decay = np.exp(m * (log_t - s)) * np.exp(1j * m * arg_t)
        growth = np.exp(m * s)
        beta0 = np.where(k >= 0, growth, decay)
        beta1 = np.where(k >= 0, decay, growth)
        mirror = (-k) % n_theta

        num = (
            np.einsum('i,ik,ikm->km', w[0], np.conj(beta0), coeffs[0])
            + np.einsum('i,ik,ikm->km', w[1], np.conj(beta1), coeffs[1][:, mirror])
        )
        den = np.einsum('i,ik->k', w[0], np.abs(beta0) ** 2) + np.einsum('i,ik->k', w[1], np.abs(beta1) ** 2)
        coef = num / den[:, None]
        out[0] = beta0[:, :, None] * coef[None]
        out[1][:, mirror] = beta1[:, :, None] * coef[None]
        return MapSample(grid, _from_modes(out, trailing), check_finite=False)

    # -- resolvent -----------------------------------------------------------

    def sup_operator_norm(self, grid: AnnulusGrid) -> float:
        """Cached estimate of |P_t| from L^inf to L^inf on this grid"""
        key = (grid.t, grid.shape, grid.step, grid.metric)
        if key not in self._sup_norms:
            est = self.estimate_operator_norm(
                lambda a: self.right_inverse(a).values, grid, 'sup', 'sup', name='P_t'
            )
            self._sup_norms[key] = est.estimate
        return self._sup_norms[key]

    def resolvent_solve(self, A: GridField, p: float = 4.0, tol: Optional[float] = None,
                        max_iter: Optional[int] = None) -> ResolventResult:
        """
        Solve dbar Phi = A Phi as Phi = Id + P_t(A Phi) by fixed-point iteration.
        The residual is measured exactly: dbar of the new iterate is A times the old one.
        """
        grid = A.grid
        if A.data.ndim != 5 or A.data.shape[3] != A.data.shape[4]:
            raise ShapeError('A must be a square-matrix field', {'shape': list(A.data.shape)})
        tol = tol or self.resolvent_tol
        max_iter = max_iter or self.max_iter
        n = A.data.shape[3]

        a_sup = float(np.max(np.linalg.norm(A.data, ord=2, axis=(-2, -1))))
        factor = self.sup_operator_norm(grid) * a_sup
        if factor > 0.5:
            logger.warning('[Resolvent] contraction factor %.3g exceeds 1/2', factor)
            raise ThresholdError(
                f'|P_t| |A|_inf = {factor:.4g} exceeds 1/2',
                {'factor': factor, 'a_sup': a_sup},
            )

        identity = np.broadcast_to(np.eye(n, dtype=complex), grid.shape + (n, n))
        phi = identity.copy()
        history: List[float] = []
        previous_step = None
        contraction = 0.0
        residual = math.inf
        iterations = 0
        for iterations in range(1, max_iter + 1):
            product = ZeroOneForm(grid, A.data @ phi, check_finite=False)
            updated = identity + self.right_inverse(product).values.data
            step = float(np.max(np.abs(updated - phi)))
            residual = lp_norm(ZeroOneForm(grid, A.data @ (updated - phi), check_finite=False), p)
            history.append(residual)
            if previous_step:
                contraction = max(contraction, step / previous_step)
            previous_step = step
            phi = updated
            logger.debug('[Resolvent] step %d residual %.3e', iterations, residual)
            if residual <= tol:
                break
        if residual > tol:
            logger.warning('[Resolvent] residual %.3e above %.1e after %d steps', residual, tol, iterations)
            raise ThresholdError(
                f'resolvent iteration stopped at residual {residual:.3e} > {tol:.1e}',
                {'contraction': contraction, 'residual': residual, 'iterations': iterations, 'factor': factor},
            )

        norms = np.linalg.norm(phi, ord=2, axis=(-2, -1))
        try:
            inverse_norms = np.linalg.norm(np.linalg.inv(phi), ord=2, axis=(-2, -1))
        except np.linalg.LinAlgError as e:
            raise RankError(f'resolvent is singular somewhere on the grid: {e}') from e
        logger.info('[Resolvent] %d steps, residual %.3e, factor %.3g', iterations, residual, factor)
        return ResolventResult(
            phi=MapSample(grid, phi),
            iterations=iterations,
            residual=residual,
            contraction=contraction,
            threshold_factor=factor,
            sup_phi=float(np.max(norms)),
            sup_phi_inverse=float(np.max(inverse_norms)),
            history=history,
        )

    # -- norm estimates ------------------------------------------------------

    def estimate_operator_norm(
        self,
        op: Callable,
        grid: AnnulusGrid,
        from_norm: NormSelector = 4.0,
        to_norm: Optional[NormSelector] = None,
        trials: Optional[int] = None,
        seed: Optional[int] = None,
        n: int = 2,
        source_kind=ZeroOneForm,
        name: str = 'operator',
    ) -> OperatorNormEstimate:
        """max over seeded random smooth inputs of |op(f)| / |f|"""
        trials = trials or self.trials
        seed = self.seed if seed is None else seed
        to_norm = from_norm if to_norm is None else to_norm

        def ratio(rng):
            f = random_smooth_sample(grid, rng, n=n, kind=source_kind)
            return _norm(op(f), to_norm) / _norm(f, from_norm)

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            ratios = list(pool.map(ratio, trial_generators(seed, trials)))
        return OperatorNormEstimate(
            p=_selector_exponent(from_norm),
            estimate=float(max(ratios)),
            trials=trials,
            seed=seed,
            name=name,
            t_abs=abs(grid.t),
            target=str(to_norm),
        )

    def measure_dbar_projection_constant(self, grid: AnnulusGrid, trials: Optional[int] = None,
                                         seed: Optional[int] = None) -> OperatorNormEstimate:
        """Measured C in |P_t(dbar xi)|_L2 <= C |xi|_inf; reported, not asserted"""
        return self.estimate_operator_norm(
            lambda xi: self.right_inverse(dbar(xi)).values,
            grid,
            'sup',
            'l2',
            trials=trials,
            seed=seed,
            source_kind=MapSample,
            name='dbar_projection',
        )

    def right_inverse_norm_sweep(self, t_values: Sequence[complex], p: float, n_r: int, n_theta: int,
                                 trials: Optional[int] = None, seed: Optional[int] = None) -> List[OperatorNormEstimate]:
        """|P_t| from L^p to L^p_1 across gluing parameters"""
        estimates = []
        for t in t_values:
            grid = build_annulus_grid(t, n_r, n_theta)
            est = self.estimate_operator_norm(
                self.right_inverse, grid, p, f'l1p:{p:g}', trials=trials, seed=seed, name='P_t'
            )
            logger.info('[Norms] |t|=%.1e |P_t| >= %.4f', abs(t), est.estimate)
            estimates.append(est)
        return estimates

    @staticmethod
    def write_operator_norm_csv(path: str, estimates: Sequence[OperatorNormEstimate]):
        """Columns: operator, t_abs, p, estimate, trials, seed"""
        try:
            with open(path, 'w', newline='') as fh:
                writer = csv.writer(fh)
                writer.writerow(['operator', 't_abs', 'p', 'estimate', 'trials', 'seed'])
                for est in estimates:
                    writer.writerow([est.name, f'{est.t_abs:.12e}', f'{est.p:.6g}', f'{est.estimate:.12e}',
                                     est.trials, est.seed])
        except OSError as e:
            raise ArtifactIOError(f'cannot write {path}: {e}') from e
