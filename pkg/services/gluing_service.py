"""
Pregluing maps, the defect-scaling harness, the Newton-Picard solve on A_t
and the pushforward oracle that supplies exactly glued curves.
"""
import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import directed_hausdorff

from config.settings import Config
from services.linearized_service import ACStructure, LinearizedService
from utils.errors import (
    ArtifactIOError,
    InputError,
    IterationError,
    ParameterDomainError,
    ParameterError,
    ShapeError,
    TooLargeTError,
    ValidationError,
)
from utils.geometry import (
    SMOOTHSTEP,
    AnnulusGrid,
    GridField,
    MapSample,
    ResolvedSection,
    ZeroOneForm,
    aligned_offset,
    build_annulus_grid,
    build_nodal_grid,
    lp_norm,
    sup_norm,
    to_json_envelope,
)

logger = logging.getLogger(__name__)

KANTOROVICH_THRESHOLD = 0.25
MAX_ORACLE_AMPLITUDE = 0.1
ORACLE_CHART_RADIUS = 1.5
DEFAULT_GRID = (48, 32)

# z -> (values, d/dz, d/dzbar), each of shape z.shape + (n,)
BranchMap = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]


def _linear_branch(slot: int, n: int) -> BranchMap:
    def branch(z):
        z = np.asarray(z, dtype=complex)
        values = np.zeros(z.shape + (n,), dtype=complex)
        values[..., slot] = z
        dz = np.zeros_like(values)
        dz[..., slot] = 1.0
        return values, dz, np.zeros_like(values)

    return branch


@dataclass
class NodeModel:
    """The two branches through one node, each a map of its own coordinate"""
    plus: BranchMap
    minus: BranchMap
    structure: ACStructure
    name: str = 'node'

    def __post_init__(self):
        origin = np.zeros(1, dtype=complex)
        v_plus, d_plus, _ = self.plus(origin)
        v_minus, d_minus, _ = self.minus(origin)
        if v_plus.shape != v_minus.shape:
            raise ShapeError('branches map into different dimensions')
        gap = float(np.max(np.abs(v_plus - v_minus)))
        if gap > 1e-12:
            raise InputError('branches do not meet at the node', {'gap': gap})
        if np.linalg.matrix_rank(np.vstack([d_plus, d_minus]), tol=1e-10) < 2:
            raise InputError('the branches have the same tangent line at the node')

    @classmethod
    def linear(cls, n: int = 2) -> 'NodeModel':
        """x -> (x, 0), y -> (0, y) with the standard structure"""
        if n < 2:
            raise ParameterError('a node with distinct tangents needs n >= 2', {'n': n})
        return cls(_linear_branch(0, n), _linear_branch(1, n), ACStructure.zero(n), name='linear')

    @property
    def node_image(self) -> np.ndarray:
        return self.plus(np.zeros(1, dtype=complex))[0][0]

    @property
    def n(self) -> int:
        return int(self.node_image.shape[-1])

    def branch(self, index: int) -> BranchMap:
        return self.plus if index == 0 else self.minus


@dataclass
class PushforwardOracle:
    """
    Psi(z) = (z1 + a phi(z2), z2) with phi(u) = c1 conj(u)^2 + c2 |u|^2.

    Psi carries holomorphic curves to solutions of dbar w + q(w).dw = 0 for
    q(w) = [[0, -a phi_ubar(w2)], [0, 0]] acting antilinearly.
    """
    amplitude: float
    c1: complex
    c2: complex
    structure: ACStructure = field(init=False)

    def __post_init__(self):
        if not 0.0 <= self.amplitude <= MAX_ORACLE_AMPLITUDE:
            raise ParameterError(
                f'oracle amplitude {self.amplitude} outside [0, {MAX_ORACLE_AMPLITUDE}]',
                {'amplitude': self.amplitude},
            )
        a, c1, c2 = self.amplitude, self.c1, self.c2
        if a == 0.0:
            self.structure = ACStructure.zero(2)
        else:
            def q(w):
                out = np.zeros(w.shape + (2,), dtype=complex)
                out[..., 0, 1] = -a * self.phi_zbar(w[..., 1])
                return out

            def dq(w, xi):
                out = np.zeros(w.shape + (2,), dtype=complex)
                out[..., 0, 1] = -a * (2.0 * c1 * np.conj(xi[..., 1]) + c2 * xi[..., 1])
                return out

            bound = a * (2.0 * abs(c1) + abs(c2)) * (ORACLE_CHART_RADIUS + 1.0)
            self.structure = ACStructure(q=q, dq=dq, c1_bound=bound, n=2, name='pushforward')
        self._verify()

    def phi(self, u):
        return self.c1 * np.conj(u) ** 2 + self.c2 * u * np.conj(u)

    def phi_z(self, u):
        return self.c2 * np.conj(u)

    def phi_zbar(self, u):
        return 2.0 * self.c1 * np.conj(u) + self.c2 * u

    def psi(self, z: np.ndarray) -> np.ndarray:
        out = np.array(z, dtype=complex)
        out[..., 0] += self.amplitude * self.phi(out[..., 1])
        return out

    def psi_inverse(self, z: np.ndarray) -> np.ndarray:
        out = np.array(z, dtype=complex)
        out[..., 0] -= self.amplitude * self.phi(out[..., 1])
        return out

    def push(self, h: np.ndarray, dh: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Psi o h with its d/dz and d/dzbar, for holomorphic h with derivative dh"""
        a = self.amplitude
        values = self.psi(h)
        dz = np.array(dh, dtype=complex)
        dz[..., 0] += a * self.phi_z(h[..., 1]) * dh[..., 1]
        dzbar = np.zeros_like(dz)
        dzbar[..., 0] = a * self.phi_zbar(h[..., 1]) * np.conj(dh[..., 1])
        return values, dz, dzbar

    def curve(self, grid: AnnulusGrid) -> ResolvedSection:
        """Psi({xy = t}) sampled on both charts of A_t"""
        if grid.t == 0:
            raise ParameterDomainError('the glued curve needs t != 0')
        z = grid.coordinates
        other = grid.t / z
        slope = -grid.t / z ** 2
        parts = [grid.zeros((2,)) for _ in range(3)]
        for c in range(2):
            own_first = c == 0
            h = np.stack([z, other] if own_first else [other, z], axis=-1)
            dh = np.stack([np.ones_like(z), slope] if own_first else [slope, np.ones_like(z)], axis=-1)
            for part, value in zip(parts, self.push(h, dh)):
                part[c] = value
        values, dz, dzbar = parts
        return ResolvedSection(
            MapSample(grid, values),
            ZeroOneForm(grid, dzbar, check_finite=False),
            MapSample(grid, dz, check_finite=False),
        )

    def node(self) -> NodeModel:
        def plus(z):
            z = np.asarray(z, dtype=complex)
            return self.push(np.stack([z, np.zeros_like(z)], -1), np.stack([np.ones_like(z), np.zeros_like(z)], -1))

        def minus(z):
            z = np.asarray(z, dtype=complex)
            return self.push(np.stack([np.zeros_like(z), z], -1), np.stack([np.zeros_like(z), np.ones_like(z)], -1))

        return NodeModel(plus, minus, self.structure, name='pushforward')

    def _verify(self, samples: int = 64):
        rng = np.random.default_rng(0)
        z = ORACLE_CHART_RADIUS * (rng.uniform(-0.7, 0.7, (samples, 2)) + 1j * rng.uniform(-0.7, 0.7, (samples, 2)))
        roundtrip = float(np.max(np.abs(self.psi(self.psi_inverse(z)) - z)))
        if roundtrip > 1e-10:
            raise ValidationError('Psi o Psi^-1 is not the identity', {'error': roundtrip})

        t = 1e-3 * np.exp(1j * rng.uniform(0, 2 * np.pi))
        x = np.exp(rng.uniform(0.5 * math.log(abs(t)), 0.0, samples) + 1j * rng.uniform(0, 2 * np.pi, samples))
        h = np.stack([x, t / x], axis=-1)
        dh = np.stack([np.ones_like(x), -t / x ** 2], axis=-1)
        values, dz, dzbar = self.push(h, dh)
        residual = float(np.max(np.abs(dzbar + self.structure.apply(values, dz))))
        if residual > 1e-10:
            raise ValidationError('pushforward curve does not solve its equation', {'residual': residual})


def make_pushforward_oracle(seed: int, amplitude: float) -> PushforwardOracle:
    """Random quadratic Psi with sup |phi| = 1 on the working chart"""
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(2) + 1j * rng.standard_normal(2)
    scale = 1.0 / (ORACLE_CHART_RADIUS ** 2 * float(np.sum(np.abs(c))))
    return PushforwardOracle(amplitude, complex(c[0] * scale), complex(c[1] * scale))


def hausdorff_distance(a: GridField, b: GridField) -> float:
    """Symmetric Hausdorff distance between the sample clouds of two maps into C^n"""
    def cloud(f):
        data = f.data.reshape(-1, f.data.shape[-1])
        return np.concatenate([data.real, data.imag], axis=1)

    pa, pb = cloud(a), cloud(b)
    return float(max(directed_hausdorff(pa, pb)[0], directed_hausdorff(pb, pa)[0]))


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class ConvergenceRecord:
    t: complex
    p: float
    iterations: List[Tuple[int, float, float]] = field(default_factory=list)
    converged: bool = False
    initial_defect: float = math.nan
    xi_norm: float = math.nan
    r_norm: Optional[float] = None
    c1: Optional[float] = None
    kantorovich: Optional[float] = None

    def add(self, step: int, defect: float, correction: float):
        self.iterations.append((step, defect, correction))
        logger.debug('[Newton] step %d defect %.3e correction %.3e', step, defect, correction)

    @property
    def steps_taken(self) -> int:
        return self.iterations[-1][0] if self.iterations else 0

    @property
    def defects(self) -> List[float]:
        return [d for _, d, _ in self.iterations]

    def to_dict(self) -> Dict:
        return {
            't': [self.t.real, self.t.imag],
            'p': self.p,
            'iterations': [list(it) for it in self.iterations],
            'converged': self.converged,
            'initial_defect': self.initial_defect,
            'xi_norm': self.xi_norm,
            'r_norm': self.r_norm,
            'c1': self.c1,
            'kantorovich': self.kantorovich,
        }


@dataclass
class DefectSweep:
    p: float
    rows: List[Tuple[float, float]]
    slope: Optional[float]
    monotone: bool


@dataclass
class SweepRow:
    t_abs: float
    p: float
    defect_norm: float
    xi_norm: float
    iterations: int
    converged: bool


@dataclass
class StabilityReport:
    t_abs: float
    scale: float
    sup_difference: float
    l1p_difference: float
    c1_bound: float

    @property
    def ratio(self) -> float:
        return self.l1p_difference / self.sup_difference if self.sup_difference > 0 else 0.0


def fit_slope(t_abs: Sequence[float], values: Sequence[float]) -> Tuple[Optional[float], bool]:
    """Least-squares slope of log(values) against log|t|; None unless values fall with |t|"""
    order = np.argsort(t_abs)[::-1]
    ordered = np.asarray(values, dtype=float)[order]
    monotone = bool(np.all(ordered > 0) and np.all(np.diff(ordered) < 0))
    if not monotone:
        logger.warning('[Sweep] values are not monotone in |t|, no fit reported')
        return None, False
    slope = float(np.polyfit(np.log(np.asarray(t_abs)[order]), np.log(ordered), 1)[0])
    return slope, True


def _cutoff_coordinate(grid: AnnulusGrid, tau: float):
    """g = rho(r/tau) z on every chart, with dbar g and d g"""
    z = grid.coordinates
    if tau == 0.0:
        return z, np.zeros_like(z), np.ones_like(z)
    r = grid.radii[:, None]
    rho = SMOOTHSTEP.rho(r / tau)
    drho = SMOOTHSTEP.rho_prime(r / tau) / tau
    g = rho * z
    return g, drho * z * z / (2.0 * r), rho + drho * r / 2.0 + 0j


# ---------------------------------------------------------------------------
# Service
# ---------------------------------------------------------------------------

class GluingService:
    """Builds the pregluing and solves for the nearby J-holomorphic curve"""

    def __init__(self, linearized: Optional[LinearizedService] = None, threads: Optional[int] = None,
                 trials: Optional[int] = None, seed: Optional[int] = None, newton_tol: Optional[float] = None,
                 max_iter: Optional[int] = None, cutoff_exponent: Optional[float] = None,
                 n_r: Optional[int] = None, n_theta: Optional[int] = None):
        self.threads = threads or Config.THREADS
        self.linearized = linearized or LinearizedService(threads=self.threads, trials=trials, seed=seed)
        self.cauchy = self.linearized.cauchy
        self.trials = trials or self.linearized.trials
        self.seed = self.linearized.seed if seed is None else seed
        self.newton_tol = newton_tol or Config.NEWTON_TOL
        self.max_iter = max_iter or Config.MAX_ITER
        self.cutoff_exponent = cutoff_exponent or Config.CUTOFF_EXPONENT
        self.n_r = n_r or DEFAULT_GRID[0]
        self.n_theta = n_theta or DEFAULT_GRID[1]

    def cutoff_radius(self, t: complex) -> float:
        return abs(t) ** self.cutoff_exponent if t != 0 else 0.0

    def _annulus(self, t: complex, grid: Optional[AnnulusGrid]) -> AnnulusGrid:
        t = complex(t)
        if t == 0 or abs(t) >= 1.0:
            raise ParameterDomainError(f'A_t needs 0 < |t| < 1, got {t}', {'t_abs': abs(t)})
        if grid is None:
            return build_annulus_grid(t, self.n_r, self.n_theta)
        if grid.t != t:
            raise ShapeError('grid belongs to a different gluing parameter', {'grid_t_abs': abs(grid.t)})
        return grid

    def _preglue(self, node: NodeModel, grid: AnnulusGrid, tau: float) -> ResolvedSection:
        if grid.charts != 2:
            raise ShapeError('pregluing needs one chart per branch')
        g, g_dbar, g_d = _cutoff_coordinate(grid, tau)
        parts = [grid.zeros((node.n,)) for _ in range(3)]
        for c in range(2):
            values, fz, fzb = node.branch(c)(g)
            parts[0][c] = values
            parts[1][c] = fz * g_dbar[..., None] + fzb * np.conj(g_d)[..., None]
            parts[2][c] = fz * g_d[..., None] + fzb * np.conj(g_dbar)[..., None]
        return ResolvedSection(
            MapSample(grid, parts[0]),
            ZeroOneForm(grid, parts[1], check_finite=False),
            MapSample(grid, parts[2], check_finite=False),
        )

    # -- pregluing -------------------------------------------------------------

    def preglue_w(self, node: NodeModel, t: complex, grid: Optional[AnnulusGrid] = None) -> ResolvedSection:
        """w_t = f+(rho(r/tau) x) on the x-half of A_t, symmetric on the y-half, tau = |t|^kappa"""
        grid = self._annulus(t, grid)
        return self._preglue(node, grid, self.cutoff_radius(grid.t))

    def preglue_u(self, node: NodeModel, t: complex, nodal: Optional[AnnulusGrid] = None) -> ResolvedSection:
        """u_t on the two branches of the nodal model; u_0 is the nodal map itself"""
        t = complex(t)
        if abs(t) >= 1.0:
            raise ParameterDomainError(f'gluing parameter must satisfy |t| < 1, got {t}', {'t_abs': abs(t)})
        if nodal is None:
            if t == 0:
                nodal = build_annulus_grid(0, self.n_r, self.n_theta, charts=2)
            else:
                nodal = build_nodal_grid(build_annulus_grid(t, self.n_r, self.n_theta), self.linearized.r_min)
        if nodal.t != 0:
            raise ShapeError('u_t lives on the nodal model')
        return self._preglue(node, nodal, self.cutoff_radius(t))

    def pregluing_consistency(self, node: NodeModel, t: complex, grid: Optional[AnnulusGrid] = None) -> float:
        """max |w_t - u_t o pi_t| off the seam, together with |w_t - node image| on it"""
        grid = self._annulus(t, grid)
        w = self.preglue_w(node, t, grid)
        nodal = build_nodal_grid(grid, self.linearized.r_min)
        u = self.preglue_u(node, t, nodal)
        offset = aligned_offset(grid, nodal)
        off_seam = float(np.max(np.abs(w.data[:, 1:] - u.data[:, offset + 1:])))
        on_seam = float(np.max(np.abs(w.data[:, 0] - node.node_image)))
        return max(off_seam, on_seam)

    def pregluing_defect(self, node: NodeModel, t: complex, p: float, grid: Optional[AnnulusGrid] = None) -> float:
        w = self.preglue_w(node, t, grid)
        return lp_norm(self.linearized.dbar_perturbed(w, node.structure), p)

    def defect_scaling_sweep(self, node: NodeModel, p: float, t_list: Sequence[complex],
                             n_r: Optional[int] = None, n_theta: Optional[int] = None) -> DefectSweep:
        """|dbar_J w_t|_p across t with the fitted log-log slope (1/(2p) expected)"""
        if not len(t_list):
            raise ValidationError('defect sweep needs at least one t')
        t_abs = [abs(complex(t)) for t in t_list]
        if min(t_abs) > 0 and math.log10(max(t_abs) / min(t_abs)) < 3:
            logger.warning('[Preglue] t-list spans fewer than three decades')
        n_r = n_r or self.n_r
        n_theta = n_theta or self.n_theta

        def one(t):
            return self.pregluing_defect(node, t, p, build_annulus_grid(t, n_r, n_theta))

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            defects = list(pool.map(one, t_list))
        slope, monotone = fit_slope(t_abs, defects)
        if slope is not None:
            logger.info('[Preglue] p=%g fitted slope %.4f (expected %.4f)', p, slope, 1.0 / (2.0 * p))
        return DefectSweep(p, list(zip(t_abs, defects)), slope, monotone)

    # -- Newton-Picard solve ---------------------------------------------------

    def newton_solve(self, node: NodeModel, t: complex, p: float = 4.0, boundary: Optional[GridField] = None,
                     grid: Optional[AnnulusGrid] = None, inverse: str = 'annulus',
                     gate: bool = True) -> Tuple[ResolvedSection, ConvergenceRecord]:
        """
        Solve dbar w + q(w).dw = 0 on A_t for w = w_t + xi, with the Laurent
        content of the outer circles fixed to that of `boundary` (w_t by
        default).

        The first step replaces w by its boundary projection H(w), the exact
        Newton step of the unperturbed operator. Later steps are Newton steps
        xi -> xi - R_t F(w) with R_t the Neumann-completed, boundary-normalized
        right inverse of the linearization.
        """
        grid = self._annulus(t, grid)
        if inverse not in ('annulus', 'nodal'):
            raise ParameterError(f'unknown right inverse {inverse!r}')
        q = node.structure
        lin = self.linearized
        record = ConvergenceRecord(grid.t, p)

        w_t = self.preglue_w(node, grid.t, grid)
        start = w_t
        if boundary is not None:
            if not grid.compatible(boundary.grid):
                raise ShapeError('boundary data lives on a different grid')
            shift = MapSample(grid, boundary.data - w_t.data)
            start = w_t + self.cauchy.boundary_projection(shift, with_partial=True)

        defect = lp_norm(lin.dbar_perturbed(start, q), p)
        record.initial_defect = defect
        record.add(0, defect, 0.0)

        w = self.cauchy.boundary_projection(start.values, with_partial=True)
        residual = lin.dbar_perturbed(w, q)
        defect = lp_norm(residual, p)
        record.add(1, defect, (w - start).l1p_norm(p))

        if defect > self.newton_tol:
            base = lin.annulus_right_inverse(grid) if inverse == 'annulus' else lin.nodal_right_inverse(grid)
            operator = lin.linearize_at(w, q)
            rho = lin.measure_quasi_inverse_defect(base, operator, p, normalized=True).estimate
            ceiling = 1e3 * max(record.initial_defect, defect)
            if gate:
                self._kantorovich_gate(record, lin, base, operator, w, q, p, rho, defect)

            for step in range(2, self.max_iter + 1):
                solution = lin.neumann_right_inverse(-residual, base, operator, p, rho=rho, normalized=True)
                w = w + solution.xi
                residual = lin.dbar_perturbed(w, q)
                defect = lp_norm(residual, p)
                record.add(step, defect, solution.xi.l1p_norm(p))
                if defect <= self.newton_tol:
                    break
                if not np.isfinite(defect) or defect > ceiling:
                    break
                operator = lin.linearize_at(w, q)

        record.xi_norm = (w - w_t).l1p_norm(p)
        if defect > self.newton_tol:
            logger.warning('[Newton] |t|=%.1e stopped at defect %.3e', abs(grid.t), defect)
            raise IterationError(
                f'Newton iteration did not reach {self.newton_tol:.1e}',
                {'defect': defect, 'steps': record.steps_taken, 't_abs': abs(grid.t)},
                record=record,
            )
        record.converged = True
        logger.info('[Newton] |t|=%.1e converged in %d steps, |xi| = %.4e',
                    abs(grid.t), record.steps_taken, record.xi_norm)
        return w, record

    def _kantorovich_gate(self, record, lin, base, operator, w, q, p, rho, defect):
        c1 = lin.measure_c1(w, q, p)
        r_norm = self.cauchy.estimate_operator_norm(
            lambda e: lin.neumann_right_inverse(e, base, operator, p, rho=rho, normalized=True).xi,
            base.annulus, p, f'l1p:{p:g}', name='R_t',
        ).estimate
        product = r_norm ** 2 * c1 * defect
        record.r_norm, record.c1, record.kantorovich = r_norm, c1, product
        if product > KANTOROVICH_THRESHOLD:
            logger.warning('[Newton] Kantorovich product %.3g above %.2f', product, KANTOROVICH_THRESHOLD)
            raise TooLargeTError(
                f'|R_t|^2 C1 |F| = {product:.4g} exceeds {KANTOROVICH_THRESHOLD}',
                {'product': product, 'r_norm': r_norm, 'c1': c1, 'defect': defect},
            )

    def solve_many(self, node: NodeModel, p: float, t_list: Sequence[complex], n_r: Optional[int] = None,
                   n_theta: Optional[int] = None) -> List[Tuple[ResolvedSection, ConvergenceRecord]]:
        """Newton solve per t in parallel; failures propagate"""
        if not len(t_list):
            raise ValidationError('solve sweep needs at least one t')
        n_r = n_r or self.n_r
        n_theta = n_theta or self.n_theta

        def one(t):
            return self.newton_solve(node, t, p, grid=build_annulus_grid(t, n_r, n_theta))

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(one, t_list))

    @staticmethod
    def sweep_row(record: ConvergenceRecord) -> SweepRow:
        return SweepRow(abs(record.t), record.p, record.initial_defect, record.xi_norm,
                        record.steps_taken, record.converged)

    def solve_sweep(self, node: NodeModel, p: float, t_list: Sequence[complex], n_r: Optional[int] = None,
                    n_theta: Optional[int] = None) -> List[SweepRow]:
        """Pregluing defect, |xi| and step count per t"""
        return [self.sweep_row(record) for _, record in self.solve_many(node, p, t_list, n_r, n_theta)]

    def verify_annulus_stability(self, node: NodeModel, t: complex, scale: float = 1e-4, p: float = 4.0,
                                 grid: Optional[AnnulusGrid] = None, seed: Optional[int] = None,
                                 inner_radius: float = 0.5) -> StabilityReport:
        """
        Two solutions whose boundary data differ by `scale` times a random
        holomorphic function: |w' - w|_{L^p_1} on {|x|, |y| <= inner_radius}
        against |w' - w|_inf on A_t.
        """
        grid = self._annulus(t, grid)
        seed = self.seed if seed is None else seed
        w, _ = self.newton_solve(node, grid.t, p, grid=grid)
        if scale == 0.0:
            return StabilityReport(abs(grid.t), 0.0, 0.0, 0.0, node.structure.c1_bound)

        rng = np.random.default_rng(seed)
        coeffs = rng.standard_normal((2, 3, node.n)) + 1j * rng.standard_normal((2, 3, node.n))
        bump = self.linearized.laurent_sample(grid, coeffs)
        bump = bump * (scale / sup_norm(bump))
        boundary = self.preglue_w(node, grid.t, grid).values + bump
        w_prime, _ = self.newton_solve(node, grid.t, p, boundary=boundary, grid=grid)

        diff = w_prime - w
        mask = grid.radial_mask(0.0, inner_radius)
        report = StabilityReport(abs(grid.t), scale, sup_norm(diff.values), diff.l1p_norm(p, mask),
                                 node.structure.c1_bound)
        logger.info('[Stability] |t|=%.1e ratio %.4g', report.t_abs, report.ratio)
        return report

    # -- artifacts -------------------------------------------------------------

    @staticmethod
    def write_defect_csv(path: str, sweep: DefectSweep):
        """Columns: t_abs, p, defect_norm"""
        try:
            with open(path, 'w', newline='') as fh:
                writer = csv.writer(fh)
                writer.writerow(['t_abs', 'p', 'defect_norm'])
                for t_abs, defect in sweep.rows:
                    writer.writerow([f'{t_abs:.12e}', f'{sweep.p:.6g}', f'{defect:.12e}'])
        except OSError as e:
            raise ArtifactIOError(f'cannot write {path}: {e}') from e

    @staticmethod
    def write_sweep_csv(path: str, rows: Sequence[SweepRow]):
        """Columns: t_abs, p, defect_norm, xi_norm, iterations, converged"""
        try:
            with open(path, 'w', newline='') as fh:
                writer = csv.writer(fh)
                writer.writerow(['t_abs', 'p', 'defect_norm', 'xi_norm', 'iterations', 'converged'])
                for row in rows:
                    writer.writerow([f'{row.t_abs:.12e}', f'{row.p:.6g}', f'{row.defect_norm:.12e}',
                                     f'{row.xi_norm:.12e}', row.iterations, str(row.converged).lower()])
        except OSError as e:
            raise ArtifactIOError(f'cannot write {path}: {e}') from e

    @staticmethod
    def write_solution_json(path: str, solution: ResolvedSection, record: ConvergenceRecord):
        doc = {'record': record.to_dict(), 'solution': to_json_envelope(solution.values)}
        try:
            with open(path, 'w') as fh:
                json.dump(doc, fh)
        except OSError as e:
            raise ArtifactIOError(f'cannot write {path}: {e}') from e
