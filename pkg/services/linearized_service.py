"""
The perturbed Cauchy-Riemann operator dbar w + q(w).dw, its linearization,
the extension operator E_t, the quasi-inverse Q_t with its Neumann
completion, the kernel projection and line-bundle surjectivity checks.

q(w) is an antilinear endomorphism of C^n, stored as a matrix Q(w) acting
by v -> Q(w) conj(v). The linearization

    D xi = dbar xi + Q(w) conj(d xi) + dQ(w)[xi] conj(d w)

is therefore real-linear.
"""
import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from config.settings import Config
from services.cauchy_service import CauchyService, OperatorNormEstimate
from utils.errors import (
    ArtifactIOError,
    ConfigurationError,
    InputError,
    IterationError,
    ParameterDomainError,
    ParameterError,
    RankError,
    ResolutionError,
    ShapeError,
    TooLargeTError,
    ValidationError,
)
from utils.geometry import (
    AnnulusGrid,
    GridField,
    MapSample,
    ResolvedSection,
    ZeroOneForm,
    aligned_offset,
    beta_cutoff,
    beta_radial_derivative,
    boundary_sup_norm,
    build_annulus_grid,
    build_nodal_grid,
    inner_product,
    l1p_norm,
    lp_norm,
    radial_derivatives,
    random_smooth_sample,
    sup_norm,
    trial_generators,
)

logger = logging.getLogger(__name__)

NODE_TOL = 1e-8
MAX_PRINCIPLE_CONSTANT = 4.0

Monomial = Tuple[int, int, int, int]


def antilinear_action(Q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Q conj(v) at every sample"""
    return np.einsum('...ij,...j->...i', Q, np.conj(v))


def solve_antilinear(Q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Solve z + Q conj(z) = v pointwise through the real 2n x 2n system"""
    n = v.shape[-1]
    qr, qi = Q.real, Q.imag
    eye = np.broadcast_to(np.eye(n), Q.shape)
    system = np.concatenate([
        np.concatenate([eye + qr, qi], axis=-1),
        np.concatenate([qi, eye - qr], axis=-1),
    ], axis=-2)
    rhs = np.concatenate([v.real, v.imag], axis=-1)
    sol = np.linalg.solve(system, rhs[..., None])[..., 0]
    return sol[..., :n] + 1j * sol[..., n:]


def as_resolved(xi) -> ResolvedSection:
    if isinstance(xi, ResolvedSection):
        return xi
    return ResolvedSection.from_sample(xi)


def _zero_like(grid: AnnulusGrid, trailing: Sequence[int]) -> ResolvedSection:
    zeros = grid.zeros(trailing)
    return ResolvedSection(
        MapSample(grid, zeros, check_finite=False),
        ZeroOneForm(grid, zeros, check_finite=False),
        MapSample(grid, zeros, check_finite=False),
    )


def _lift(a: np.ndarray, ndim: int) -> np.ndarray:
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def reflect_ring(rows: np.ndarray, t: complex) -> np.ndarray:
    """Resample ring data at the angles arg(t) - theta (the point t/z), spectrally"""
    n_theta = rows.shape[1]
    modes = np.rint(np.fft.fftfreq(n_theta, d=1.0 / n_theta)).astype(int)
    coeffs = np.fft.fft(rows, axis=1)
    phase = np.exp(1j * modes * np.angle(t)).reshape((1, n_theta) + (1,) * (rows.ndim - 2))
    coeffs = coeffs * phase
    coeffs[:, modes == -(n_theta // 2)] = 0.0
    return np.fft.ifft(coeffs[:, (-modes) % n_theta], axis=1)


def seam_average(eta: GridField) -> ZeroOneForm:
    """
    Make a (0,1)-form sample on A_t single-valued on the seam |x| = |y|.

    The seam is stored twice (row 0 of each chart). Both copies are replaced
    by their average, the y-copy transported through dy = -(t/x^2) dx.
    """
    grid = eta.grid
    if grid.t == 0:
        raise ParameterDomainError('the seam exists on A_t with t != 0 only')
    ndim = eta.data.ndim - 3
    jac = _lift(np.conj(-grid.t / grid.coordinates[0] ** 2), ndim + 1)
    data = eta.data.copy()
    own = data[0, 0]
    other = reflect_ring(data[1, :1], grid.t)[0] * jac
    mean = 0.5 * (own + other)
    data[0, 0] = mean
    data[1, 0] = reflect_ring(mean[None], grid.t)[0] * jac
    return ZeroOneForm(grid, data, check_finite=False)


# ---------------------------------------------------------------------------
# Almost complex structure and the linearized operator
# ---------------------------------------------------------------------------

@dataclass
class ACStructure:
    """
    Antilinear perturbation field q with its derivative.

    q(w) maps values of shape (..., n) to matrices (..., n, n); dq(w, xi)
    returns the derivative of q at w in the direction xi, same shape.
    """
    q: Callable[[np.ndarray], np.ndarray]
    dq: Callable[[np.ndarray, np.ndarray], np.ndarray]
    c1_bound: float = 0.0
    n: int = 2
    name: str = 'custom'
    is_zero: bool = False

    def __post_init__(self):
        if not self.c1_bound >= 0.0:
            raise ParameterError(f'c1_bound must be nonnegative, got {self.c1_bound}')
        if self.c1_bound >= 0.5:
            raise ParameterError(
                f'|q|_C1 = {self.c1_bound:.3g} is not below 1/2 on the working chart',
                {'c1_bound': self.c1_bound},
            )

    @classmethod
    def zero(cls, n: int = 2) -> 'ACStructure':
        def q(w):
            return np.zeros(w.shape + (n,), dtype=complex)

        def dq(w, xi):
            return np.zeros(w.shape + (n,), dtype=complex)

        return cls(q=q, dq=dq, c1_bound=0.0, n=n, name='standard', is_zero=True)

    @classmethod
    def constant(cls, matrix, name: str = 'constant') -> 'ACStructure':
        matrix = np.asarray(matrix, dtype=complex)
        n = matrix.shape[0]

        def q(w):
            return np.broadcast_to(matrix, w.shape[:-1] + (n, n))

        def dq(w, xi):
            return np.zeros(w.shape + (n,), dtype=complex)

        return cls(q=q, dq=dq, c1_bound=float(np.linalg.norm(matrix, 2)), n=n, name=name,
                   is_zero=not np.any(matrix))

    @classmethod
    def random_constant(cls, rng: np.random.Generator, amplitude: float, n: int = 2) -> 'ACStructure':
        """Constant q with operator norm `amplitude`"""
        m = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        return cls.constant(amplitude * m / np.linalg.norm(m, 2), name='random_constant')

    def apply(self, w: np.ndarray, v: np.ndarray) -> np.ndarray:
        """q(w).v"""
        return antilinear_action(self.q(w), v)

    def check_derivative(self, w: np.ndarray, rng: Optional[np.random.Generator] = None,
                         eps: float = 1e-6) -> float:
        """Largest relative mismatch between dq and a central difference of q"""
        rng = rng or np.random.default_rng(0)
        xi = rng.standard_normal(w.shape) + 1j * rng.standard_normal(w.shape)
        fd = (self.q(w + eps * xi) - self.q(w - eps * xi)) / (2.0 * eps)
        exact = self.dq(w, xi)
        scale = max(1.0, float(np.max(np.abs(exact))))
        return float(np.max(np.abs(fd - exact))) / scale

    def validate(self, w: np.ndarray, tol: float = 1e-6):
        err = self.check_derivative(w)
        if err > tol:
            raise ValidationError(f'dq disagrees with q by {err:.3g}', {'structure': self.name, 'error': err})


@dataclass
class LinearizedOperator:
    """D_w xi = dbar xi + q(w).d xi + (dq(w).xi).d w"""
    base: ResolvedSection
    structure: ACStructure

    def __post_init__(self):
        if self.structure.is_zero:
            self._q = None
            self._dw = None
        else:
            self._q = np.asarray(self.structure.q(self.base.data))
            self._dw = self.base.partial.data

    @property
    def grid(self) -> AnnulusGrid:
        return self.base.grid

    def __call__(self, xi) -> ZeroOneForm:
        xi = as_resolved(xi)
        if self._q is None:
            return xi.dbar
        out = (
            xi.dbar.data
            + antilinear_action(self._q, xi.partial.data)
            + antilinear_action(self.structure.dq(self.base.data, xi.data), self._dw)
        )
        return ZeroOneForm(self.grid, out, check_finite=False)


# ---------------------------------------------------------------------------
# Result records
# ---------------------------------------------------------------------------

@dataclass
class RightInverseBase:
    """
    The right inverse a quasi-inverse on `annulus` is assembled from. With a
    nodal `grid` forms are pulled to the two branches and sections come back
    through E_t; with `grid` equal to the annulus, `solve` acts on A_t directly.
    """
    annulus: AnnulusGrid
    grid: AnnulusGrid
    solve: Optional[Callable[[ZeroOneForm], ResolvedSection]]

    @property
    def nodal(self) -> bool:
        return self.grid.t == 0


@dataclass
class NeumannSolution:
    v_slot: np.ndarray
    xi: ResolvedSection
    iterations: int
    residual: float
    rho: float


@dataclass
class DiscrepancyRow:
    t_abs: float
    p: float
    median_discrepancy: float
    n_trials: int
    median_extension_defect: float = 0.0


@dataclass
class RightInverseNorms:
    t_abs: float
    rho: float
    quasi_inverse_norm: float
    right_inverse_norm: float

    @property
    def bound(self) -> float:
        return self.quasi_inverse_norm / (1.0 - self.rho)


@dataclass
class KernelElement:
    v: np.ndarray
    xi: MapSample


@dataclass
class KernelProjection:
    coordinates: np.ndarray
    v: np.ndarray
    xi: MapSample
    residual_norm: float


@dataclass
class MaxPrincipleCase:
    t_abs: float
    case: int
    interior_sup: float
    boundary_sup: float

    @property
    def ratio(self) -> float:
        return self.interior_sup / self.boundary_sup if self.boundary_sup > 0 else 0.0


@dataclass
class MaxPrincipleReport:
    cases: List[MaxPrincipleCase] = field(default_factory=list)
    constant: float = MAX_PRINCIPLE_CONSTANT

    @property
    def worst(self) -> float:
        return max((c.ratio for c in self.cases), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.constant


@dataclass
class LineBundleDims:
    k: int
    kernel_dim: int
    coker_dim: int
    resolution: int

    @property
    def index(self) -> int:
        return self.kernel_dim - self.coker_dim

    def to_dict(self) -> Dict[str, int]:
        return {'k': self.k, 'kernel_dim': self.kernel_dim, 'coker_dim': self.coker_dim, 'index': self.index}


# ---------------------------------------------------------------------------
# Line bundles over the sphere, in bihomogeneous polynomials on S^3
# ---------------------------------------------------------------------------

def _bidegree_monomials(hol: int, anti: int) -> List[Monomial]:
    """Z0^a0 Z1^a1 conj(Z0)^b0 conj(Z1)^b1 with a0 + a1 = hol, b0 + b1 = anti"""
    return [(a0, hol - a0, b0, anti - b0) for a0 in range(hol + 1) for b0 in range(anti + 1)]


def _sphere_moment(p: Tuple[int, int], q: Tuple[int, int]) -> float:
    """Normalized integral of Z^p conj(Z)^q over S^3"""
    if p != q:
        return 0.0
    return math.factorial(p[0]) * math.factorial(p[1]) / math.factorial(p[0] + p[1] + 1)


def _sphere_inner(m1: Monomial, m2: Monomial) -> float:
    return _sphere_moment((m1[0] + m2[2], m1[1] + m2[3]), (m1[2] + m2[0], m1[3] + m2[1]))


def _gram(basis: Sequence[Monomial]) -> np.ndarray:
    return np.array([[_sphere_inner(a, b) for b in basis] for a in basis])


def _lbar(m: Monomial) -> List[Tuple[float, Monomial]]:
    """Z0 d/d(conj Z1) - Z1 d/d(conj Z0), the dbar operator on charge-k functions"""
    a0, a1, b0, b1 = m
    out = []
    if b1 > 0:
        out.append((float(b1), (a0 + 1, a1, b0, b1 - 1)))
    if b0 > 0:
        out.append((-float(b0), (a0, a1 + 1, b0 - 1, b1)))
    return out


def random_line_bundle_perturbation(rng: np.random.Generator, scale: float,
                                    degree: int = 1) -> Dict[Monomial, complex]:
    """Random zeroth-order term of charge +2 (bidegree (2 + j, j), j <= degree)"""
    terms: Dict[Monomial, complex] = {}
    for j in range(degree + 1):
        for m in _bidegree_monomials(2 + j, j):
            terms[m] = complex(rng.standard_normal(), rng.standard_normal())
    norm = math.sqrt(sum(abs(c) ** 2 for c in terms.values()))
    return {m: scale * c / norm for m, c in terms.items()}


# ---------------------------------------------------------------------------
# Service
# ---------------------------------------------------------------------------

class LinearizedService:
    """Linearized operators, extension, quasi-inverse and kernel bookkeeping"""

    def __init__(self, cauchy: Optional[CauchyService] = None, threads: Optional[int] = None,
                 trials: Optional[int] = None, seed: Optional[int] = None, rank_rtol: Optional[float] = None,
                 neumann_tol: Optional[float] = None, max_iter: Optional[int] = None,
                 r_min: Optional[float] = None):
        self.threads = threads or Config.THREADS
        self.trials = trials or Config.NORM_TRIALS
        self.seed = Config.SEED if seed is None else seed
        self.cauchy = cauchy or CauchyService(threads=self.threads, trials=self.trials, seed=self.seed)
        self.rank_rtol = rank_rtol or Config.RANK_RTOL
        self.neumann_tol = neumann_tol or Config.NEUMANN_TOL
        self.max_iter = max_iter or Config.MAX_ITER
        self.r_min = r_min or Config.R_MIN

    # -- operators -----------------------------------------------------------

    @staticmethod
    def dbar_perturbed(w, q: ACStructure) -> ZeroOneForm:
        """dbar w + q(w).dw; derivatives are taken from `w` when it carries them"""
        w = as_resolved(w)
        if w.data.shape[-1] != q.n:
            raise ShapeError(f'map has {w.data.shape[-1]} components, structure acts on C^{q.n}')
        out = w.dbar.data
        if not q.is_zero:
            out = out + q.apply(w.data, w.partial.data)
        return ZeroOneForm(w.grid, out, check_finite=False)

    @staticmethod
    def linearize_at(w, q: ACStructure) -> LinearizedOperator:
        w = as_resolved(w)
        if w.data.shape[-1] != q.n:
            raise ShapeError(f'map has {w.data.shape[-1]} components, structure acts on C^{q.n}')
        return LinearizedOperator(w, q)

    @staticmethod
    def _apply(operator: Optional[LinearizedOperator], xi: ResolvedSection) -> ZeroOneForm:
        return xi.dbar if operator is None else operator(xi)

    # -- nodal model and extension -------------------------------------------

    def nodal_right_inverse(self, annulus: AnnulusGrid, r_min: Optional[float] = None) -> RightInverseBase:
        """Per-branch disk Cauchy transform, node-matched and boundary-normalized"""
        nodal = build_nodal_grid(annulus, r_min or self.r_min)
        return RightInverseBase(
            annulus=annulus,
            grid=nodal,
            solve=lambda form: self.cauchy.right_inverse(form, normalized=True),
        )

    def annulus_right_inverse(self, annulus: AnnulusGrid) -> RightInverseBase:
        """P_t on A_t itself, for solves that never leave the annulus"""
        if annulus.t == 0:
            raise ParameterDomainError('P_t needs t != 0')
        return RightInverseBase(annulus=annulus, grid=annulus, solve=self.cauchy.right_inverse)

    @staticmethod
    def pull_to_nodal(eta: GridField, nodal: AnnulusGrid) -> ZeroOneForm:
        """Move each half of A_t onto its branch and extend by zero toward the node; the seam row is split evenly"""
        grid = eta.grid
        offset = aligned_offset(grid, nodal)
        data = nodal.zeros(eta.trailing)
        data[:, offset:] = eta.data
        data[:, offset] *= 0.5
        return ZeroOneForm(nodal, data, check_finite=False)

    @staticmethod
    def extension_operator(xi, annulus: AnnulusGrid) -> ResolvedSection:
        """
        E_t: on the x-half, xi(x, 0) + beta_|t|(x) (xi(0, t/x) - xi(node)); the
        y-half is symmetric. Derivatives are carried through exactly.
        """
        xi = as_resolved(xi)
        nodal = xi.grid
        if nodal.t != 0 or nodal.charts != 2:
            raise InputError('E_t needs a section given on both branches of the nodal model')
        if annulus.t == 0:
            raise ParameterDomainError('E_t maps into A_t with t != 0')
        if (not math.isclose(nodal.step, annulus.step, rel_tol=1e-12)
                or nodal.n_theta != annulus.n_theta or nodal.n_r < 2 * annulus.n_r - 1):
            raise ShapeError('nodal grid is not aligned with the annulus grid')

        node = CauchyService.node_values(xi.values)
        scale = max(1.0, float(np.max(np.abs(node))))
        mismatch = float(np.max(np.abs(node[0] - node[1])))
        if mismatch > NODE_TOL * scale:
            raise InputError('branch values disagree at the node', {'mismatch': mismatch})
        node_value = node[0]

        t = annulus.t
        n_r = annulus.n_r
        ndim = xi.data.ndim - 1
        aligned = aligned_offset(annulus, nodal) + np.arange(n_r)
        reflected = nodal.n_r - 1 - (n_r - 1 + np.arange(n_r))

        beta = _lift(np.broadcast_to(beta_cutoff(abs(t), annulus.radii)[:, None], annulus.coordinates.shape), ndim)
        beta_dbar, beta_d = radial_derivatives(annulus, beta_radial_derivative(abs(t), annulus.radii))
        beta_dbar, beta_d = _lift(beta_dbar, ndim), _lift(beta_d, ndim)
        jacobian = _lift(-t / annulus.coordinates ** 2, ndim)

        values = annulus.zeros(xi.values.trailing)
        dbars = np.zeros_like(values)
        partials = np.zeros_like(values)
        for c in range(2):
            other = 1 - c
            diff = reflect_ring(xi.values.data[other][reflected], t) - node_value
            other_dbar = reflect_ring(xi.dbar.data[other][reflected], t)
            other_partial = reflect_ring(xi.partial.data[other][reflected], t)
            values[c] = xi.values.data[c][aligned] + beta * diff
            dbars[c] = xi.dbar.data[c][aligned] + beta_dbar * diff + beta * other_dbar * np.conj(jacobian)
            partials[c] = xi.partial.data[c][aligned] + beta_d * diff + beta * other_partial * jacobian

        return ResolvedSection(
            MapSample(annulus, values, check_finite=False),
            ZeroOneForm(annulus, dbars, check_finite=False),
            MapSample(annulus, partials, check_finite=False),
        )

    # -- quasi-inverse and its Neumann completion ----------------------------

    def quasi_inverse(self, eta: GridField, base: Optional[RightInverseBase],
                      normalized: bool = False) -> Tuple[np.ndarray, ResolvedSection]:
        """Q_t = (Id x E_t) o R o (pullback to the nodal model, extended by 0); R itself for an annulus base"""
        if base is None or base.solve is None:
            raise ConfigurationError('quasi_inverse needs a right inverse to start from')
        if not base.annulus.compatible(eta.grid):
            raise ShapeError('form and right inverse live on different annuli')
        v_slot = np.zeros(0, dtype=complex)
        if not np.any(eta.data):
            return v_slot, _zero_like(eta.grid, eta.trailing)
        if base.nodal:
            section = base.solve(self.pull_to_nodal(eta, base.grid))
            xi = self.extension_operator(section, eta.grid)
        else:
            xi = base.solve(eta)
        if normalized:
            xi = self.cauchy.normalize(xi)
        return v_slot, xi

    def discrepancy(self, eta: GridField, base: RightInverseBase,
                    operator: Optional[LinearizedOperator] = None, p: float = 4.0,
                    mask: Optional[np.ndarray] = None) -> float:
        """|D_t Q_t eta - eta|_p / |eta|_p"""
        eta = seam_average(eta)
        eta_norm = lp_norm(eta, p, mask)
        if eta_norm == 0.0:
            return 0.0
        _, xi = self.quasi_inverse(eta, base)
        return lp_norm(self._apply(operator, xi) - eta, p, mask) / eta_norm

    def extension_defect(self, eta: GridField, base: RightInverseBase,
                         operator: Optional[LinearizedOperator] = None, p: float = 4.0) -> float:
        """
        |D_w(E_t xi) - (D_u xi transported to A_t)|_p / |xi|_{L^p_1} for xi = R(eta):
        how far the extension is from intertwining the two linearizations.
        """
        if not base.nodal:
            raise ConfigurationError('the extension defect needs a nodal right inverse')
        section = base.solve(self.pull_to_nodal(eta, base.grid))
        size = section.l1p_norm(p)
        if size == 0.0:
            return 0.0
        extended = self.extension_operator(section, eta.grid)
        offset = aligned_offset(eta.grid, base.grid)
        transported = ZeroOneForm(eta.grid, section.dbar.data[:, offset:], check_finite=False)
        return lp_norm(self._apply(operator, extended) - transported, p) / size

    def measure_quasi_inverse_defect(self, base: RightInverseBase,
                                     operator: Optional[LinearizedOperator] = None, p: float = 4.0,
                                     trials: Optional[int] = None, seed: Optional[int] = None,
                                     normalized: bool = False) -> OperatorNormEstimate:
        """rho_t: estimated norm of Id - D_t Q_t on L^p"""
        def defect(eta):
            eta = seam_average(eta)
            _, xi = self.quasi_inverse(eta, base, normalized)
            return eta - self._apply(operator, xi)

        return self.cauchy.estimate_operator_norm(
            defect, base.annulus, p, trials=trials, seed=seed, name='Id - D_t Q_t'
        )

    def neumann_right_inverse(self, eta: GridField, base: RightInverseBase,
                              operator: Optional[LinearizedOperator] = None, p: float = 4.0,
                              tol: Optional[float] = None, rho: Optional[float] = None,
                              normalized: bool = False) -> NeumannSolution:
        """R_t eta = Q_t sum_k (Id - D_t Q_t)^k eta, summed until the residual drops below tol"""
        tol = tol or self.neumann_tol
        t_abs = abs(eta.grid.t)
        if rho is None:
            rho = self.measure_quasi_inverse_defect(base, operator, p, normalized=normalized).estimate
        if rho >= 0.5:
            logger.warning('[Neumann] rho_t = %.3g at |t| = %.1e', rho, t_abs)
            raise TooLargeTError(
                f'quasi-inverse defect rho_t = {rho:.4g} is not below 1/2',
                {'rho': rho, 't_abs': t_abs},
            )

        eta = seam_average(eta)
        eta_norm = lp_norm(eta, p)
        if eta_norm == 0.0:
            return NeumannSolution(np.zeros(0, dtype=complex), _zero_like(eta.grid, eta.trailing), 0, 0.0, rho)

        residual = eta
        total = None
        relative = 1.0
        for k in range(1, self.max_iter + 1):
            _, step = self.quasi_inverse(residual, base, normalized)
            total = step if total is None else total + step
            residual = residual - self._apply(operator, step)
            relative = lp_norm(residual, p) / eta_norm
            logger.debug('[Neumann] term %d residual %.3e', k, relative)
            if relative <= tol:
                logger.info('[Neumann] |t|=%.1e converged in %d terms (rho %.3g)', t_abs, k, rho)
                return NeumannSolution(np.zeros(0, dtype=complex), total, k, relative, rho)

        raise IterationError(
            f'Neumann series stalled at residual {relative:.3e}',
            {'residual': relative, 'iterations': self.max_iter, 'rho': rho},
        )

    def right_inverse_norms(self, base: RightInverseBase, operator: Optional[LinearizedOperator] = None,
                            p: float = 4.0, trials: Optional[int] = None,
                            seed: Optional[int] = None) -> RightInverseNorms:
        """rho_t, |Q_t| and |R_t| from L^p to L^p_1"""
        rho = self.measure_quasi_inverse_defect(base, operator, p, trials, seed).estimate
        target = f'l1p:{p:g}'
        q_norm = self.cauchy.estimate_operator_norm(
            lambda e: self.quasi_inverse(e, base)[1], base.annulus, p, target, trials, seed, name='Q_t'
        )
        r_norm = self.cauchy.estimate_operator_norm(
            lambda e: self.neumann_right_inverse(e, base, operator, p, rho=rho).xi,
            base.annulus, p, target, trials, seed, name='R_t',
        )
        return RightInverseNorms(abs(base.annulus.t), rho, q_norm.estimate, r_norm.estimate)

    def measure_c1(self, w, q: ACStructure, p: float = 4.0, trials: Optional[int] = None,
                   seed: Optional[int] = None, eps: float = 1e-4) -> float:
        """Largest |d2F(w)[xi, zeta]|_p / (|xi|_{L^p_1} |zeta|_{L^p_1}) over random pairs"""
        if q.is_zero:
            return 0.0
        trials = trials or self.trials
        seed = self.seed if seed is None else seed
        w = as_resolved(w)
        worst = 0.0
        for rng in trial_generators(seed, trials):
            xi = as_resolved(random_smooth_sample(w.grid, rng, n=q.n))
            zeta = as_resolved(random_smooth_sample(w.grid, rng, n=q.n))
            plus = self.linearize_at(w + eps * zeta, q)(xi)
            minus = self.linearize_at(w - eps * zeta, q)(xi)
            second = (plus - minus) / (2.0 * eps)
            worst = max(worst, lp_norm(second, p) / (xi.l1p_norm(p) * zeta.l1p_norm(p)))
        logger.debug('[Linearized] measured C1 %.4g', worst)
        return worst

    def discrepancy_sweep(self, t_values: Sequence[complex], p: float, n_r: int, n_theta: int,
                          trials: Optional[int] = None, seed: Optional[int] = None) -> List[DiscrepancyRow]:
        """Median relative discrepancy of Q_t over seeded random forms, per t"""
        trials = trials or self.trials
        seed = self.seed if seed is None else seed
        rows = []
        for t in t_values:
            grid = build_annulus_grid(t, n_r, n_theta)
            base = self.nodal_right_inverse(grid)

            def one(rng):
                eta = random_smooth_sample(grid, rng, kind=ZeroOneForm)
                return self.discrepancy(eta, base, p=p), self.extension_defect(eta, base, p=p)

            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                results = list(pool.map(one, trial_generators(seed, trials)))
            disc = float(np.median([r[0] for r in results]))
            ext = float(np.median([r[1] for r in results]))
            logger.info('[QuasiInverse] |t|=%.1e median discrepancy %.4e', abs(t), disc)
            rows.append(DiscrepancyRow(abs(t), p, disc, trials, ext))
        return rows

    @staticmethod
    def write_discrepancy_csv(path: str, rows: Sequence[DiscrepancyRow]):
        """Columns: t_abs, p, median_discrepancy, n_trials"""
        try:
            with open(path, 'w', newline='') as fh:
                writer = csv.writer(fh)
                writer.writerow(['t_abs', 'p', 'median_discrepancy', 'n_trials'])
                for row in rows:
                    writer.writerow([f'{row.t_abs:.12e}', f'{row.p:.6g}', f'{row.median_discrepancy:.12e}',
                                     row.n_trials])
        except OSError as e:
            raise ArtifactIOError(f'cannot write {path}: {e}') from e

    # -- kernel on the nodal model --------------------------------------------

    def kernel_basis(self, nodal: AnnulusGrid, structure: Optional[ACStructure] = None,
                     base: Optional[MapSample] = None, degree: int = 2, n: int = 2) -> List[KernelElement]:
        """
        Null space of the nodal operator assembled on polynomial sections
        z^j conj(z)^k (j + k <= degree) per branch and component, with the
        node-matching condition as extra rows.
        """
        if nodal.t != 0 or nodal.charts != 2:
            raise ShapeError('kernel_basis expects the two-branch nodal grid')
        structure = structure or ACStructure.zero(n)
        if base is None:
            base = MapSample(nodal, nodal.zeros((n,)))
        operator = self.linearize_at(base, structure)

        z = nodal.coordinates
        zb = np.conj(z)
        sqrt_w = np.sqrt(nodal.weights)[..., None]
        exponents = [(j, k) for j in range(degree + 1) for k in range(degree + 1 - j)]
        columns, samples = [], []
        for c in range(2):
            for m in range(n):
                for j, k in exponents:
                    mono = z ** j * zb ** k
                    mono_dbar = k * z ** j * zb ** max(k - 1, 0)
                    mono_d = j * z ** max(j - 1, 0) * zb ** k
                    for unit in (1.0, 1j):
                        parts = []
                        for profile in (mono, mono_dbar, mono_d):
                            data = nodal.zeros((n,))
                            data[c, :, :, m] = unit * profile
                            parts.append(data)
                        section = ResolvedSection(
                            MapSample(nodal, parts[0], check_finite=False),
                            ZeroOneForm(nodal, parts[1], check_finite=False),
                            MapSample(nodal, parts[2], check_finite=False),
                        )
                        data = parts[0]
                        form = operator(section).data * sqrt_w
                        node = np.zeros(n, dtype=complex)
                        if j == 0 and k == 0:
                            node[m] = unit if c == 0 else -unit
                        flat = np.concatenate([form.ravel(), node])
                        columns.append(np.concatenate([flat.real, flat.imag]))
                        samples.append(data)

        matrix = np.stack(columns, axis=1)
        null = scipy.linalg.null_space(matrix, rcond=self.rank_rtol)
        stack = np.stack(samples)
        basis = [
            KernelElement(np.zeros(0, dtype=complex), MapSample(nodal, np.tensordot(vec, stack, axes=1)))
            for vec in null.T
        ]
        logger.info('[Kernel] degree %d: %d-dimensional real kernel', degree, len(basis))
        return basis

    def kernel_projection(self, v: np.ndarray, xi: MapSample, basis: Sequence[KernelElement],
                          mask: Optional[np.ndarray] = None) -> KernelProjection:
        """Minimizer of |v0 - v|^2 + int_mask |xi0 - xi|^2 over the real span of the kernel"""
        if not basis:
            raise RankError('empty kernel basis')
        v = np.asarray(v, dtype=complex)

        def inner(a_v, a_xi, b_v, b_xi):
            return float(np.real(np.vdot(b_v, a_v))) + inner_product(a_xi, b_xi, mask).real

        size = len(basis)
        gram = np.empty((size, size))
        rhs = np.empty(size)
        for i, ki in enumerate(basis):
            rhs[i] = inner(v, xi, ki.v, ki.xi)
            for j in range(i, size):
                kj = basis[j]
                gram[i, j] = gram[j, i] = inner(ki.v, ki.xi, kj.v, kj.xi)

        sv = np.linalg.svd(gram, compute_uv=False)
        if sv[0] == 0.0 or sv[-1] <= self.rank_rtol * sv[0]:
            raise RankError(
                'kernel Gram matrix is degenerate on the mask',
                {'smallest': float(sv[-1]), 'largest': float(sv[0])},
            )
        coords = np.linalg.solve(gram, rhs)
        proj_v = sum((c * k.v for c, k in zip(coords, basis)), np.zeros_like(v))
        proj_xi = MapSample(xi.grid, np.tensordot(coords, np.stack([k.xi.data for k in basis]), axes=1))
        res_xi = xi - proj_xi
        res_sq = float(np.sum(np.abs(v - proj_v) ** 2)) + inner_product(res_xi, res_xi, mask).real
        return KernelProjection(coords, proj_v, proj_xi, math.sqrt(max(res_sq, 0.0)))

    def kernel_lower_bound_constant(self, basis: Sequence[KernelElement], mask: np.ndarray,
                                    p: float = 4.0, trials: Optional[int] = None,
                                    seed: Optional[int] = None) -> float:
        """Measured C with |chi(v, xi)|_L2(mask) >= |(v, xi)|_{L^p_1} / C on kernel elements"""
        trials = trials or self.trials
        seed = self.seed if seed is None else seed
        stack = np.stack([k.xi.data for k in basis])
        grid = basis[0].xi.grid
        worst = 0.0
        for rng in trial_generators(seed, trials):
            coords = rng.standard_normal(len(basis))
            xi = MapSample(grid, np.tensordot(coords, stack, axes=1))
            projected = self.kernel_projection(np.zeros(0, dtype=complex), xi, basis, mask).xi
            l2 = math.sqrt(max(inner_product(projected, projected, mask).real, 0.0))
            worst = max(worst, l1p_norm(xi, p) / l2)
        logger.info('[Kernel] lower-bound constant %.4g over %d trials', worst, trials)
        return worst

    # -- line bundles --------------------------------------------------------

    def line_bundle_dbar_dims(self, k: int, a: Optional[Dict[Monomial, complex]] = None,
                              resolution: Optional[int] = None) -> LineBundleDims:
        """
        Kernel and cokernel of dbar + a on O(k) over the sphere. Sections are
        bihomogeneous polynomials of charge k restricted to S^3 and forms have
        charge k + 2; at resolution M the spaces are bidegrees (k+M, M) and
        (k+M+1, M-1), whose dimensions differ by exactly k + 1.
        """
        minimum = max(1, -k)
        res = max(2, minimum) if resolution is None else int(resolution)
        if res < minimum:
            raise ResolutionError(
                f'resolution {res} cannot represent sections of O({k}); need at least {minimum}',
                {'k': k, 'resolution': res},
            )
        sections = _bidegree_monomials(k + res, res)
        forms = _bidegree_monomials(k + res + 1, res - 1)
        index = {m: i for i, m in enumerate(forms)}

        op = np.zeros((len(forms), len(sections)), dtype=complex)
        for j, m in enumerate(sections):
            for coef, image in _lbar(m):
                op[index[image], j] += coef

        gram_forms = _gram(forms)
        if a:
            coupling = np.zeros_like(op)
            for j, m in enumerate(sections):
                for ma, ca in a.items():
                    if (ma[0] + ma[1]) - (ma[2] + ma[3]) != 2:
                        raise ParameterError('perturbation terms must have charge +2', {'monomial': list(ma)})
                    prod = tuple(x + y for x, y in zip(ma, m))
                    for i, mf in enumerate(forms):
                        coupling[i, j] += ca * _sphere_inner(prod, mf)
            op = op + np.linalg.solve(gram_forms, coupling)

        r_sections = scipy.linalg.cholesky(_gram(sections))
        r_forms = scipy.linalg.cholesky(gram_forms)
        normalized = r_forms @ op @ np.linalg.inv(r_sections)
        sv = scipy.linalg.svd(normalized, compute_uv=False)
        rank = int(np.sum(sv > self.rank_rtol * sv[0])) if sv.size and sv[0] > 0 else 0
        dims = LineBundleDims(k, len(sections) - rank, len(forms) - rank, res)
        logger.debug('[LineBundle] O(%d) at M=%d: ker %d coker %d', k, res, dims.kernel_dim, dims.coker_dim)
        return dims

    def line_bundle_report(self, k_values: Sequence[int], seeds: Sequence[int], scale: float = 1e-2,
                           resolution: Optional[int] = None) -> List[LineBundleDims]:
        """Dims for every (k, seed) pair; seed -1 means the unperturbed operator"""
        cases = [(k, s) for k in k_values for s in seeds]

        def one(case):
            k, s = case
            a = None if s < 0 else random_line_bundle_perturbation(np.random.default_rng(s), scale)
            return self.line_bundle_dbar_dims(k, a, resolution)

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(one, cases))

    @staticmethod
    def write_dims_json(path: str, dims: Sequence[LineBundleDims]):
        try:
            with open(path, 'w') as fh:
                json.dump([d.to_dict() for d in dims], fh, indent=2)
        except OSError as e:
            raise ArtifactIOError(f'cannot write {path}: {e}') from e

    # -- weak maximum principle ----------------------------------------------

    @staticmethod
    def laurent_sample(grid: AnnulusGrid, coefficients: np.ndarray) -> MapSample:
        """
        Holomorphic h = sum_k a_k x^k + sum_m b_m y^m on A_t. `coefficients`
        has shape (2, degree + 1, n): row 0 holds a_0..a_d, row 1 holds b_0..b_d
        (b_0 is ignored).
        """
        degree = coefficients.shape[1] - 1
        n = coefficients.shape[2]
        data = grid.zeros((n,))
        for c in range(2):
            own = grid.coordinates
            other = grid.t / own
            x, y = (own, other) if c == 0 else (other, own)
            for k in range(degree + 1):
                data[c] += (x ** k)[..., None] * coefficients[0, k]
                if k > 0:
                    data[c] += (y ** k)[..., None] * coefficients[1, k]
        return MapSample(grid, data)

    def check_maximum_principle(self, t_values: Sequence[complex], cases_per_t: int, n_r: int = 24,
                                n_theta: int = 16, a_norm: float = 1e-2, q_amplitude: float = 0.05,
                                degree: int = 3, seed: Optional[int] = None, n: int = 2) -> MaxPrincipleReport:
        """
        xi = (Id + q)^-1 (Phi h) with Phi solving dbar Phi = A Phi and h holomorphic;
        records sup over A_t against sup over its boundary circles.
        """
        seed = self.seed if seed is None else seed
        report = MaxPrincipleReport()
        for t in t_values:
            if t == 0:
                raise ParameterDomainError('the maximum principle is checked on A_t with t != 0')
            grid = build_annulus_grid(t, n_r, n_theta)
            self.cauchy.sup_operator_norm(grid)

            def one(args):
                case, rng = args
                a = rng.standard_normal(grid.shape + (n, n)) + 1j * rng.standard_normal(grid.shape + (n, n))
                a *= a_norm / np.max(np.linalg.norm(a, ord=2, axis=(-2, -1)))
                phi = self.cauchy.resolvent_solve(GridField(grid, a)).phi.data
                coeffs = rng.standard_normal((2, degree + 1, n)) + 1j * rng.standard_normal((2, degree + 1, n))
                h = self.laurent_sample(grid, coeffs).data
                q = ACStructure.random_constant(rng, q_amplitude, n)
                xi = MapSample(grid, solve_antilinear(q.q(h), np.einsum('...ij,...j->...i', phi, h)))
                return MaxPrincipleCase(abs(t), case, sup_norm(xi), boundary_sup_norm(xi))

            gens = trial_generators(seed + len(report.cases), cases_per_t)
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                report.cases.extend(pool.map(one, enumerate(gens)))
        logger.info('[MaxPrinciple] %d cases, worst ratio %.3f', len(report.cases), report.worst)
        return report
