"""
Index bookkeeping for nodal curves
Riemann-Roch, normal index, adjunction, d(A) and CP^2 strata, all in integers
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils.errors import (
    ArtifactIOError,
    ConsistencyError,
    InputError,
    ParameterDomainError,
    ParameterError,
    ParityError,
)

logger = logging.getLogger(__name__)


def _require_int(name: str, value, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        raise InputError(f'{name} must be an integer, got {value!r}', {name: repr(value)})
    if minimum is not None and value < minimum:
        raise InputError(f'{name} must be at least {minimum}, got {value}', {name: int(value)})
    return int(value)


@dataclass(frozen=True)
class Component:
    """One irreducible component of the normalization"""
    genus: int
    c1_pairing: int
    df_zero_count: int = 0
    marked_count: int = 0

    def __post_init__(self):
        _require_int('genus', self.genus, 0)
        _require_int('c1_pairing', self.c1_pairing)
        _require_int('df_zero_count', self.df_zero_count, 0)
        _require_int('marked_count', self.marked_count, 0)

    @property
    def normal_c1(self) -> int:
        """c1 of the normal bundle of the immersed part, corrected for df-zeros"""
        return self.c1_pairing - 2 * (1 - self.genus) - self.df_zero_count


@dataclass
class NodalConfiguration:
    """
    Combinatorial data of a nodal curve f: Sigma_0 -> V in class A = sum A_i.

    `genus` and `c1_total` may be given explicitly; they are then checked
    against the component data by normal_index.
    """
    components: List[Component]
    nodes: int
    intersection: List[List[int]]
    n: int = 2
    genus: Optional[int] = None
    c1_total: Optional[int] = None
    name: str = 'configuration'

    def __post_init__(self):
        if not self.components:
            raise InputError('a configuration needs at least one component')
        self.components = [c if isinstance(c, Component) else Component(**c) for c in self.components]
        _require_int('nodes', self.nodes, 0)
        _require_int('n', self.n, 1)
        matrix = np.asarray(self.intersection)
        r = len(self.components)
        if matrix.shape != (r, r):
            raise InputError(
                f'intersection matrix must be {r}x{r}, got shape {matrix.shape}',
                {'shape': list(matrix.shape)},
            )
        for value in matrix.ravel():
            _require_int('intersection entry', value.item() if hasattr(value, 'item') else value)
        if not np.array_equal(matrix, matrix.T):
            raise InputError('intersection matrix must be symmetric')
        if self.arithmetic_genus < 0:
            raise InputError(
                f'arithmetic genus {self.arithmetic_genus} is negative',
                {'arithmetic_genus': self.arithmetic_genus},
            )
        if self.genus is not None:
            _require_int('genus', self.genus, 0)
        if self.c1_total is not None:
            _require_int('c1_total', self.c1_total)

    @property
    def r(self) -> int:
        return len(self.components)

    @property
    def arithmetic_genus(self) -> int:
        """sum of the normalization genera + m - r + 1"""
        return sum(c.genus for c in self.components) + self.nodes - self.r + 1

    @property
    def g(self) -> int:
        return self.arithmetic_genus if self.genus is None else self.genus

    @property
    def c1A(self) -> int:
        return sum(c.c1_pairing for c in self.components) if self.c1_total is None else self.c1_total

    @property
    def AA(self) -> int:
        return int(np.sum(np.asarray(self.intersection, dtype=np.int64)))

    @property
    def df_zero_total(self) -> int:
        return sum(c.df_zero_count for c in self.components)

    @property
    def marked_total(self) -> int:
        return sum(c.marked_count for c in self.components)

    @classmethod
    def from_dict(cls, doc: Dict) -> 'NodalConfiguration':
        try:
            return cls(
                components=[Component(**c) for c in doc['components']],
                nodes=doc['nodes'],
                intersection=doc['intersection'],
                n=doc.get('n', 2),
                genus=doc.get('genus'),
                c1_total=doc.get('c1_total'),
                name=doc.get('name', 'configuration'),
            )
        except (KeyError, TypeError) as e:
            raise InputError(f'malformed nodal configuration: {e}') from e

    @classmethod
    def from_json(cls, path: str) -> 'NodalConfiguration':
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as e:
            raise ArtifactIOError(f'cannot read {path}: {e}') from e
        except json.JSONDecodeError as e:
            raise InputError(f'{path} is not valid JSON: {e}') from e
        return cls.from_dict(doc)

    def to_dict(self) -> Dict:
        doc = {
            'name': self.name,
            'components': [asdict(c) for c in self.components],
            'nodes': self.nodes,
            'intersection': [[int(v) for v in row] for row in self.intersection],
            'n': self.n,
        }
        if self.genus is not None:
            doc['genus'] = self.genus
        if self.c1_total is not None:
            doc['c1_total'] = self.c1_total
        return doc


# ---------------------------------------------------------------------------
# Formulas
# ---------------------------------------------------------------------------

def riemann_roch_index(c1A: int, g: int, n: int) -> int:
    """Complex index of D_f: <c1(TV), A> + n(1 - g)"""
    _require_int('n', n, 1)
    _require_int('g', g, 0)
    return _require_int('c1A', c1A) + n * (1 - g)


def moduli_formal_dim(c1A: int, g: int, n: int) -> int:
    """i(A, g) = <c1(TV), A> + (n - 3)(1 - g) = ind(D_f) + 3g - 3"""
    value = c1A + (n - 3) * (1 - g)
    if value != riemann_roch_index(c1A, g, n) + 3 * g - 3:
        raise ConsistencyError('i(A,g) disagrees with ind(D_f) + 3g - 3', {'c1A': c1A, 'g': g, 'n': n})
    return value


def tangent_euler_characteristic(g: int, m: int) -> int:
    """chi(T Sigma_0) for the normalization of a genus g curve with m nodes"""
    return 3 - 3 * g + m


def glued_index(c1A: int, g: int, n: int, m: int) -> int:
    """ind(D_t) = ind(D_f) + 3g - 3 - m"""
    return riemann_roch_index(c1A, g, n) - tangent_euler_characteristic(g, m)


def normal_index(config: NodalConfiguration) -> int:
    """ind(D^N) = <c1, A> + g - 1 - m - |df^-1(0)|, evaluated globally and per component"""
    if config.n != 2:
        raise ParameterError('the normal index is defined for curves in a 4-manifold', {'n': config.n})
    global_value = config.c1A + config.g - 1 - config.nodes - config.df_zero_total
    per_component = sum(c.normal_c1 + 1 - c.genus for c in config.components)
    if global_value != per_component:
        logger.warning('[Index] normal index mismatch: %d globally, %d per component', global_value, per_component)
        raise ConsistencyError(
            'normal index disagrees between the global and per-component formulas',
            {'global': global_value, 'per_component': per_component,
             'genus': config.g, 'c1A': config.c1A},
        )
    return global_value


def _halve(value: int, what: str) -> int:
    if value % 2:
        raise ParityError(f'{what} is odd; homology data are inconsistent', {'value': value})
    return value // 2


def d_of_A(AA: int, c1A: int) -> int:
    """(A.A + <c1, A>) / 2"""
    return _halve(AA + c1A, 'A.A + <c1,A>')


def arithmetic_genus_class(AA: int, c1A: int) -> int:
    """g_a(A) = (A.A - <c1, A>) / 2 + 1"""
    return _halve(AA - c1A, 'A.A - <c1,A>') + 1


def adjunction_defect(config: NodalConfiguration, source_genus: Optional[int] = None) -> int:
    """
    Sum of the singularity contributions delta(s) = g_a(A) - g_a(Sigma) + m.

    `source_genus` defaults to the arithmetic genus of the configuration. The
    curve is nodal exactly when the sum equals m.
    """
    source_genus = config.arithmetic_genus if source_genus is None else _require_int('source_genus', source_genus, 0)
    total = arithmetic_genus_class(config.AA, config.c1A) - source_genus + config.nodes
    if total < 0:
        raise InputError('adjunction gives a negative singularity count', {'delta_sum': total})
    return total


def regularity_check(config: NodalConfiguration) -> List[bool]:
    """<c1(f_i* TV), Sigma_i> > |df_i^-1(0)| per component"""
    return [c.c1_pairing > c.df_zero_count for c in config.components]


def fixed_points_check(config: NodalConfiguration) -> List[bool]:
    """|F_i| + |df_i^-1(0)| < <c1(f_i* TV), Sigma_i> per component"""
    return [c.marked_count + c.df_zero_count < c.c1_pairing for c in config.components]


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class IndexReport:
    name: str
    ind_D: int
    i_Ag: int
    ind_normal: Optional[int]
    d_A: int
    g_a: int
    delta_sum: int
    nodal: bool
    regular: List[bool]
    fixed_ok: List[bool]
    chi_tangent: int
    ind_Dt: int
    fixed_dimension: int

    def to_dict(self) -> Dict:
        return asdict(self)

    def format_table(self) -> str:
        rows = [
            ('ind(D_f)', self.ind_D),
            ('i(A,g)', self.i_Ag),
            ('ind(D^N)', self.ind_normal if self.ind_normal is not None else '-'),
            ('d(A)', self.d_A),
            ('g_a(A)', self.g_a),
            ('sum delta', self.delta_sum),
            ('nodal', self.nodal),
            ('regular', ' '.join('yes' if f else 'no' for f in self.regular)),
            ('fixed points ok', ' '.join('yes' if f else 'no' for f in self.fixed_ok)),
            ('chi(T Sigma_0)', self.chi_tangent),
            ('ind(D_t)', self.ind_Dt),
            ('d(A) - |F|', self.fixed_dimension),
        ]
        width = max(len(k) for k, _ in rows)
        lines = [self.name, '-' * (width + 12)]
        lines.extend(f'{k.ljust(width)}  {v}' for k, v in rows)
        return '\n'.join(lines)


@dataclass
class Stratum:
    name: str
    dim_c: int


@dataclass
class StratumReport:
    d: int
    genus: int
    dim_c: int
    max_fixed: int
    fiber_real_dim: int
    total_real_dim: int
    strata: List[Stratum]
    fixed: int = 0
    fixed_real_dim: Optional[int] = None
    strata_after_fixing: List[Stratum] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return asdict(self)


CP2_STRATA: Dict[int, List[Tuple[str, int]]] = {
    1: [],
    2: [('two lines', 4), ('double line', 2)],
    3: [('rational, one node', 8), ('rational, one cusp', 7)],
}


class IndexService:
    """Index reports for nodal configurations and CP^2 degree-d curves"""

    def report(self, config: NodalConfiguration, source_genus: Optional[int] = None) -> IndexReport:
        g = config.g
        ind_D = riemann_roch_index(config.c1A, g, config.n)
        i_Ag = moduli_formal_dim(config.c1A, g, config.n)
        ind_normal = normal_index(config) if config.n == 2 else None
        if ind_normal is not None and ind_normal != i_Ag - config.nodes - config.df_zero_total:
            raise ConsistencyError('normal index and i(A,g) - m - zeros disagree')

        chi = tangent_euler_characteristic(g, config.nodes)
        ind_Dt = glued_index(config.c1A, g, config.n, config.nodes)
        if ind_Dt != ind_D + 3 * g - 3 - config.nodes:
            raise ConsistencyError('ind(D_t) bookkeeping disagrees with chi(T Sigma_0)')

        d_A = d_of_A(config.AA, config.c1A)
        delta_sum = adjunction_defect(config, source_genus)
        report = IndexReport(
            name=config.name,
            ind_D=ind_D,
            i_Ag=i_Ag,
            ind_normal=ind_normal,
            d_A=d_A,
            g_a=arithmetic_genus_class(config.AA, config.c1A),
            delta_sum=delta_sum,
            nodal=delta_sum == config.nodes,
            regular=regularity_check(config),
            fixed_ok=fixed_points_check(config),
            chi_tangent=chi,
            ind_Dt=ind_Dt,
            fixed_dimension=d_A - config.marked_total,
        )
        logger.info('[Index] %s: ind(D^N) = %s, d(A) = %d', config.name, ind_normal, d_A)
        return report

    @staticmethod
    def cp2_stratum_report(d: int, fixed: int = 0) -> StratumReport:
        """
        Dimension accounting for degree-d curves in CP^2 along a path of
        structures, optionally through `fixed` points. Uses A = d[L],
        A.A = d^2 and <c1, A> = 3d.
        """
        d = _require_int('d', d)
        if d <= 0:
            raise ParameterDomainError(f'degree must be positive, got {d}', {'d': d})
        max_fixed = 3 * d - 1
        fixed = _require_int('fixed', fixed, 0)
        if fixed > max_fixed:
            raise ParameterDomainError(
                f'at most 3d - 1 = {max_fixed} points can be fixed in degree {d}',
                {'fixed': fixed, 'max_fixed': max_fixed},
            )

        dim_c = d_of_A(d * d, 3 * d)
        strata = [Stratum(name, dim) for name, dim in CP2_STRATA.get(d, [])]
        report = StratumReport(
            d=d,
            genus=arithmetic_genus_class(d * d, 3 * d),
            dim_c=dim_c,
            max_fixed=max_fixed,
            fiber_real_dim=2 * dim_c,
            total_real_dim=2 * dim_c + 1,
            strata=strata,
            fixed=fixed,
        )
        if d > 3:
            report.notes.append('singular strata are not tabulated above degree 3')
        if d == 1:
            report.notes.append(
                'no singular curves; the fiber over one structure has real dimension 4, '
                'the family over the path has real dimension 5'
            )
        if fixed:
            report.strata_after_fixing = [Stratum(s.name, s.dim_c - fixed) for s in strata]
            if fixed < max_fixed:
                # each fixed point cuts two real dimensions
                report.fixed_real_dim = report.total_real_dim - 2 * fixed
        return report

    @staticmethod
    def random_configuration(rng: np.random.Generator, max_components: int = 4) -> NodalConfiguration:
        """Random combinatorially valid configuration with n = 2"""
        r = int(rng.integers(1, max_components + 1))
        components = [
            Component(
                genus=int(rng.integers(0, 4)),
                c1_pairing=int(rng.integers(0, 13)),
                df_zero_count=int(rng.integers(0, 4)),
                marked_count=int(rng.integers(0, 6)),
            )
            for _ in range(r)
        ]
        nodes = int(rng.integers(max(r - 1, 0), r + 4))
        upper = rng.integers(-3, 10, (r, r))
        matrix = np.triu(upper) + np.triu(upper, 1).T
        if (int(matrix.sum()) + sum(c.c1_pairing for c in components)) % 2:
            matrix[0, 0] += 1
        return NodalConfiguration(components, nodes, matrix.tolist(), name='random')

    @staticmethod
    def write_report_json(path: str, report):
        try:
            with open(path, 'w') as fh:
                json.dump(report.to_dict(), fh, indent=2)
        except OSError as e:
            raise ArtifactIOError(f'cannot write {path}: {e}') from e

    def check_identities(self, configs: Sequence[NodalConfiguration]) -> int:
        """Cross-formula identities over many configurations; returns the number checked"""
        for config in configs:
            expected = moduli_formal_dim(config.c1A, config.g, 2) - config.nodes - config.df_zero_total
            if normal_index(config) != expected:
                raise ConsistencyError('normal index identity fails', config.to_dict())
            if d_of_A(config.AA, config.c1A) - arithmetic_genus_class(config.AA, config.c1A) + 1 != config.c1A:
                raise ConsistencyError('d(A) - g_a(A) + 1 != <c1, A>', config.to_dict())
            if regularity_check(config) != fixed_points_check(
                NodalConfiguration(
                    [Component(c.genus, c.c1_pairing, c.df_zero_count, 0) for c in config.components],
                    config.nodes, config.intersection, config.n,
                )
            ):
                raise ConsistencyError('regularity and fixed-point criteria disagree without fixed points')
        return len(configs)
