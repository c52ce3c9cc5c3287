"""
Experiment Runner
Runs one seeded experiment per command and writes its CSV/JSON artifacts
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from config.settings import Config
from services.cauchy_service import CauchyService
from services.gluing_service import GluingService, NodeModel, make_pushforward_oracle
from services.index_service import IndexService, NodalConfiguration
from services.linearized_service import LinearizedService
from utils.errors import ArtifactIOError, NodalGlueError, RankError, ThresholdError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_T: Dict[str, List[complex]] = {
    'preglue': [1e-2, 1e-4, 1e-6, 1e-8],
    'inverse': [1e-2, 1e-4, 1e-6],
    'solve': [1e-3],
    'maxprinciple': [1e-2, 1e-4, 1e-6],
    'norms': [1e-2, 1e-4, 1e-6],
}


def parse_t_list(text: str) -> List[complex]:
    """'1e-2,1e-4,0.5j' -> complex values"""
    items = [item.strip() for item in text.split(',') if item.strip()]
    if not items:
        raise ValidationError('the t-list is empty')
    try:
        return [complex(item.replace(' ', '')) for item in items]
    except ValueError as e:
        raise ValidationError(f'cannot parse t-list {text!r}') from e


def parse_grid(text: str) -> Tuple[int, int]:
    try:
        n_r, n_theta = (int(v) for v in text.lower().split('x'))
    except ValueError as e:
        raise ValidationError(f'grid must look like 48x32, got {text!r}') from e
    return n_r, n_theta


@dataclass
class ExperimentConfig:
    command: str
    t_values: Optional[List[complex]] = None
    p: float = 4.0
    n_r: int = 48
    n_theta: int = 32
    seed: int = 0
    amplitude: float = 0.0
    config_path: Optional[str] = None
    out_dir: str = 'artifacts'
    trials: int = 20
    cases: int = 5
    degrees: List[int] = field(default_factory=lambda: [1, 2, 3])
    fixed: int = 0
    k_values: List[int] = field(default_factory=lambda: [-2, -1, 0, 1, 2, 3])

    def __post_init__(self):
        if self.t_values is not None and not self.t_values:
            raise ValidationError('the t-list is empty')
        if self.n_r < 2 or self.n_theta < 2:
            raise ValidationError('grid sizes must be at least 2', {'n_r': self.n_r, 'n_theta': self.n_theta})
        if self.trials < 1 or self.cases < 1:
            raise ValidationError('trial and case counts must be positive')

    @property
    def t_list(self) -> List[complex]:
        return self.t_values if self.t_values is not None else DEFAULT_T.get(self.command, [])

    def to_dict(self) -> Dict:
        doc = asdict(self)
        if self.t_values is not None:
            doc['t_values'] = [[t.real, t.imag] for t in self.t_values]
        return doc

    @classmethod
    def from_dict(cls, doc: Dict) -> 'ExperimentConfig':
        doc = dict(doc)
        if doc.get('t_values') is not None:
            doc['t_values'] = [complex(re, im) for re, im in doc['t_values']]
        try:
            return cls(**doc)
        except TypeError as e:
            raise ValidationError(f'malformed experiment config: {e}') from e

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> 'ExperimentConfig':
        n_r, n_theta = parse_grid(args.grid)
        return cls(
            command=args.command,
            t_values=parse_t_list(args.t) if args.t is not None else None,
            p=args.p,
            n_r=n_r,
            n_theta=n_theta,
            seed=Config.SEED if args.seed is None else args.seed,
            amplitude=args.amplitude,
            config_path=args.config,
            out_dir=args.out or Config.OUTPUT_DIR,
            trials=args.trials or Config.NORM_TRIALS,
            cases=args.cases,
            degrees=args.degrees,
            fixed=args.fixed,
            k_values=args.k,
        )


class ExperimentRunner:
    """Registry of experiment commands"""

    def __init__(self, threads: Optional[int] = None):
        self.threads = threads or Config.THREADS
        self.commands: Dict[str, Dict] = {
            'index': {'handler': self.run_index, 'description': 'Index report for a nodal configuration'},
            'strata': {'handler': self.run_strata, 'description': 'Degree-d stratification of curves in CP^2'},
            'preglue': {'handler': self.run_preglue, 'description': 'Pregluing defect sweep with slope fit'},
            'inverse': {'handler': self.run_inverse, 'description': 'Quasi-inverse discrepancy sweep'},
            'solve': {'handler': self.run_solve, 'description': 'Newton-Picard solve on A_t'},
            'maxprinciple': {'handler': self.run_maxprinciple, 'description': 'Weak maximum principle cases'},
            'norms': {'handler': self.run_norms, 'description': 'Right inverse operator-norm sweep'},
            'dims': {'handler': self.run_dims, 'description': 'Line-bundle dbar kernel and cokernel'},
        }

    def run(self, config: ExperimentConfig) -> int:
        try:
            entry = self.commands.get(config.command)
            if entry is None:
                raise ValidationError(f'unknown command {config.command!r}', {'known': sorted(self.commands)})
            try:
                Config.ensure_directories(config.out_dir)
            except OSError as e:
                raise ArtifactIOError(f'cannot create {config.out_dir}: {e}') from e
            logger.info('[Runner] %s with seed %d', config.command, config.seed)
            try:
                print(entry['handler'](config))
            except np.linalg.LinAlgError as e:
                raise RankError(f'singular linear system in {config.command}: {e}') from e
            return 0
        except NodalGlueError as e:
            return emit_error(e)

    # -- services --------------------------------------------------------------

    def _linearized(self, config: ExperimentConfig) -> LinearizedService:
        cauchy = CauchyService(threads=self.threads, trials=config.trials, seed=config.seed)
        return LinearizedService(cauchy=cauchy, threads=self.threads, trials=config.trials, seed=config.seed)

    def _gluing(self, config: ExperimentConfig) -> GluingService:
        return GluingService(linearized=self._linearized(config), threads=self.threads,
                             n_r=config.n_r, n_theta=config.n_theta)

    @staticmethod
    def _node(config: ExperimentConfig) -> NodeModel:
        if config.amplitude == 0.0:
            return NodeModel.linear()
        return make_pushforward_oracle(config.seed, config.amplitude).node()

    @staticmethod
    def _path(config: ExperimentConfig, name: str) -> str:
        return os.path.join(config.out_dir, name)

    # -- commands --------------------------------------------------------------

    def run_index(self, config: ExperimentConfig) -> str:
        if not config.config_path:
            raise ValidationError('index needs --config pointing at a nodal configuration')
        service = IndexService()
        report = service.report(NodalConfiguration.from_json(config.config_path))
        service.write_report_json(self._path(config, 'index_report.json'), report)
        return report.format_table()

    def run_strata(self, config: ExperimentConfig) -> str:
        reports = [IndexService.cp2_stratum_report(d, config.fixed) for d in config.degrees]
        path = self._path(config, 'strata.json')
        try:
            with open(path, 'w') as fh:
                json.dump([r.to_dict() for r in reports], fh, indent=2)
        except OSError as e:
            raise ArtifactIOError(f'cannot write {path}: {e}') from e
        lines = ['d  g  dim_C  max_fixed  strata']
        for r in reports:
            strata = ', '.join(f'{s.name} ({s.dim_c})' for s in r.strata) or '-'
            lines.append(f'{r.d}  {r.genus}  {r.dim_c}  {r.max_fixed}  {strata}')
        return '\n'.join(lines)

    def run_preglue(self, config: ExperimentConfig) -> str:
        gluing = self._gluing(config)
        sweep = gluing.defect_scaling_sweep(self._node(config), config.p, config.t_list, config.n_r, config.n_theta)
        if sweep.slope is None:
            raise ThresholdError('pregluing defects do not decrease with |t|', {'rows': sweep.rows})
        gluing.write_defect_csv(self._path(config, 'preglue.csv'), sweep)
        return f'p = {config.p:g}: fitted slope {sweep.slope:.4f} (expected {1.0 / (2.0 * config.p):.4f})'

    def run_inverse(self, config: ExperimentConfig) -> str:
        linearized = self._linearized(config)
        rows = linearized.discrepancy_sweep(config.t_list, config.p, config.n_r, config.n_theta)
        linearized.write_discrepancy_csv(self._path(config, 'discrepancy.csv'), rows)
        return '\n'.join(f'|t| = {r.t_abs:.1e}: median discrepancy {r.median_discrepancy:.4e}' for r in rows)

    def run_solve(self, config: ExperimentConfig) -> str:
        gluing = self._gluing(config)
        results = gluing.solve_many(self._node(config), config.p, config.t_list, config.n_r, config.n_theta)
        rows = [gluing.sweep_row(record) for _, record in results]
        gluing.write_sweep_csv(self._path(config, 'solve.csv'), rows)
        for k, (solution, record) in enumerate(results):
            gluing.write_solution_json(self._path(config, f'solution_{k}.json'), solution, record)
        return '\n'.join(
            f'|t| = {r.t_abs:.1e}: {r.iterations} steps, |xi| = {r.xi_norm:.4e}' for r in rows
        )

    def run_maxprinciple(self, config: ExperimentConfig) -> str:
        linearized = self._linearized(config)
        report = linearized.check_maximum_principle(config.t_list, config.cases, config.n_r, config.n_theta,
                                                    seed=config.seed)
        path = self._path(config, 'maxprinciple.json')
        doc = {
            'constant': report.constant,
            'worst': report.worst,
            'passed': report.passed,
            'cases': [asdict(c) for c in report.cases],
        }
        try:
            with open(path, 'w') as fh:
                json.dump(doc, fh, indent=2)
        except OSError as e:
            raise ArtifactIOError(f'cannot write {path}: {e}') from e
        if not report.passed:
            raise ThresholdError(
                f'interior sup exceeds {report.constant:g} times the boundary sup',
                {'worst': report.worst, 'constant': report.constant},
            )
        return f'{len(report.cases)} cases, worst ratio {report.worst:.3f} (bound {report.constant:g})'

    def run_norms(self, config: ExperimentConfig) -> str:
        cauchy = CauchyService(threads=self.threads, trials=config.trials, seed=config.seed)
        estimates = cauchy.right_inverse_norm_sweep(config.t_list, config.p, config.n_r, config.n_theta)
        cauchy.write_operator_norm_csv(self._path(config, 'norms.csv'), estimates)
        values = [e.estimate for e in estimates]
        return f'|P_t| estimates {min(values):.4f} .. {max(values):.4f}, spread {max(values) / min(values):.3f}'

    def run_dims(self, config: ExperimentConfig) -> str:
        linearized = self._linearized(config)
        dims = linearized.line_bundle_report(config.k_values, seeds=[-1, config.seed])
        linearized.write_dims_json(self._path(config, 'dims.json'), dims)
        return '\n'.join(f'k = {d.k}: kernel {d.kernel_dim}, cokernel {d.coker_dim}' for d in dims)


def emit_error(error: NodalGlueError) -> int:
    logger.error('[Runner] %s: %s', error.code, error.message)
    print(json.dumps(error.to_dict(), default=str))
    return error.exit_code


class RunnerArgumentParser(argparse.ArgumentParser):
    """Reports bad arguments as a validation error instead of exiting"""

    def error(self, message):
        raise ValidationError(f'bad arguments: {message}', {'usage': self.format_usage().strip()})


def build_parser(commands: Dict[str, Dict]) -> argparse.ArgumentParser:
    parser = RunnerArgumentParser(prog='nodal-glue', description='Numerical gluing experiments at a node')
    parser.add_argument('command', choices=sorted(commands))
    parser.add_argument('--config', help='nodal configuration JSON (index)')
    parser.add_argument('--out', help='artifact directory')
    parser.add_argument('--seed', type=int)
    parser.add_argument('--p', type=float, default=4.0)
    parser.add_argument('--t', help='comma-separated gluing parameters')
    parser.add_argument('--grid', default='48x32', help='radial x angular samples')
    parser.add_argument('--amplitude', type=float, default=0.0, help='pushforward oracle amplitude; 0 = linear node')
    parser.add_argument('--trials', type=int)
    parser.add_argument('--cases', type=int, default=5)
    parser.add_argument('--degrees', nargs='+', type=int, default=[1, 2, 3])
    parser.add_argument('--fixed', type=int, default=0)
    parser.add_argument('--k', nargs='+', type=int, default=[-2, -1, 0, 1, 2, 3], help='e.g. --k -2 0 3')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=Config.LOG_LEVEL, format='%(asctime)s %(levelname)s %(name)s %(message)s')
    runner = ExperimentRunner()
    try:
        args = build_parser(runner.commands).parse_args(argv)
        config = ExperimentConfig.from_args(args)
    except NodalGlueError as e:
        return emit_error(e)
    return runner.run(config)


if __name__ == '__main__':
    sys.exit(main())
