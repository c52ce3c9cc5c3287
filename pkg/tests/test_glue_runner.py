import json
from pathlib import Path

import numpy as np
import pytest

from glue_runner import ExperimentConfig, ExperimentRunner, main, parse_grid, parse_t_list
from utils.errors import ValidationError

CUBIC = str(Path(__file__).resolve().parent.parent / 'configs' / 'cubic_node.json')


def _last_json(capsys):
    lines = [line for line in capsys.readouterr().out.splitlines() if line.startswith('{')]
    return json.loads(lines[-1])


class TestParsing:
    def test_t_list(self):
        assert parse_t_list('1e-2, 1e-4,0.5j') == [1e-2, 1e-4, 0.5j]

    @pytest.mark.parametrize('text', ['', ' , ', 'abc'])
    def test_bad_t_list(self, text):
        with pytest.raises(ValidationError):
            parse_t_list(text)

    def test_grid(self):
        assert parse_grid('48x32') == (48, 32)
        with pytest.raises(ValidationError):
            parse_grid('48by32')

    def test_config_round_trip(self):
        config = ExperimentConfig('solve', t_values=[1e-3, 2e-3j], amplitude=0.05, seed=7)
        again = ExperimentConfig.from_dict(json.loads(json.dumps(config.to_dict())))
        assert again == config

    def test_unknown_config_field(self):
        with pytest.raises(ValidationError):
            ExperimentConfig.from_dict({'command': 'solve', 'colour': 'red'})


class TestCommands:
    def test_index(self, tmp_path, capsys):
        assert main(['index', '--config', CUBIC, '--out', str(tmp_path)]) == 0
        report = json.loads((tmp_path / 'index_report.json').read_text())
        assert report['ind_normal'] == 8
        assert report['fixed_ok'] == [True]
        assert 'ind(D^N)' in capsys.readouterr().out

    def test_index_needs_config(self, tmp_path, capsys):
        assert main(['index', '--out', str(tmp_path)]) == 40
        assert _last_json(capsys)['error'] == 'validation'

    def test_empty_t_list(self, tmp_path, capsys):
        assert main(['preglue', '--t', '', '--out', str(tmp_path)]) == 40
        doc = _last_json(capsys)
        assert doc['error'] == 'validation'
        assert doc['exit_code'] == 40

    def test_t_outside_domain(self, tmp_path, capsys):
        assert main(['preglue', '--t', '2,1e-4', '--grid', '24x16', '--out', str(tmp_path)]) == 10
        assert _last_json(capsys)['error'] == 'parameter_domain'

    def test_preglue_is_deterministic(self, tmp_path):
        outputs = []
        for name in ('a', 'b'):
            out = tmp_path / name
            assert main(['preglue', '--p', '4', '--t', '1e-2,1e-4,1e-6,1e-8', '--grid', '48x16',
                         '--out', str(out)]) == 0
            outputs.append((out / 'preglue.csv').read_bytes())
        assert outputs[0] == outputs[1]
        lines = outputs[0].decode().splitlines()
        assert lines[0] == 't_abs,p,defect_norm'
        assert len(lines) == 5

    def test_bad_arguments(self, tmp_path, capsys):
        assert main(['dims', '--k', 'one', '--out', str(tmp_path)]) == 40
        doc = _last_json(capsys)
        assert doc['error'] == 'validation'
        assert 'usage' in doc['details']

    def test_unknown_command(self, capsys):
        assert main(['glue']) == 40
        assert _last_json(capsys)['error'] == 'validation'

    def test_singular_system_is_reported(self, tmp_path, capsys):
        def singular(config):
            raise np.linalg.LinAlgError('Singular matrix')

        runner = ExperimentRunner(threads=1)
        runner.commands['norms']['handler'] = singular
        assert runner.run(ExperimentConfig('norms', out_dir=str(tmp_path))) == 23
        assert _last_json(capsys)['error'] == 'rank'

    def test_strata(self, tmp_path):
        assert main(['strata', '--out', str(tmp_path)]) == 0
        reports = json.loads((tmp_path / 'strata.json').read_text())
        assert [r['dim_c'] for r in reports] == [2, 5, 9]
        assert [r['max_fixed'] for r in reports] == [2, 5, 8]

    def test_dims(self, tmp_path):
        assert main(['dims', '--k', '-1', '0', '1', '--seed', '3', '--out', str(tmp_path)]) == 0
        dims = json.loads((tmp_path / 'dims.json').read_text())
        assert len(dims) == 6
        assert all(d['coker_dim'] == 0 for d in dims)

    def test_solve(self, tmp_path):
        assert main(['solve', '--t', '1e-4', '--grid', '24x16', '--trials', '3', '--out', str(tmp_path)]) == 0
        lines = (tmp_path / 'solve.csv').read_text().splitlines()
        assert lines[0] == 't_abs,p,defect_norm,xi_norm,iterations,converged'
        assert lines[1].endswith(',1,true')
        solution = json.loads((tmp_path / 'solution_0.json').read_text())
        assert solution['record']['converged'] is True
