import inspect

import pytest

from utils import errors
from utils.errors import IterationError, NodalGlueError, ParameterDomainError, TooLargeTError

ERROR_CLASSES = [
    cls for _, cls in inspect.getmembers(errors, inspect.isclass)
    if issubclass(cls, NodalGlueError) and cls is not NodalGlueError
]


def test_codes_are_distinct():
    codes = [cls.code for cls in ERROR_CLASSES]
    exit_codes = [cls.exit_code for cls in ERROR_CLASSES]
    assert len(set(codes)) == len(codes)
    assert len(set(exit_codes)) == len(exit_codes)
    assert all(code != 0 for code in exit_codes)


def test_error_document():
    doc = TooLargeTError('rho too large', {'rho': 0.7}).to_dict()
    assert doc == {'error': 't_too_large', 'exit_code': 21, 'message': 'rho too large', 'details': {'rho': 0.7}}


def test_argument_errors_are_value_errors():
    with pytest.raises(ValueError):
        raise ParameterDomainError('t out of range')


def test_iteration_error_keeps_record():
    record = object()
    err = IterationError('stalled', {'residual': 1e-3}, record=record)
    assert err.record is record
    assert err.details['residual'] == 1e-3
