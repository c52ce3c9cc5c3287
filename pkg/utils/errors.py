"""Errors with stable codes and process exit codes"""
from typing import Any, Dict, Optional


class NodalGlueError(Exception):
    """Base class for all library errors"""
    code = 'nodalglue_error'
    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = dict(details or {})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': self.code,
            'exit_code': self.exit_code,
            'message': self.message,
            'details': self.details,
        }


class ParameterDomainError(NodalGlueError, ValueError):
    code = 'parameter_domain'
    exit_code = 10


class GridSizeError(NodalGlueError, ValueError):
    code = 'grid_size'
    exit_code = 11


class ParameterError(NodalGlueError, ValueError):
    code = 'parameter'
    exit_code = 12


class SingularPointError(NodalGlueError, ValueError):
    code = 'singular_point'
    exit_code = 13


class ShapeError(NodalGlueError, ValueError):
    code = 'shape'
    exit_code = 14


class InputError(NodalGlueError, ValueError):
    code = 'input'
    exit_code = 15


class ConfigurationError(NodalGlueError):
    code = 'configuration'
    exit_code = 16


class ThresholdError(NodalGlueError):
    """Contraction threshold violated; details carry the measured factor"""
    code = 'threshold'
    exit_code = 20


class TooLargeTError(NodalGlueError):
    """Gluing parameter outside the measured convergence regime"""
    code = 't_too_large'
    exit_code = 21


class IterationError(NodalGlueError):
    """Iteration failed to converge; the partial record is attached"""
    code = 'iteration'
    exit_code = 22

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None, record: Any = None):
        super().__init__(message, details)
        self.record = record


class RankError(NodalGlueError):
    code = 'rank'
    exit_code = 23


class ResolutionError(NodalGlueError, ValueError):
    code = 'resolution'
    exit_code = 24


class ConsistencyError(NodalGlueError, ValueError):
    code = 'consistency'
    exit_code = 30


class ParityError(NodalGlueError, ValueError):
    code = 'parity'
    exit_code = 31


class ValidationError(NodalGlueError, ValueError):
    code = 'validation'
    exit_code = 40


class ArtifactIOError(NodalGlueError):
    code = 'artifact_io'
    exit_code = 41
