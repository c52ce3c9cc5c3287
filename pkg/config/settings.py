import os
from dotenv import load_dotenv

load_dotenv()


class Config:
    """Application configuration"""
    # Parallelism and artifacts
    THREADS = int(os.getenv('NODALGLUE_THREADS', 4))
    OUTPUT_DIR = os.getenv('NODALGLUE_OUTPUT_DIR', 'artifacts')
    LOG_LEVEL = os.getenv('NODALGLUE_LOG_LEVEL', 'INFO')

    # Geometry
    R_MIN = float(os.getenv('NODALGLUE_R_MIN', 1e-6))
    METRIC = os.getenv('NODALGLUE_METRIC', 'induced')
    CUTOFF_EXPONENT = float(os.getenv('NODALGLUE_CUTOFF_EXPONENT', 0.25))

    # Solver tolerances
    RANK_RTOL = float(os.getenv('NODALGLUE_RANK_RTOL', 1e-8))
    RESOLVENT_TOL = float(os.getenv('NODALGLUE_RESOLVENT_TOL', 1e-10))
    NEUMANN_TOL = float(os.getenv('NODALGLUE_NEUMANN_TOL', 1e-10))
    NEWTON_TOL = float(os.getenv('NODALGLUE_NEWTON_TOL', 1e-11))
    MAX_ITER = int(os.getenv('NODALGLUE_MAX_ITER', 60))

    # Randomized estimates
    NORM_TRIALS = int(os.getenv('NODALGLUE_NORM_TRIALS', 20))
    SEED = int(os.getenv('NODALGLUE_SEED', 0))

    @staticmethod
    def ensure_directories(path=None):
        """Create the artifact directory"""
        target = path or Config.OUTPUT_DIR
        os.makedirs(target, exist_ok=True)
        return target
