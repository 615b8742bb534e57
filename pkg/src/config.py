import os
from enum import Enum
from pathlib import Path


class BoundKind(Enum):
    """Which closed-form SPIRiT bound feeds the recommended step size"""
    PAPER = "paper"  # literal sum of per-offset norms
    SAFE = "safe"    # 1 + lambda1 * sum of per-offset norms


class SolverConfig:
    """Configuration for the pFISTA iterations

    RECOMMENDED SETTINGS FOR EACH MODEL:

    1. SENSE:
       - LAMBDA_SENSE: 1e-3
       - step size: recommended rule (gamma = 1)

    2. SPIRiT:
       - LAMBDA_SPIRIT: 1e-4, LAMBDA1: 1
       - step size: recommended rule with the safe bound (gamma = 1 / c_safe)
    """

    LAMBDA_SENSE = 1e-3
    LAMBDA_SPIRIT = 1e-4
    LAMBDA1 = 1.0

    MAX_ITERS = 500
    REL_CHANGE_TOL = 0.0  # 0 runs to MAX_ITERS
    RECORD_EVERY = 1

    DIVERGENCE_FACTOR = 1e6  # iterate norm above this multiple of the initial norm aborts the run
    BOUND = BoundKind.SAFE


class SamplingConfig:
    """Configuration for Cartesian undersampling masks"""

    RATE = 0.34
    ACS_LINES = 12  # leaves 10 random columns at RATE on a 64-column grid
    DENSITY = "uniform-random"  # or "variable-density-gaussian"
    GAUSSIAN_WIDTH = 0.25  # std of the column pdf as a fraction of cols
    SEED = 0


class FrameConfig:
    """Configuration for the shift-invariant wavelet frame"""

    FILTER_FAMILY = "db4"
    LEVELS = 4
    EXEMPT_SCALING_BAND = False


class StepSizeConfig:
    """Configuration for step-size strategies"""

    POWER_ITERS = 100
    POWER_TOL = 1e-4
    POWER_SEED = 1234  # start vector seed
    ZERO_OPERATOR_EPS = 1e-14

    BT_ETA = 2.0
    BT_GAMMA_INIT = 1.0
    BT_UNDERFLOW = 1e-12  # relative to gamma_init


class SpiritConfig:
    """Configuration for SPIRiT calibration"""

    KERNEL_SIZE = 5
    TIKHONOV_SCALE = 1e-6  # ridge = scale * ||A||_F^2 / columns when not given explicitly


class PhantomConfig:
    """Configuration for synthetic multi-coil data"""

    KIND = "shepp-logan"
    ROWS = 64
    COLS = 64
    COILS = 4
    NOISE_STD = 0.0
    SEED = 0


class SystemConfig:
    """General system configuration"""

    # Get project root (parent of src directory)
    _PROJECT_ROOT = Path(__file__).parent.parent

    OUTPUT_DIR = str(_PROJECT_ROOT / "runs")
    ENV_FILE = str(_PROJECT_ROOT / ".env")

    # Logging
    LOG_LEVEL = "INFO"  # PFISTA_LOG_LEVEL overrides at startup
    LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Progress tracking
    PROGRESS_LOG_EVERY = 50  # solver iterations between progress log lines

    # Parallel sweep runs (PFISTA_NO_PARALLEL=1 forces 1)
    PARALLEL_WORKERS = 4

    # Dense verification is only attempted up to this many unknowns
    DENSE_VERIFY_MAX_UNKNOWNS = 8 * 8 * 4


# Convenience functions to get configurations
def get_solver_config() -> SolverConfig:
    """Get solver configuration"""
    return SolverConfig()

def get_sampling_config() -> SamplingConfig:
    """Get sampling configuration"""
    return SamplingConfig()

def get_frame_config() -> FrameConfig:
    """Get frame configuration"""
    return FrameConfig()

def get_stepsize_config() -> StepSizeConfig:
    """Get step-size configuration"""
    return StepSizeConfig()

def get_spirit_config() -> SpiritConfig:
    """Get SPIRiT calibration configuration"""
    return SpiritConfig()

def get_phantom_config() -> PhantomConfig:
    """Get phantom configuration"""
    return PhantomConfig()

def get_system_config() -> SystemConfig:
    """Get system configuration"""
    return SystemConfig()


def parallel_disabled() -> bool:
    """True when PFISTA_NO_PARALLEL=1 is set in the environment"""
    return os.getenv("PFISTA_NO_PARALLEL", "0").strip() == "1"
