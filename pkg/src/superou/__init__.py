"""Super Ornstein-Uhlenbeck processes: spectral oracles, branching
mechanisms, mass-eps particle engines and central-limit verdicts."""

__version__ = "0.1.0"

from .spectral import MultiIndex, OUParams, SpectralFunction
from .branching import BranchingMechanism, derive, discretize
from .moments import AtomicMeasure, Law, Regime, limit_constants, mean_functional, variance_functional
from .engine import simulate_backbone, simulate_direct
from .harness import ExperimentSpec, crosscheck, run_ensemble, verify

__all__ = [
    "AtomicMeasure", "BranchingMechanism", "ExperimentSpec", "Law", "MultiIndex", "OUParams", "Regime",
    "SpectralFunction", "crosscheck", "derive", "discretize", "limit_constants", "mean_functional",
    "run_ensemble", "simulate_backbone", "simulate_direct", "variance_functional", "verify", "__version__",
]
