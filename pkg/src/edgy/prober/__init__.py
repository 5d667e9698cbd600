from .adapter import AdapterProber, ProbeBudgetExceeded, adapter_read_results, adapter_write_targets
from .base import ProbeBatch, Prober, ProberError, ProberUnavailable
from .sim import SimNetwork, SimSpecError, build_sim_network

__all__ = [
    "AdapterProber",
    "ProbeBudgetExceeded",
    "adapter_read_results",
    "adapter_write_targets",
    "ProbeBatch",
    "Prober",
    "ProberError",
    "ProberUnavailable",
    "SimNetwork",
    "SimSpecError",
    "build_sim_network",
]
