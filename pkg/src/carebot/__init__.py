"""carebot: bilingual retrieval-based health-assistance chatbot engine."""

from .engine import Engine, EngineConfig, ScenarioScript, run_scenario
from .nlg import ResponsePayload
from .text import Lang

__version__ = "0.1.0"

__all__ = [
    "Engine",
    "EngineConfig",
    "Lang",
    "ResponsePayload",
    "ScenarioScript",
    "run_scenario",
    "__version__",
]
