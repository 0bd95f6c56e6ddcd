"""meqc: compile annotated matrix equations to dense linear-algebra kernel calls."""

from .ir import EquationSet, Expression, Kind, OperandInfo, Prop, normalize
from .search import Algorithm, SearchConfig, generate

__version__ = "0.1.0"

__all__ = [
    "Algorithm",
    "EquationSet",
    "Expression",
    "Kind",
    "OperandInfo",
    "Prop",
    "SearchConfig",
    "generate",
    "normalize",
]
