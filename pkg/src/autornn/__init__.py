"""Desk-scale recurrent-cell architecture search for caption generation."""
from .activations import ActivationKind
from .controller import Controller, SampleTrace
from .genotype import CellGenotype, MacroConfig, NodeSemantics
from .numkernel import Adam, Rng, Tape
from .search import SearchConfig, derive, evaluate_child, run_search
from .supernet import ChildModel, SharedParamBank, child_extract, init_bank

__version__ = "0.1.0"
__all__ = [
    "ActivationKind", "Adam", "CellGenotype", "ChildModel", "Controller", "MacroConfig",
    "NodeSemantics", "Rng", "SampleTrace", "SearchConfig", "SharedParamBank", "Tape",
    "child_extract", "derive", "evaluate_child", "init_bank", "run_search",
]
