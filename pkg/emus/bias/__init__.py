from emus.bias.families import (
    BiasSet, IndicatorGrid, TailFamily, BilinearGrid, ComposedBias,
    evaluate_all, make_tail_family, compose_with_cv, bias_from_descriptor,
)
from emus.bias.support import (
    SupportGraph, Irreducible, ReducibleWitness,
    support_graph, overlap_fractions, check_irreducibility,
)
from emus.bias.cv import register_cv, get_cv

__all__ = [
    "BiasSet",
    "IndicatorGrid",
    "TailFamily",
    "BilinearGrid",
    "ComposedBias",
    "evaluate_all",
    "make_tail_family",
    "compose_with_cv",
    "bias_from_descriptor",
    "SupportGraph",
    "Irreducible",
    "ReducibleWitness",
    "support_graph",
    "overlap_fractions",
    "check_irreducibility",
    "register_cv",
    "get_cv",
]
