"""spikesearch: differentiable architecture and temporal-parameter search
for spiking neural networks, on a small deterministic numpy autodiff core.

Subpackages are imported lazily by the CLI; library users typically want:

    from spikesearch import tensorgrad as tg
    from spikesearch.surrogate import SurrogateSpec
    from spikesearch.neurons import NeuronSpec, unroll
"""

__version__ = "0.1.0"

__all__ = [
    "tensorgrad",
    "surrogate",
    "neurons",
    "network",
    "optim",
    "search",
    "energy",
    "stereohead",
    "harness",
]
