"""Supernets, genotypes, and fixed retrain networks.

Two search spaces are provided on top of the layer primitives:

* a cell space -- small DAGs whose edges carry a mixture of candidate
  operations (3x3 conv with a b=3 surrogate, 3x3 conv with a b=5
  surrogate, skip), mixed either at the membrane (candidate currents are
  softmax-combined, one spiking activation per node) or at the spike
  activation (each conv candidate spikes through its own surrogate and
  the spike trains are combined);
* a layer trellis for dense prediction -- a grid of (layer, level)
  positions over spatial levels with downsampling rates {3,2,2,2},
  connected by stay/up/down transitions carrying softmaxed beta weights.

``decode`` collapses a supernet to a :class:`Genotype` (argmax op per
edge, the two strongest afferent edges per node, maximum-probability
level path); ``instantiate`` builds the fixed network back from a
genotype, copying supernet weights when the channel multiplier is 1.

All architecture/control weights are initialized to ``EPS_ARCH`` and are
meant to be optimized without weight decay, so a zero gradient leaves
them exactly at initialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorgrad as tg
from .neurons import KINDS, NeuronSpec, NeuronState, init_state
from .neurons import step as neuron_step
from .surrogate import SurrogateSpec
from .tensorgrad import Tensor

OPS = ("conv3x3_sg_b3", "conv3x3_sg_b5", "skip")
OP_TEMPERATURE = {"conv3x3_sg_b3": 3.0, "conv3x3_sg_b5": 5.0}

# Initial value for every architecture / control weight (alpha, beta, a).
EPS_ARCH = 1e-3

# Energy factor per unit kind: spiking units are AC-dominated, the ReLU
# unit costs a MAC per operation (4.6 pJ / 1.08 pJ = 4.26 at fr=0.2, T=6).
KIND_RHO = {"if": 1.0, "lif": 1.0, "alif": 1.0, "plif": 1.0, "relu": 4.26}


def kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class GenotypeError(ValueError):
    """Genotype is malformed or inconsistent with the network config."""


# ---------------------------------------------------------------------------
# layer primitives


class BatchNorm:
    """Per-channel standardization with running statistics.

    Training mode normalizes by batch statistics over (N, H, W) and updates
    the running buffers; eval mode uses the running buffers. Folding into
    conv weights is deliberately not provided.
    """

    def __init__(self, channels: int, name: str, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.training = True

    def __call__(self, x: Tensor) -> Tensor:
        c = x.data.shape[1]
        if self.training:
            mu = tg.tmean(x, axis=(0, 2, 3), keepdims=True)
            var = tg.tmean(tg.power(x - mu, 2.0), axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.data.reshape(c)
            self.running_var = (1 - m) * self.running_var + m * var.data.reshape(c)
        else:
            mu = Tensor(self.running_mean.reshape(1, c, 1, 1))
            var = Tensor(self.running_var.reshape(1, c, 1, 1))
        xhat = (x - mu) / tg.sqrt(var + self.eps)
        g = tg.reshape(self.gamma, (1, c, 1, 1))
        b = tg.reshape(self.beta, (1, c, 1, 1))
        return xhat * g + b

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class TemporalMixture:
    """Per-layer mixture of candidate neuron dynamics under control weights.

    Each candidate runs its own membrane state from the shared input
    current; the layer output is softmax(a)-weighted over the candidate
    spike trains. This is the search-time construct behind both the
    temporal-parameter and the hybrid-unit searches.
    """

    def __init__(self, candidates: list[NeuronSpec], name: str = "mix"):
        if not candidates:
            raise ValueError("temporal mixture needs at least one candidate")
        self.candidates = list(candidates)
        self.a = Tensor(np.full(len(candidates), EPS_ARCH), requires_grad=True, name=f"{name}.a")
        self.states: list[NeuronState] | None = None

    def reset_control(self):
        self.a.data[...] = EPS_ARCH
        self.a.zero_grad()

    def begin_sequence(self):
        self.states = None

    def step(self, current: Tensor) -> Tensor:
        if self.states is None:
            self.states = [init_state(spec, current.data.shape) for spec in self.candidates]
        outs = []
        for k, spec in enumerate(self.candidates):
            y, self.states[k] = neuron_step(spec, self.states[k], current)
            outs.append(y)
        if len(outs) == 1:
            return outs[0]
        return tg.softmax_mix(self.a, outs)

    def weights(self) -> np.ndarray:
        e = np.exp(self.a.data - self.a.data.max())
        return e / e.sum()

    def rho(self) -> np.ndarray:
        return np.array([KIND_RHO[spec.kind] for spec in self.candidates])


class SpikingConv:
    """Conv (bias-free) -> optional BatchNorm -> spiking neuron.

    The neuron spec is a mutable attribute so surrogate search can swap the
    site's surrogate in place; a :class:`TemporalMixture` can be attached to
    replace the single neuron during temporal/hybrid search.
    """

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        kernel: int = 3,
        stride: int = 1,
        padding: int = 1,
        neuron: NeuronSpec | None = None,
        norm: bool = False,
        trainable: bool = True,
    ):
        self.name = name
        self.site = name
        self.trainable = trainable
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.w = Tensor(
            kaiming(rng, (out_channels, in_channels, kernel, kernel), fan_in),
            requires_grad=True,
            name=f"{name}.w",
        )
        self.neuron_spec = neuron if neuron is not None else NeuronSpec()
        self.norm = BatchNorm(out_channels, name=name) if norm else None
        self.mixture: TemporalMixture | None = None
        # Surrogate search hook: (control weights, candidate kernels). When
        # set, the layer current is the softmax-weighted mix of the currents
        # each candidate kernel would produce.
        self.kernel_mix: tuple[Tensor, list[Tensor]] | None = None
        self._state: NeuronState | None = None
        self._rate_sum = 0.0
        self._rate_n = 0

    def begin_sequence(self):
        self._state = None
        if self.mixture is not None:
            self.mixture.begin_sequence()

    def step(self, x: Tensor) -> Tensor:
        if self.kernel_mix is not None:
            alpha, kernels = self.kernel_mix
            currents = [
                tg.conv2d(x, wk, stride=self.stride, padding=self.padding) for wk in kernels
            ]
            current = tg.softmax_mix(alpha, currents)
        else:
            current = tg.conv2d(x, self.w, stride=self.stride, padding=self.padding)
        if self.norm is not None:
            current = self.norm(current)
        if self.mixture is not None:
            y = self.mixture.step(current)
        else:
            if self._state is None:
                self._state = init_state(self.neuron_spec, current.data.shape)
            y, self._state = neuron_step(self.neuron_spec, self._state, current)
        self._rate_sum += float(y.data.mean())
        self._rate_n += 1
        return y

    def parameters(self) -> list[Tensor]:
        if not self.trainable:
            return []
        ps = [self.w]
        if self.norm is not None:
            ps.extend(self.norm.parameters())
        return ps

    def arch_parameters(self) -> list[Tensor]:
        return [self.mixture.a] if self.mixture is not None else []

    def reset_rate(self):
        self._rate_sum = 0.0
        self._rate_n = 0

    def firing_rate(self) -> float:
        return self._rate_sum / self._rate_n if self._rate_n else 0.0

    def count_ops(self, in_hw: tuple[int, int]) -> tuple[float, tuple[int, int]]:
        """Synaptic operation count A and the output spatial shape."""
        h, w = in_hw
        oh = (h + 2 * self.padding - self.kernel) // self.stride + 1
        ow = (w + 2 * self.padding - self.kernel) // self.stride + 1
        fan_in = self.in_channels * self.kernel * self.kernel
        return float(self.out_channels * oh * ow * fan_in), (oh, ow)

    def is_spiking(self) -> bool:
        if self.mixture is not None:
            return all(spec.kind != "relu" for spec in self.mixture.candidates)
        return self.neuron_spec.kind != "relu"


class Linear:
    """Affine map on (N, F) feature matrices."""

    def __init__(self, name: str, in_features: int, out_features: int, rng: np.random.Generator):
        self.name = name
        self.trainable = True
        self.w = Tensor(
            kaiming(rng, (in_features, out_features), in_features),
            requires_grad=True,
            name=f"{name}.w",
        )
        self.b = Tensor(np.zeros(out_features), requires_grad=True, name=f"{name}.b")

    def __call__(self, x: Tensor) -> Tensor:
        return tg.matmul(x, self.w) + self.b

    def parameters(self) -> list[Tensor]:
        return [self.w, self.b] if self.trainable else []

    def count_ops(self, in_features: int) -> float:
        return float(in_features * self.w.data.shape[1])


class SpikingStack:
    """Sequential stack of stateful layers stepped over time."""

    def __init__(self, layers: list[SpikingConv]):
        self.layers = layers

    def begin_sequence(self):
        for layer in self.layers:
            layer.begin_sequence()

    def step(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.step(x)
        return x

    def forward_sequence(self, inputs: list[Tensor]) -> list[Tensor]:
        self.begin_sequence()
        return [self.step(x) for x in inputs]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def arch_parameters(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.arch_parameters()]

    def sites(self) -> dict[str, SpikingConv]:
        return {layer.site: layer for layer in self.layers}

    def reset_rates(self):
        for layer in self.layers:
            layer.reset_rate()

    def firing_rates(self) -> dict[str, float]:
        return {layer.site: layer.firing_rate() for layer in self.layers}


class StackClassifier:
    """Spiking stack + global-average-pooled linear readout over time."""

    def __init__(self, layers: list[SpikingConv], num_classes: int, rng: np.random.Generator):
        self.stack = SpikingStack(layers)
        self.head = Linear("head", layers[-1].out_channels, num_classes, rng)

    def forward_sequence(self, inputs: list[Tensor]) -> Tensor:
        self.stack.begin_sequence()
        logits = None
        for x in inputs:
            y = self.stack.step(x)
            out = self.head(tg.tmean(y, axis=(2, 3)))
            logits = out if logits is None else logits + out
        return logits * (1.0 / len(inputs))

    def parameters(self) -> list[Tensor]:
        return self.stack.parameters() + self.head.parameters()

    def arch_parameters(self) -> list[Tensor]:
        return self.stack.arch_parameters()

    def sites(self) -> dict[str, SpikingConv]:
        return self.stack.sites()

    def reset_rates(self):
        self.stack.reset_rates()

    def firing_rates(self) -> dict[str, float]:
        return self.stack.firing_rates()


# ---------------------------------------------------------------------------
# mixed cells


class CandidateOp:
    """One candidate operation on a cell edge.

    Conv candidates own a 3x3 kernel (and, under spike mixing, their own
    neuron with the op's surrogate temperature). Skip is the identity,
    falling back to a strided 1x1 projection only when shapes differ.
    """

    def __init__(
        self,
        op_kind: str,
        name: str,
        in_channels: int,
        out_channels: int,
        stride: int,
        rng: np.random.Generator,
        node_neuron: NeuronSpec,
        mixing: str,
    ):
        if op_kind not in OPS:
            raise GenotypeError(f"unknown op kind {op_kind!r}; expected one of {OPS}")
        self.op_kind = op_kind
        self.name = name
        self.stride = stride
        self.mixing = mixing
        self.w: Tensor | None = None
        self.neuron_spec: NeuronSpec | None = None
        self._state: NeuronState | None = None
        if op_kind == "skip":
            if stride != 1 or in_channels != out_channels:
                self.w = Tensor(
                    kaiming(rng, (out_channels, in_channels, 1, 1), in_channels),
                    requires_grad=True,
                    name=f"{name}.proj",
                )
        else:
            fan_in = in_channels * 9
            self.w = Tensor(
                kaiming(rng, (out_channels, in_channels, 3, 3), fan_in),
                requires_grad=True,
                name=f"{name}.w",
            )
            if mixing == "spike":
                sg = replace(node_neuron.surrogate, temperature=OP_TEMPERATURE[op_kind])
                self.neuron_spec = replace(node_neuron, surrogate=sg)

    def begin_sequence(self):
        self._state = None

    def current(self, x: Tensor) -> Tensor:
        """Pre-activation contribution of this op."""
        if self.op_kind == "skip":
            if self.w is None:
                return x
            return tg.conv2d(x, self.w, stride=self.stride, padding=0)
        return tg.conv2d(x, self.w, stride=self.stride, padding=1)

    def output(self, x: Tensor) -> Tensor:
        """Post-activation contribution (spike mixing only)."""
        i = self.current(x)
        if self.neuron_spec is None:
            return i  # skip passes spikes through unchanged
        if self._state is None:
            self._state = init_state(self.neuron_spec, i.data.shape)
        y, self._state = neuron_step(self.neuron_spec, self._state, i)
        return y

    def parameters(self) -> list[Tensor]:
        return [self.w] if self.w is not None else []


class MixedEdge:
    """All candidate ops on one edge, combined under softmaxed alphas."""

    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        stride: int,
        rng: np.random.Generator,
        node_neuron: NeuronSpec,
        mixing: str,
        alpha: Tensor,
    ):
        self.name = name
        self.alpha = alpha
        self.mixing = mixing
        self.ops = [
            CandidateOp(
                kind, f"{name}.{kind}", in_channels, out_channels, stride, rng, node_neuron, mixing
            )
            for kind in OPS
        ]

    def begin_sequence(self):
        for op in self.ops:
            op.begin_sequence()

    def step(self, x: Tensor) -> Tensor:
        if self.mixing == "membrane":
            items = [op.current(x) for op in self.ops]
        else:
            items = [op.output(x) for op in self.ops]
        return tg.softmax_mix(self.alpha, items)

    def parameters(self) -> list[Tensor]:
        return [p for op in self.ops for p in op.parameters()]


def cell_edge_index(num_nodes: int) -> list[tuple[int, int]]:
    """Canonical (input, node) ordering of cell edges.

    Inputs 0 and 1 are the two previous cells; input k+2 is intermediate
    node k. Edges are grouped per node, ordered by input index.
    """
    return [(i, j) for j in range(num_nodes) for i in range(2 + j)]


def _align_spatial(s0: Tensor, s1: Tensor) -> Tensor:
    """Subsample s0 until it matches s1's resolution.

    After a reduction cell the skip-back input lags one halving behind;
    strided subsampling closes the gap without touching spike values.
    """
    while s0.data.shape[2] > s1.data.shape[2]:
        s0 = tg.subsample(s0, 2)
    return s0


class MixedCell:
    """DAG cell: every node spikes on the sum of its mixed incoming edges.

    ``alphas`` (one (num_ops,) tensor per edge) are usually shared across
    cells of the same type; weights are per-cell.
    """

    def __init__(
        self,
        name: str,
        num_nodes: int,
        in0_channels: int,
        in1_channels: int,
        channels: int,
        reduction: bool,
        rng: np.random.Generator,
        alphas: list[Tensor],
        neuron: NeuronSpec,
        mixing: str = "membrane",
    ):
        if mixing not in ("membrane", "spike"):
            raise ValueError(f"mixing must be 'membrane' or 'spike', got {mixing!r}")
        edges = cell_edge_index(num_nodes)
        if len(alphas) != len(edges):
            raise GenotypeError(f"expected {len(edges)} alpha tensors, got {len(alphas)}")
        self.name = name
        self.num_nodes = num_nodes
        self.channels = channels
        self.mixing = mixing
        self.neuron_spec = neuron
        self.edges: list[MixedEdge] = []
        for e, (i, j) in enumerate(edges):
            in_ch = in0_channels if i == 0 else in1_channels if i == 1 else channels
            stride = 2 if (reduction and i < 2) else 1
            self.edges.append(
                MixedEdge(
                    f"{name}.e{e}", in_ch, channels, stride, rng, neuron, mixing, alphas[e]
                )
            )
        self.node_specs = [replace(neuron) for _ in range(num_nodes)]
        self._node_states: list[NeuronState | None] = [None] * num_nodes
        self._rate_sums = [0.0] * num_nodes
        self._rate_n = 0

    def begin_sequence(self):
        self._node_states = [None] * self.num_nodes
        for edge in self.edges:
            edge.begin_sequence()

    def step(self, s0: Tensor, s1: Tensor) -> Tensor:
        s0 = _align_spatial(s0, s1)
        states = [s0, s1]
        edges = cell_edge_index(self.num_nodes)
        outputs = []
        for j in range(self.num_nodes):
            total = None
            for e, (i, jj) in enumerate(edges):
                if jj != j:
                    continue
                contrib = self.edges[e].step(states[i])
                total = contrib if total is None else total + contrib
            if self._node_states[j] is None:
                self._node_states[j] = init_state(self.node_specs[j], total.data.shape)
            y, self._node_states[j] = neuron_step(self.node_specs[j], self._node_states[j], total)
            self._rate_sums[j] += float(y.data.mean())
            states.append(y)
            outputs.append(y)
        self._rate_n += 1
        return outputs[0] if self.num_nodes == 1 else tg.concat(outputs, axis=1)

    def reset_rates(self):
        self._rate_sums = [0.0] * self.num_nodes
        self._rate_n = 0

    def firing_rates(self) -> dict[str, float]:
        n = self._rate_n
        return {
            f"{self.name}.n{j}": (self._rate_sums[j] / n if n else 0.0)
            for j in range(self.num_nodes)
        }

    def out_channels(self) -> int:
        return self.channels * self.num_nodes

    def parameters(self) -> list[Tensor]:
        return [p for edge in self.edges for p in edge.parameters()]

    def spike_site_count(self) -> int:
        """Structural activation count: nodes, plus conv candidates when
        mixing at the spike activation."""
        count = self.num_nodes
        if self.mixing == "spike":
            count += sum(1 for e in self.edges for op in e.ops if op.neuron_spec is not None)
        return count

    def sites(self) -> dict[str, "MixedCell._NodeSite"]:
        return {f"{self.name}.n{j}": MixedCell._NodeSite(self, j) for j in range(self.num_nodes)}

    class _NodeSite:
        """Adapter giving node neurons the same spec-swap surface as layers."""

        def __init__(self, cell: "MixedCell", node: int):
            self._cell = cell
            self._node = node

        @property
        def neuron_spec(self) -> NeuronSpec:
            return self._cell.node_specs[self._node]

        @neuron_spec.setter
        def neuron_spec(self, spec: NeuronSpec):
            self._cell.node_specs[self._node] = spec


class FixedCell:
    """Cell instantiated from a genotype: 2 chosen edges per node."""

    def __init__(
        self,
        name: str,
        node_edges: list[list[tuple[str, int]]],
        in0_channels: int,
        in1_channels: int,
        channels: int,
        reduction: bool,
        rng: np.random.Generator,
        neuron: NeuronSpec,
    ):
        self.name = name
        self.num_nodes = len(node_edges)
        self.channels = channels
        self.node_edges = [list(edges) for edges in node_edges]
        self.ops: list[list[CandidateOp]] = []
        for j, edges in enumerate(node_edges):
            if len(edges) != 2:
                raise GenotypeError(f"node {j} of {name} must keep exactly 2 edges, got {len(edges)}")
            row = []
            for op_kind, i in edges:
                if not 0 <= i < 2 + j:
                    raise GenotypeError(f"node {j} of {name}: input index {i} out of range")
                in_ch = in0_channels if i == 0 else in1_channels if i == 1 else channels
                stride = 2 if (reduction and i < 2) else 1
                row.append(
                    CandidateOp(
                        op_kind, f"{name}.n{j}.i{i}", in_ch, channels, stride, rng, neuron, "membrane"
                    )
                )
            self.ops.append(row)
        self.node_specs = [replace(neuron) for _ in range(self.num_nodes)]
        self._node_states: list[NeuronState | None] = [None] * self.num_nodes
        self._rate_sums = np.zeros(self.num_nodes)
        self._rate_n = 0

    def begin_sequence(self):
        self._node_states = [None] * self.num_nodes

    def step(self, s0: Tensor, s1: Tensor) -> Tensor:
        s0 = _align_spatial(s0, s1)
        states = [s0, s1]
        outputs = []
        for j in range(self.num_nodes):
            total = None
            for op, (_, i) in zip(self.ops[j], self.node_edges[j]):
                contrib = op.current(states[i])
                total = contrib if total is None else total + contrib
            if self._node_states[j] is None:
                self._node_states[j] = init_state(self.node_specs[j], total.data.shape)
            y, self._node_states[j] = neuron_step(self.node_specs[j], self._node_states[j], total)
            self._rate_sums[j] += float(y.data.mean())
            states.append(y)
            outputs.append(y)
        self._rate_n += 1
        return outputs[0] if self.num_nodes == 1 else tg.concat(outputs, axis=1)

    def out_channels(self) -> int:
        return self.channels * self.num_nodes

    def parameters(self) -> list[Tensor]:
        return [p for row in self.ops for op in row for p in op.parameters()]

    def reset_rate(self):
        self._rate_sums[...] = 0.0
        self._rate_n = 0

    def node_rates(self) -> np.ndarray:
        return self._rate_sums / self._rate_n if self._rate_n else np.zeros(self.num_nodes)


# ---------------------------------------------------------------------------
# genotypes


@dataclass(frozen=True)
class Genotype:
    """Decoded architecture: per cell type, per node, 2 (op, input) edges;
    optionally a trellis level path."""

    cells: dict[str, tuple[tuple[tuple[str, int], ...], ...]]
    path: tuple[int, ...] | None = None

    def to_json(self) -> str:
        doc = {
            "cells": {
                kind: [[[op, int(i)] for op, i in node] for node in nodes]
                for kind, nodes in sorted(self.cells.items())
            },
            "path": list(self.path) if self.path is not None else None,
        }
        return json.dumps(doc, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        doc = json.loads(text)
        cells = {}
        for kind, nodes in doc["cells"].items():
            parsed = []
            for node in nodes:
                edges = []
                for op, i in node:
                    if op not in OPS:
                        raise GenotypeError(f"unknown op {op!r} in genotype")
                    edges.append((op, int(i)))
                parsed.append(tuple(edges))
            cells[kind] = tuple(parsed)
        path = doc.get("path")
        return cls(cells=cells, path=tuple(path) if path is not None else None)


def make_alphas(num_nodes: int, name: str) -> list[Tensor]:
    """One (num_ops,) arch tensor per edge, initialized to EPS_ARCH."""
    return [
        Tensor(np.full(len(OPS), EPS_ARCH), requires_grad=True, name=f"{name}.e{e}")
        for e in range(len(cell_edge_index(num_nodes)))
    ]


def softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_cell_alpha(alpha: np.ndarray, num_nodes: int) -> tuple[tuple[tuple[str, int], ...], ...]:
    """Argmax op per edge; keep the 2 strongest afferent edges per node.

    Edge strength is the largest softmaxed alpha on the edge. Ties break
    toward the lower input index (edge choice) and the lower op index
    (op choice); chosen edges are listed by ascending input index.
    """
    edges = cell_edge_index(num_nodes)
    if alpha.shape != (len(edges), len(OPS)):
        raise GenotypeError(f"alpha table must be {(len(edges), len(OPS))}, got {alpha.shape}")
    probs = softmax_rows(alpha)
    strengths = probs.max(axis=1)
    nodes = []
    for j in range(num_nodes):
        rows = [(e, i) for e, (i, jj) in enumerate(edges) if jj == j]
        ranked = sorted(rows, key=lambda r: (-strengths[r[0]], r[1]))
        kept = sorted(ranked[:2], key=lambda r: r[1])
        nodes.append(tuple((OPS[int(np.argmax(alpha[e]))], i) for e, i in kept))
    return tuple(nodes)


def viterbi_path(
    betas: dict[tuple[int, int], np.ndarray], num_layers: int, num_levels: int
) -> tuple[int, ...]:
    """Maximum-probability level path through the trellis.

    ``betas[(i, l)]`` scores the transitions out of level ``l`` at layer
    ``i`` toward ``allowed_transitions(l, num_levels)``; each group is
    softmax-normalized. The path starts at level 0 before layer 0; among
    equally probable paths the lexicographically smallest (lowest level,
    front first) is returned.
    """
    # suffix[i][l]: best log-probability of completing the path from level l
    # after i transitions.
    suffix = [dict() for _ in range(num_layers + 1)]
    suffix[num_layers] = {l: 0.0 for l in range(num_levels)}
    for i in range(num_layers - 1, -1, -1):
        for l in range(min(i, num_levels - 1) + 1):
            opts = allowed_transitions(l, num_levels)
            logp = log_softmax_np(betas[(i, l)])
            suffix[i][l] = max(
                logp[k] + suffix[i + 1][l2] for k, l2 in enumerate(opts)
            )
    path = []
    level = 0
    for i in range(num_layers):
        opts = allowed_transitions(level, num_levels)
        logp = log_softmax_np(betas[(i, level)])
        scores = [logp[k] + suffix[i + 1][l2] for k, l2 in enumerate(opts)]
        best = max(scores)
        # exact-equality tie-break toward the lowest level
        level = next(l2 for s, l2 in zip(scores, opts) if s == best)
        path.append(level)
    return tuple(path)


def allowed_transitions(level: int, num_levels: int) -> list[int]:
    return [l for l in (level - 1, level, level + 1) if 0 <= l < num_levels]


def log_softmax_np(a: np.ndarray) -> np.ndarray:
    z = a - a.max()
    return z - np.log(np.exp(z).sum())


# ---------------------------------------------------------------------------
# classification supernet


@dataclass(frozen=True)
class SupernetConfig:
    in_channels: int = 1
    stem_channels: int = 4
    num_cells: int = 2
    num_nodes: int = 1
    num_classes: int = 2
    timesteps: int = 4
    mixing: str = "membrane"
    aux: bool = False
    aux_weight: float = 0.4
    norm: bool = False
    neuron: NeuronSpec = field(default_factory=NeuronSpec)

    def __post_init__(self):
        if self.num_cells < 1:
            raise ValueError("need at least one cell")
        if self.num_nodes < 1:
            raise ValueError("need at least one node per cell")
        if self.mixing not in ("membrane", "spike"):
            raise ValueError(f"mixing must be 'membrane' or 'spike', got {self.mixing!r}")

    def reduction_indices(self) -> tuple[int, ...]:
        if self.num_cells < 3:
            return ()
        return (self.num_cells // 3, (2 * self.num_cells) // 3)


class ClassificationSupernet:
    """Stem -> fixed-layout cell stack -> global pool -> linear head.

    Normal and reduction cells are searched separately (two alpha tables
    shared across cells of the same type); reduction cells double the
    channel count and halve the spatial size at the fixed 1/3 and 2/3
    positions. Per-timestep logits are averaged over the sequence.
    """

    def __init__(self, config: SupernetConfig, rng: np.random.Generator):
        self.config = config
        c = config.stem_channels
        self.stem = SpikingConv(
            "s1", config.in_channels, c, rng, neuron=config.neuron, norm=config.norm
        )
        self.alphas_normal = make_alphas(config.num_nodes, "alpha.normal")
        reductions = config.reduction_indices()
        self.alphas_reduce = make_alphas(config.num_nodes, "alpha.reduce") if reductions else []
        self.cells: list[MixedCell] = []
        self.cell_is_reduction: list[bool] = []
        ch_prev_prev, ch_prev, ch = c, c, c
        for k in range(config.num_cells):
            reduction = k in reductions
            if reduction:
                ch *= 2
            alphas = self.alphas_reduce if reduction else self.alphas_normal
            cell = MixedCell(
                f"c{k}",
                config.num_nodes,
                ch_prev_prev,
                ch_prev,
                ch,
                reduction,
                rng,
                alphas,
                config.neuron,
                config.mixing,
            )
            self.cells.append(cell)
            self.cell_is_reduction.append(reduction)
            ch_prev_prev, ch_prev = ch_prev, cell.out_channels()
        self.classifier = Linear("classifier", ch_prev, config.num_classes, rng)
        self.aux_head: Linear | None = None
        self.aux_cell_index = None
        if config.aux and reductions:
            self.aux_cell_index = reductions[-1]
            aux_ch = self.cells[self.aux_cell_index].out_channels()
            self.aux_head = Linear("aux", aux_ch, config.num_classes, rng)

    def begin_sequence(self):
        self.stem.begin_sequence()
        for cell in self.cells:
            cell.begin_sequence()

    def forward_sequence(self, inputs: list[Tensor]) -> tuple[Tensor, Tensor | None]:
        """Returns (mean logits, mean aux logits or None) over timesteps."""
        self.begin_sequence()
        logits_sum = None
        aux_sum = None
        for x in inputs:
            s0 = s1 = self.stem.step(x)
            aux_feat = None
            for k, cell in enumerate(self.cells):
                s0, s1 = s1, cell.step(s0, s1)
                if k == self.aux_cell_index:
                    aux_feat = s1
            pooled = tg.tmean(s1, axis=(2, 3))
            logits = self.classifier(pooled)
            logits_sum = logits if logits_sum is None else logits_sum + logits
            if self.aux_head is not None and aux_feat is not None:
                aux = self.aux_head(tg.tmean(aux_feat, axis=(2, 3)))
                aux_sum = aux if aux_sum is None else aux_sum + aux
        t = len(inputs)
        logits = logits_sum * (1.0 / t)
        aux_logits = aux_sum * (1.0 / t) if aux_sum is not None else None
        return logits, aux_logits

    def parameters(self) -> list[Tensor]:
        ps = self.stem.parameters()
        for cell in self.cells:
            ps.extend(cell.parameters())
        ps.extend(self.classifier.parameters())
        if self.aux_head is not None:
            ps.extend(self.aux_head.parameters())
        return ps

    def arch_parameters(self) -> list[Tensor]:
        return list(self.alphas_normal) + list(self.alphas_reduce)

    def sites(self) -> dict[str, object]:
        table: dict[str, object] = {"s1": self.stem}
        for cell in self.cells:
            table.update(cell.sites())
        return table

    def reset_rates(self):
        self.stem.reset_rate()
        for cell in self.cells:
            cell.reset_rates()

    def firing_rates(self) -> dict[str, float]:
        rates = {"s1": self.stem.firing_rate()}
        for cell in self.cells:
            rates.update(cell.firing_rates())
        return rates

    def decode(self) -> Genotype:
        cells = {
            "normal": decode_cell_alpha(
                np.stack([a.data for a in self.alphas_normal]), self.config.num_nodes
            )
        }
        if self.alphas_reduce:
            cells["reduce"] = decode_cell_alpha(
                np.stack([a.data for a in self.alphas_reduce]), self.config.num_nodes
            )
        return Genotype(cells=cells, path=None)


class FixedClassificationNet:
    """The retrain network for a classification genotype."""

    def __init__(self, config: SupernetConfig, genotype: Genotype, rng: np.random.Generator):
        if "normal" not in genotype.cells:
            raise GenotypeError("classification genotype needs a 'normal' cell")
        reductions = config.reduction_indices()
        if reductions and "reduce" not in genotype.cells:
            raise GenotypeError("layout has reduction cells but genotype lacks 'reduce'")
        self.config = config
        self.genotype = genotype
        c = config.stem_channels
        self.stem = SpikingConv(
            "s1", config.in_channels, c, rng, neuron=config.neuron, norm=config.norm
        )
        self.cells: list[FixedCell] = []
        ch_prev_prev, ch_prev, ch = c, c, c
        for k in range(config.num_cells):
            reduction = k in reductions
            if reduction:
                ch *= 2
            node_edges = genotype.cells["reduce" if reduction else "normal"]
            cell = FixedCell(
                f"c{k}",
                [list(n) for n in node_edges],
                ch_prev_prev,
                ch_prev,
                ch,
                reduction,
                rng,
                config.neuron,
            )
            self.cells.append(cell)
            ch_prev_prev, ch_prev = ch_prev, cell.out_channels()
        self.classifier = Linear("classifier", ch_prev, config.num_classes, rng)

    def begin_sequence(self):
        self.stem.begin_sequence()
        for cell in self.cells:
            cell.begin_sequence()

    def forward_sequence(self, inputs: list[Tensor]) -> Tensor:
        self.begin_sequence()
        logits_sum = None
        for x in inputs:
            s0 = s1 = self.stem.step(x)
            for cell in self.cells:
                s0, s1 = s1, cell.step(s0, s1)
            logits = self.classifier(tg.tmean(s1, axis=(2, 3)))
            logits_sum = logits if logits_sum is None else logits_sum + logits
        return logits_sum * (1.0 / len(inputs))

    def parameters(self) -> list[Tensor]:
        ps = self.stem.parameters()
        for cell in self.cells:
            ps.extend(cell.parameters())
        ps.extend(self.classifier.parameters())
        return ps

    def arch_parameters(self) -> list[Tensor]:
        return []

    def reset_rates(self):
        self.stem.reset_rate()
        for cell in self.cells:
            cell.reset_rate()

    def firing_rates(self) -> dict[str, float]:
        rates = {"s1": self.stem.firing_rate()}
        for cell in self.cells:
            for j, r in enumerate(cell.node_rates()):
                rates[f"{cell.name}.n{j}"] = float(r)
        return rates


def instantiate(
    supernet: ClassificationSupernet, genotype: Genotype, channel_multiplier: int = 1,
    rng: np.random.Generator | None = None,
) -> FixedClassificationNet:
    """Build the fixed network; multiplier 1 copies the supernet's weights
    for every retained op (plus stem and classifier), larger multipliers
    re-initialize at the expanded width."""
    if rng is None:
        rng = np.random.default_rng(0)
    cfg = supernet.config
    if channel_multiplier != 1:
        cfg = replace(cfg, stem_channels=cfg.stem_channels * channel_multiplier)
        return FixedClassificationNet(cfg, genotype, rng)
    net = FixedClassificationNet(cfg, genotype, rng)
    net.stem.w.data[...] = supernet.stem.w.data
    if net.stem.norm is not None and supernet.stem.norm is not None:
        net.stem.norm.gamma.data[...] = supernet.stem.norm.gamma.data
        net.stem.norm.beta.data[...] = supernet.stem.norm.beta.data
        net.stem.norm.running_mean[...] = supernet.stem.norm.running_mean
        net.stem.norm.running_var[...] = supernet.stem.norm.running_var
    edges = cell_edge_index(cfg.num_nodes)
    for fixed_cell, mixed_cell, reduction in zip(
        net.cells, supernet.cells, supernet.cell_is_reduction
    ):
        node_edges = genotype.cells["reduce" if reduction else "normal"]
        for j, chosen in enumerate(node_edges):
            for slot, (op_kind, i) in enumerate(chosen):
                e = edges.index((i, j))
                src = mixed_cell.edges[e].ops[OPS.index(op_kind)]
                dst = fixed_cell.ops[j][slot]
                if src.w is not None:
                    dst.w.data[...] = src.w.data
    net.classifier.w.data[...] = supernet.classifier.w.data
    net.classifier.b.data[...] = supernet.classifier.b.data
    return net


# ---------------------------------------------------------------------------
# layer trellis (dense prediction)


@dataclass(frozen=True)
class TrellisConfig:
    in_channels: int = 2
    base_channels: int = 4
    num_layers: int = 3
    num_levels: int = 2
    num_nodes: int = 1
    timesteps: int = 4
    mixing: str = "membrane"
    neuron: NeuronSpec = field(default_factory=NeuronSpec)

    # Downsampling rate of the stem and of each level-to-level step. The
    # full four-level space is {3, 2, 2, 2}: the stem brings the input to
    # 1/3 resolution, each deeper level halves it again.
    stem_rate: int = 3
    level_rate: int = 2

    def __post_init__(self):
        if not 1 <= self.num_levels <= 4:
            raise ValueError("trellis supports 1 to 4 levels")
        if self.num_layers < 1:
            raise ValueError("need at least one trellis layer")

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2**level)


class TrellisSupernet:
    """Grid of mixed cells over (layer, level) with softmaxed level
    transitions; cell alphas are shared across all positions."""

    def __init__(self, config: TrellisConfig, rng: np.random.Generator):
        self.config = config
        c0 = config.base_channels
        self.stem = SpikingConv(
            "s1",
            config.in_channels,
            c0,
            rng,
            kernel=3,
            stride=config.stem_rate,
            padding=0,
            neuron=config.neuron,
        )
        self.alphas = make_alphas(config.num_nodes, "alpha.cell")
        self.betas: dict[tuple[int, int], Tensor] = {}
        self.cells: dict[tuple[int, int], MixedCell] = {}
        self.transitions: dict[tuple[int, int, int], Tensor | None] = {}
        m = config.num_levels
        for i in range(config.num_layers):
            for l in range(min(i, m - 1) + 1):
                opts = allowed_transitions(l, m)
                self.betas[(i, l)] = Tensor(
                    np.full(len(opts), EPS_ARCH), requires_grad=True, name=f"beta.l{i}.f{l}"
                )
                for l2 in opts:
                    self.transitions[(i, l, l2)] = self._make_transition(
                        i, l, l2, rng, f"t{i}.{l}to{l2}"
                    )
        for i in range(config.num_layers):
            for l in range(min(i + 1, m - 1) + 1):
                ch = config.level_channels(l)
                self.cells[(i + 1, l)] = MixedCell(
                    f"g{i + 1}.{l}",
                    config.num_nodes,
                    ch,
                    ch,
                    ch,
                    False,
                    rng,
                    self.alphas,
                    config.neuron,
                    config.mixing,
                )
        # 1x1 aligners bringing every final-layer level back to level 0
        self.aligners: dict[int, Tensor | None] = {}
        for l in range(min(config.num_layers, m - 1) + 1):
            if l == 0 and config.num_nodes == 1:
                self.aligners[l] = None
            else:
                cl = config.level_channels(l) * config.num_nodes
                self.aligners[l] = Tensor(
                    kaiming(rng, (c0, cl, 1, 1), cl),
                    requires_grad=True,
                    name=f"align.{l}",
                )

    def _make_transition(self, i: int, l: int, l2: int, rng, name: str) -> Tensor | None:
        # layer 0 features come straight from the stem and are not node
        # concatenations, so their channel count lacks the num_nodes factor
        cfg = self.config
        cin = cfg.level_channels(l) * (cfg.num_nodes if i > 0 else 1)
        cout = cfg.level_channels(l2)
        if l2 == l and cin == cout:
            return None
        return Tensor(kaiming(rng, (cout, cin, 1, 1), cin), requires_grad=True, name=name)

    def _resample(self, x: Tensor, i: int, l: int, l2: int) -> Tensor:
        w = self.transitions[(i, l, l2)]
        if l2 > l:
            return tg.conv2d(x, w, stride=self.config.level_rate, padding=0)
        if l2 < l:
            return tg.conv2d(tg.upsample_nearest(x, self.config.level_rate), w, padding=0)
        return x if w is None else tg.conv2d(x, w, padding=0)

    def begin_sequence(self):
        self.stem.begin_sequence()
        for cell in self.cells.values():
            cell.begin_sequence()

    def step(self, x: Tensor) -> dict[int, Tensor]:
        """One timestep; returns the final layer's per-level features."""
        cfg = self.config
        m = cfg.num_levels
        h = {0: self.stem.step(x)}
        for i in range(cfg.num_layers):
            nxt: dict[int, Tensor] = {}
            weights = {
                l: tg.softmax(self.betas[(i, l)]) for l in h
            }
            for l, feat in h.items():
                opts = allowed_transitions(l, m)
                for k, l2 in enumerate(opts):
                    contrib = tg.crop(weights[l], (k,), (1,)) * self._resample(feat, i, l, l2)
                    nxt[l2] = contrib if l2 not in nxt else nxt[l2] + contrib
            h = {l: self.cells[(i + 1, l)].step(f, f) for l, f in nxt.items()}
        return h

    def fuse(self, levels: dict[int, Tensor]) -> Tensor:
        """Level-0-resolution fusion of final-layer features."""
        total = None
        for l in sorted(levels):
            f = levels[l]
            if l > 0:
                f = tg.upsample_nearest(f, self.config.level_rate**l)
                f = tg.conv2d(f, self.aligners[l], padding=0)
            total = f if total is None else total + f
        return total

    def forward_sequence(self, inputs: list[Tensor]) -> list[Tensor]:
        self.begin_sequence()
        return [self.fuse(self.step(x)) for x in inputs]

    def parameters(self) -> list[Tensor]:
        ps = self.stem.parameters()
        for cell in self.cells.values():
            ps.extend(cell.parameters())
        ps.extend(w for w in self.transitions.values() if w is not None)
        ps.extend(w for w in self.aligners.values() if w is not None)
        return ps

    def arch_parameters(self) -> list[Tensor]:
        return list(self.alphas) + [self.betas[k] for k in sorted(self.betas)]

    def reset_rates(self):
        self.stem.reset_rate()
        for cell in self.cells.values():
            cell.reset_rates()

    def firing_rates(self) -> dict[str, float]:
        rates = {"stem": self.stem.firing_rate()}
        for (i, l), cell in sorted(self.cells.items()):
            rates.update(cell.firing_rates())
        return rates

    def decode(self) -> Genotype:
        cells = {
            "cell": decode_cell_alpha(np.stack([a.data for a in self.alphas]), self.config.num_nodes)
        }
        beta_values = {k: t.data for k, t in self.betas.items()}
        path = viterbi_path(beta_values, self.config.num_layers, self.config.num_levels)
        return Genotype(cells=cells, path=path)


class FixedTrellisNet:
    """Single-path trellis network instantiated from a genotype."""

    def __init__(self, config: TrellisConfig, genotype: Genotype, rng: np.random.Generator):
        if genotype.path is None or len(genotype.path) != config.num_layers:
            raise GenotypeError("trellis genotype needs a path of length num_layers")
        if "cell" not in genotype.cells:
            raise GenotypeError("trellis genotype needs a 'cell' entry")
        level = 0
        for l2 in genotype.path:
            if l2 not in allowed_transitions(level, config.num_levels):
                raise GenotypeError(f"path step {level}->{l2} is not an allowed transition")
            level = l2
        self.config = config
        self.genotype = genotype
        c0 = config.base_channels
        self.stem = SpikingConv(
            "s1",
            config.in_channels,
            c0,
            rng,
            kernel=3,
            stride=config.stem_rate,
            padding=0,
            neuron=config.neuron,
        )
        self.cells: list[FixedCell] = []
        self.transitions: list[Tensor | None] = []
        prev = 0
        for i, l2 in enumerate(genotype.path):
            cin = config.level_channels(prev) * (config.num_nodes if i > 0 else 1)
            cout = config.level_channels(l2)
            if l2 == prev and cin == cout:
                self.transitions.append(None)
            else:
                self.transitions.append(
                    Tensor(
                        kaiming(rng, (cout, cin, 1, 1), cin),
                        requires_grad=True,
                        name=f"t{i}.{prev}to{l2}",
                    )
                )
            self.cells.append(
                FixedCell(
                    f"g{i + 1}.{l2}",
                    [list(n) for n in genotype.cells["cell"]],
                    cout,
                    cout,
                    cout,
                    False,
                    rng,
                    config.neuron,
                )
            )
            prev = l2
        end = genotype.path[-1]
        if end == 0 and config.num_nodes == 1:
            self.aligner = None
        else:
            cl = config.level_channels(end) * config.num_nodes
            self.aligner = Tensor(
                kaiming(rng, (c0, cl, 1, 1), cl), requires_grad=True, name=f"align.{end}"
            )

    def begin_sequence(self):
        self.stem.begin_sequence()
        for cell in self.cells:
            cell.begin_sequence()

    def step(self, x: Tensor) -> Tensor:
        f = self.stem.step(x)
        prev = 0
        for i, (l2, cell) in enumerate(zip(self.genotype.path, self.cells)):
            w = self.transitions[i]
            if l2 > prev:
                f = tg.conv2d(f, w, stride=self.config.level_rate, padding=0)
            elif l2 < prev:
                f = tg.conv2d(tg.upsample_nearest(f, self.config.level_rate), w, padding=0)
            elif w is not None:
                f = tg.conv2d(f, w, padding=0)
            f = cell.step(f, f)
            prev = l2
        if self.aligner is not None:
            f = tg.conv2d(
                tg.upsample_nearest(f, self.config.level_rate ** self.genotype.path[-1]),
                self.aligner,
                padding=0,
            )
        return f

    def forward_sequence(self, inputs: list[Tensor]) -> list[Tensor]:
        self.begin_sequence()
        return [self.step(x) for x in inputs]

    def parameters(self) -> list[Tensor]:
        ps = self.stem.parameters()
        for cell in self.cells:
            ps.extend(cell.parameters())
        ps.extend(w for w in self.transitions if w is not None)
        if self.aligner is not None:
            ps.append(self.aligner)
        return ps

    def arch_parameters(self) -> list[Tensor]:
        return []

    def reset_rates(self):
        self.stem.reset_rate()
        for cell in self.cells:
            cell.reset_rate()

    def firing_rates(self) -> dict[str, float]:
        rates = {"s1": self.stem.firing_rate()}
        for cell in self.cells:
            for j, r in enumerate(cell.node_rates()):
                rates[f"{cell.name}.n{j}"] = float(r)
        return rates


def _copy_cell_weights(dst: FixedCell, src: MixedCell, node_edges):
    edges = cell_edge_index(src.num_nodes)
    for j, chosen in enumerate(node_edges):
        for slot, (op_kind, i) in enumerate(chosen):
            e = edges.index((i, j))
            src_op = src.edges[e].ops[OPS.index(op_kind)]
            dst_op = dst.ops[j][slot]
            if src_op.w is not None:
                dst_op.w.data[...] = src_op.w.data


def instantiate_trellis(
    supernet: TrellisSupernet, genotype: Genotype, rng: np.random.Generator | None = None
) -> FixedTrellisNet:
    """Fixed path network with weights copied from the supernet positions
    and transitions along the genotype's path."""
    if rng is None:
        rng = np.random.default_rng(0)
    net = FixedTrellisNet(supernet.config, genotype, rng)
    net.stem.w.data[...] = supernet.stem.w.data
    prev = 0
    for i, l2 in enumerate(genotype.path):
        _copy_cell_weights(net.cells[i], supernet.cells[(i + 1, l2)], genotype.cells["cell"])
        src_t = supernet.transitions[(i, prev, l2)]
        dst_t = net.transitions[i]
        if src_t is not None and dst_t is not None:
            dst_t.data[...] = src_t.data
        prev = l2
    if net.aligner is not None:
        src_align = supernet.aligners.get(genotype.path[-1])
        if src_align is not None:
            net.aligner.data[...] = src_align.data
    return net


def count_parameters(params: list[Tensor]) -> int:
    return sum(p.data.size for p in params)
