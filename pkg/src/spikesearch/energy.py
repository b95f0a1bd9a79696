"""Operation counting, firing-rate measurement, and the AC/MAC energy model.

A report row is one layer: the synaptic maps feeding a spiking population
together with that population, so a row's additions follow the layer-wise
accounting additions = fr * T * A with the layer's own measured firing
rate. Spiking layers pay 0.9 pJ per accumulate; dense layers (ReLU units,
readout heads, aligners, or an analog-driven first layer) pay 4.6 pJ per
multiply-accumulate. At the reference operating point fr = 0.2, T = 6 a
spiking layer costs 1.08 * A pJ against the dense 4.6 * A pJ -- the
factor of about 4.26 that also feeds the hybrid-search energy weights.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .network import (
    FixedCell,
    FixedClassificationNet,
    FixedTrellisNet,
    SpikingStack,
    StackClassifier,
)
from .tensorgrad import Tensor

# Energy per elementary operation, picojoules.
E_AC = 0.9
E_MAC = 4.6

# The operating point behind the headline SNN/ANN comparison.
REFERENCE_FR = 0.2
REFERENCE_T = 6


def reference_ratio() -> float:
    """Dense-to-spiking energy ratio at the reference operating point."""
    return E_MAC / (E_AC * REFERENCE_FR * REFERENCE_T)


@dataclass
class LayerOps:
    """Structural counts for one layer (one spiking population or one
    terminal dense map)."""

    name: str
    kind: str  # "snn" or "ann"
    ops: float  # A: synaptic operations of the maps feeding this layer
    fan_out: float = 0.0  # synaptic operations this layer's output feeds


@dataclass
class LayerEnergy:
    name: str
    kind: str
    ops: float
    firing_rate: float
    timesteps: int
    additions: float
    macs: float
    energy_pj: float
    synops: float


@dataclass
class EnergyReport:
    layers: list[LayerEnergy]
    additions: float
    macs: float
    energy_pj: float
    timesteps: int
    first_layer_analog: bool

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write("layer,kind,A,fr,T,additions,MACs,pJ,synops\n")
        for row in self.layers:
            out.write(
                f"{row.name},{row.kind},{row.ops:.10g},{row.firing_rate:.10g},"
                f"{row.timesteps},{row.additions:.10g},{row.macs:.10g},"
                f"{row.energy_pj:.10g},{row.synops:.10g}\n"
            )
        out.write(
            f"total,,{sum(r.ops for r in self.layers):.10g},,,"
            f"{self.additions:.10g},{self.macs:.10g},{self.energy_pj:.10g},\n"
        )
        return out.getvalue()

    def to_json(self) -> str:
        doc = {
            "first_layer_analog": self.first_layer_analog,
            "timesteps": self.timesteps,
            "layers": [
                {
                    "layer": r.name,
                    "kind": r.kind,
                    "A": r.ops,
                    "fr": r.firing_rate,
                    "T": r.timesteps,
                    "additions": r.additions,
                    "MACs": r.macs,
                    "pJ": r.energy_pj,
                    "synops": r.synops,
                }
                for r in self.layers
            ],
            "totals": {
                "additions": self.additions,
                "MACs": self.macs,
                "pJ": self.energy_pj,
            },
        }
        return json.dumps(doc, indent=2)


def _check_shape(input_shape) -> tuple[int, int, int]:
    try:
        c, h, w = input_shape
    except (TypeError, ValueError):
        raise ValueError(f"input_shape must be (channels, height, width), got {input_shape!r}")
    for d in (c, h, w):
        if not isinstance(d, (int, np.integer)) or d <= 0:
            raise ValueError(f"dynamic or non-positive dimension in input shape {input_shape!r}")
    return int(c), int(h), int(w)


def _conv_out(hw: tuple[int, int], kernel: int, stride: int, padding: int) -> tuple[int, int]:
    h, w = hw
    return (
        (h + 2 * padding - kernel) // stride + 1,
        (w + 2 * padding - kernel) // stride + 1,
    )


def _map_ops(w_shape, hw_out: tuple[int, int]) -> float:
    co, ci, kh, kw = w_shape
    return float(co * hw_out[0] * hw_out[1] * ci * kh * kw)


def _candidate_op_ops(op, in_hw: tuple[int, int]) -> tuple[float, tuple[int, int]]:
    """A and output shape for one genotype edge op (skip contributes 0)."""
    if op.w is None:  # identity skip
        return 0.0, in_hw
    kernel = op.w.data.shape[2]
    padding = 1 if op.op_kind != "skip" else 0
    hw_out = _conv_out(in_hw, kernel, op.stride, padding)
    return _map_ops(op.w.data.shape, hw_out), hw_out


class _Source:
    """A feature stream: the rows that produced it plus its shape."""

    def __init__(self, rows: list[LayerOps], hw: tuple[int, int]):
        self.rows = rows
        self.hw = hw

    def feed(self, ops: float):
        for row in self.rows:
            row.fan_out += ops / len(self.rows)


def _cell_rows(
    cell: FixedCell, s0: _Source, s1: _Source, rows: list[LayerOps]
) -> _Source:
    """Count one fixed cell; returns the cell-output stream."""
    hw0 = s0.hw
    while hw0[0] > s1.hw[0]:  # spatial alignment is a pure subsample
        hw0 = (hw0[0] // 2, hw0[1] // 2)
    states: list[_Source] = [_Source(s0.rows, hw0), s1]
    node_rows = []
    for j, (ops_row, edges) in enumerate(zip(cell.ops, cell.node_edges)):
        row = LayerOps(f"{cell.name}.n{j}", _kind(cell.node_specs[j].kind), 0.0)
        node_hw = None
        for op, (_, i) in zip(ops_row, edges):
            a, hw_out = _candidate_op_ops(op, states[i].hw)
            row.ops += a
            states[i].feed(a)
            node_hw = hw_out
        rows.append(row)
        states.append(_Source([row], node_hw))
        node_rows.append(row)
    return _Source(node_rows, states[2].hw)


def _kind(neuron_kind: str) -> str:
    return "ann" if neuron_kind == "relu" else "snn"


def _stack_rows(layers, head, input_shape) -> list[LayerOps]:
    _, h, w = _check_shape(input_shape)
    rows: list[LayerOps] = []
    hw = (h, w)
    prev: LayerOps | None = None
    for layer in layers:
        a, hw = layer.count_ops(hw)
        row = LayerOps(layer.site, _kind(layer.neuron_spec.kind), a)
        if prev is not None:
            prev.fan_out += a
        rows.append(row)
        prev = row
    if head is not None:
        a = head.count_ops(layers[-1].out_channels)
        prev.fan_out += a
        rows.append(LayerOps(head.name, "ann", a))
    return rows


def _classification_rows(net: FixedClassificationNet, input_shape) -> list[LayerOps]:
    _, h, w = _check_shape(input_shape)
    rows: list[LayerOps] = []
    a_stem, hw = net.stem.count_ops((h, w))
    stem_row = LayerOps("s1", _kind(net.stem.neuron_spec.kind), a_stem)
    rows.append(stem_row)
    s0 = s1 = _Source([stem_row], hw)
    for cell in net.cells:
        out = _cell_rows(cell, s0, s1, rows)
        s0, s1 = s1, out
    a_head = net.classifier.count_ops(net.cells[-1].out_channels())
    s1.feed(a_head)
    rows.append(LayerOps("classifier", "ann", a_head))
    return rows


def _trellis_rows(net: FixedTrellisNet, input_shape) -> list[LayerOps]:
    _, h, w = _check_shape(input_shape)
    rows: list[LayerOps] = []
    a_stem, hw = net.stem.count_ops((h, w))
    stem_row = LayerOps("s1", _kind(net.stem.neuron_spec.kind), a_stem)
    rows.append(stem_row)
    stream = _Source([stem_row], hw)
    prev_level = 0
    rate = net.config.level_rate
    for trans, level, cell in zip(net.transitions, net.genotype.path, net.cells):
        pending = 0.0
        hw = stream.hw
        if level > prev_level:
            hw = _conv_out(hw, 1, rate, 0)
            pending = _map_ops(trans.data.shape, hw)
        elif level < prev_level:
            hw = (hw[0] * rate, hw[1] * rate)
            pending = _map_ops(trans.data.shape, hw)
        elif trans is not None:
            pending = _map_ops(trans.data.shape, hw)
        if pending:
            stream.feed(pending)
        feat = _Source(stream.rows, hw)
        out = _cell_rows(cell, feat, feat, rows)
        for row in out.rows:  # level transition ops belong to the cell layer
            row.ops += pending / len(out.rows)
        stream = out
        prev_level = level
    if net.aligner is not None:
        up = rate ** net.genotype.path[-1]
        hw = (stream.hw[0] * up, stream.hw[1] * up)
        a_align = _map_ops(net.aligner.data.shape, hw)
        stream.feed(a_align)
        rows.append(LayerOps("align", "ann", a_align))
    return rows


def count_ops(network, input_shape) -> list[LayerOps]:
    """Per-layer synaptic-operation counts for a fixed decoded network."""
    if isinstance(network, StackClassifier):
        return _stack_rows(network.stack.layers, network.head, input_shape)
    if isinstance(network, SpikingStack):
        return _stack_rows(network.layers, None, input_shape)
    if isinstance(network, FixedClassificationNet):
        return _classification_rows(network, input_shape)
    if isinstance(network, FixedTrellisNet):
        return _trellis_rows(network, input_shape)
    raise TypeError(f"cannot count ops for {type(network).__name__}")


def _population_kinds(network) -> dict[str, str]:
    if isinstance(network, StackClassifier):
        return _population_kinds(network.stack)
    if isinstance(network, SpikingStack):
        return {layer.site: layer.neuron_spec.kind for layer in network.layers}
    kinds: dict[str, str] = {}
    if isinstance(network, (FixedClassificationNet, FixedTrellisNet)):
        kinds["s1"] = network.stem.neuron_spec.kind
        for cell in network.cells:
            for j, spec in enumerate(cell.node_specs):
                kinds[f"{cell.name}.n{j}"] = spec.kind
        return kinds
    raise TypeError(f"cannot list populations for {type(network).__name__}")


def measure_firing_rate(network, dataset) -> dict[str, float]:
    """Mean spikes per neuron-timestep for every layer, over a dataset of
    frame sequences. ReLU layers report the dense-activation convention
    fr = 1.0 regardless of their activation statistics."""
    network.reset_rates()
    with tg.no_grad():
        for frames in dataset:
            network.forward_sequence([Tensor(np.asarray(f)) for f in frames])
    rates = dict(network.firing_rates())
    for name, kind in _population_kinds(network).items():
        if kind == "relu":
            rates[name] = 1.0
    return rates


def estimate_energy(
    network,
    rates: dict[str, float],
    timesteps: int,
    input_shape,
    *,
    first_layer_analog: bool = False,
) -> EnergyReport:
    """Energy report under the AC/MAC model.

    Spiking rows: additions = fr * T * A at 0.9 pJ each. Dense rows:
    MACs = A at 4.6 pJ each (single pass). With ``first_layer_analog``
    the first layer multiplies real-valued frames into the membrane at
    every timestep, so it books T * A MACs instead of accumulates.
    """
    if timesteps < 1:
        raise ValueError("timesteps must be at least 1")
    layer_ops = count_ops(network, input_shape)
    out_rows: list[LayerEnergy] = []
    for idx, lo in enumerate(layer_ops):
        if lo.kind == "ann":
            fr, t_eff, additions, macs = 1.0, 1, 0.0, lo.ops
        else:
            if lo.name not in rates:
                raise KeyError(f"no measured firing rate for layer {lo.name!r}")
            fr = float(rates[lo.name])
            if not 0.0 <= fr <= 1.0:
                raise ValueError(f"firing rate for {lo.name!r} must lie in [0,1], got {fr}")
            t_eff = timesteps
            if first_layer_analog and idx == 0:
                additions, macs = 0.0, timesteps * lo.ops
            else:
                additions, macs = fr * timesteps * lo.ops, 0.0
        out_rows.append(
            LayerEnergy(
                name=lo.name,
                kind=("snn/analog-in" if first_layer_analog and idx == 0 and lo.kind == "snn" else lo.kind),
                ops=lo.ops,
                firing_rate=fr,
                timesteps=t_eff,
                additions=additions,
                macs=macs,
                energy_pj=E_AC * additions + E_MAC * macs,
                synops=fr * t_eff * lo.fan_out,
            )
        )
    total_add = sum(r.additions for r in out_rows)
    total_mac = sum(r.macs for r in out_rows)
    return EnergyReport(
        layers=out_rows,
        additions=total_add,
        macs=total_mac,
        energy_pj=E_AC * total_add + E_MAC * total_mac,
        timesteps=timesteps,
        first_layer_analog=first_layer_analog,
    )
