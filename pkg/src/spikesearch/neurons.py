"""Temporal neuron dynamics unrolled over discrete timesteps.

Five activation kinds share one stepping interface:

* ``if``    -- integrate-and-fire: membrane accumulates input, hard reset
               after a spike.
* ``lif``   -- leaky IF: the surviving membrane is scaled by the leak
               ``tau`` before integration (``tau = 0`` degenerates to a
               memoryless binary unit).
* ``alif``  -- adaptive LIF: a threshold-adaptation trace low-pass filters
               the spike train and raises the effective threshold.
* ``plif``  -- parametric LIF: the leak is ``1 - sigmoid(a)`` with ``a`` a
               learnable scalar, so the time constant itself receives
               gradient.
* ``relu``  -- stateless rectifier baseline occupying the same slot in
               mixed searches.

All spiking kinds fire when the membrane reaches the (effective) threshold
-- ties fire -- and hard-reset the membrane to zero afterward. The reset
gate multiplies by ``1 - y`` from the previous step; by default that gate
is detached from the graph (gradient flows through membrane and spike
paths only), which is the convention the selection searches assume. Pass
``reset_detach=False`` to differentiate through the gate, e.g. for
finite-difference checks of the relaxed network.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensorgrad as tg
from .surrogate import SurrogateSpec
from .tensorgrad import Tensor

KINDS = ("if", "lif", "alif", "plif", "relu")

# sigmoid(ln 4) = 0.8, so the PLIF leak 1 - sigmoid(a) starts at 0.2,
# matching the default fixed-leak tau.
PLIF_DEFAULT_A = float(np.log(4.0))


@dataclass(frozen=True)
class NeuronSpec:
    """Immutable description of one neuron layer's dynamics."""

    kind: str = "lif"
    tau: float = 0.2
    v_th: float = 0.5
    tau_adapt: float = 0.2
    beta: float = 0.2
    plif_a: float = PLIF_DEFAULT_A
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    reset_detach: bool = True

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown neuron kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.tau < 1.0:
            raise ValueError(f"leak tau must lie in [0, 1), got {self.tau}")
        if not 0.0 <= self.tau_adapt < 1.0:
            raise ValueError(f"adaptation tau must lie in [0, 1), got {self.tau_adapt}")
        if self.v_th <= 0.0:
            raise ValueError(f"threshold must be positive, got {self.v_th}")
        if self.beta < 0.0:
            raise ValueError(f"adaptation gain beta must be non-negative, got {self.beta}")

    def with_tau(self, tau: float) -> "NeuronSpec":
        return replace(self, tau=tau)

    def adaptation_bound(self) -> float:
        """Supremum of the ALIF effective threshold: v_th + beta/(1 - tau_adapt)."""
        return self.v_th + self.beta / (1.0 - self.tau_adapt)


@dataclass
class NeuronState:
    """Mutable per-layer state threaded through ``step``."""

    u: Tensor
    y: Tensor
    a: Tensor | None = None


def init_state(spec: NeuronSpec, shape: tuple[int, ...]) -> NeuronState:
    u = Tensor(np.zeros(shape))
    y = Tensor(np.zeros(shape))
    a = Tensor(np.zeros(shape)) if spec.kind == "alif" else None
    return NeuronState(u=u, y=y, a=a)


def _reset_gate(state: NeuronState, spec: NeuronSpec) -> Tensor:
    y_prev = state.y.detach() if spec.reset_detach else state.y
    return 1.0 - y_prev


def step(
    spec: NeuronSpec,
    state: NeuronState,
    current: Tensor,
    *,
    tau: Tensor | float | None = None,
    plif_a: Tensor | float | None = None,
) -> tuple[Tensor, NeuronState]:
    """Advance one timestep; returns (spike output, next state).

    ``tau``/``plif_a`` override the ``NeuronSpec`` value, and may be
    Tensors when the temporal parameter itself is being optimized.
    """
    if spec.kind == "relu":
        y = tg.relu(current)
        return y, NeuronState(u=y, y=y, a=None)

    gate = _reset_gate(state, spec)

    if spec.kind == "if":
        u = state.u * gate + current
    elif spec.kind == "lif":
        leak = spec.tau if tau is None else tau
        u = (state.u * gate) * leak + current if _nonzero(leak) else current * 1.0
    elif spec.kind == "plif":
        a = spec.plif_a if plif_a is None else plif_a
        if isinstance(a, Tensor):
            leak = 1.0 - tg.sigmoid(a)
        else:
            leak = 1.0 - 1.0 / (1.0 + np.exp(-float(a)))
        u = (state.u * gate) * leak + current
    elif spec.kind == "alif":
        # Adaptation integrates the *previous* spike before the membrane
        # update, so a fresh spike raises the threshold from the next step
        # on. Unlike the reset gate, this path is never detached. The
        # membrane update is word-for-word the LIF one, so beta = 0 gives
        # bitwise LIF behavior.
        a_new = state.a * spec.tau_adapt + state.y
        leak = spec.tau if tau is None else tau
        u = (state.u * gate) * leak + current if _nonzero(leak) else current * 1.0
        threshold = spec.v_th + a_new * spec.beta
        y = tg.spike_forward(u, threshold, spec.surrogate)
        return y, NeuronState(u=u, y=y, a=a_new)
    else:  # pragma: no cover - guarded by NeuronSpec validation
        raise ValueError(spec.kind)

    y = tg.spike_forward(u, spec.v_th, spec.surrogate)
    return y, NeuronState(u=u, y=y, a=None)


def _nonzero(leak) -> bool:
    if isinstance(leak, Tensor):
        return True
    return float(leak) != 0.0


def unroll(
    spec: NeuronSpec,
    currents: list[Tensor],
    *,
    state: NeuronState | None = None,
    tau: Tensor | float | None = None,
    plif_a: Tensor | float | None = None,
) -> tuple[list[Tensor], NeuronState]:
    """Run ``step`` over a list of per-timestep input currents."""
    if not currents:
        raise ValueError("unroll needs at least one timestep of input")
    if state is None:
        state = init_state(spec, currents[0].data.shape)
    outputs = []
    for current in currents:
        y, state = step(spec, state, current, tau=tau, plif_a=plif_a)
        outputs.append(y)
    return outputs, state
