"""Search loops: bilevel architecture search, surrogate-gradient search,
temporal-parameter search, and the hybrid-neuron extension.

All four share the same scheme: candidates on a site are blended by
softmaxed control weights, the weights are trained by gradient descent,
and a discrete argmax selection is frozen in at step boundaries. Ties
always resolve toward the incumbent so a zero-signal search is a no-op.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from . import tensorgrad as tg
from .neurons import NeuronSpec
from .network import EPS_ARCH, Genotype, SpikingConv, TemporalMixture
from .optim import SGD, cross_entropy
from .surrogate import SurrogateSpec, candidate_family
from .tensorgrad import NonFiniteError, Tensor


class Batch(NamedTuple):
    """One mini-batch: a frame per timestep plus integer labels."""

    inputs: tuple[np.ndarray, ...]
    labels: np.ndarray


class DivergenceError(RuntimeError):
    """Raised when a search loss goes non-finite; carries a snapshot."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def _cycle(batches):
    if not batches:
        raise ValueError("need at least one batch")
    return itertools.cycle(batches)


def _as_tensors(batch: Batch) -> list[Tensor]:
    return [Tensor(frame) for frame in batch.inputs]


def model_logits(model, batch: Batch) -> tuple[Tensor, Tensor | None]:
    out = model.forward_sequence(_as_tensors(batch))
    if isinstance(out, tuple):
        return out
    return out, None


def classification_loss(model, batch: Batch, aux_weight: float = 0.0) -> Tensor:
    logits, aux = model_logits(model, batch)
    loss = cross_entropy(logits, batch.labels)
    if aux is not None and aux_weight:
        loss = loss + aux_weight * cross_entropy(aux, batch.labels)
    return loss


def _zero_all(model):
    for p in model.parameters():
        p.zero_grad()
    for a in model.arch_parameters():
        a.zero_grad()


def train_model(
    model,
    batches: list[Batch],
    *,
    epochs: int = 1,
    lr: float = 0.025,
    momentum: float = 0.9,
    weight_decay: float = 3e-4,
    loss_fn: Callable | None = None,
) -> list[float]:
    """Plain surrogate-gradient training; returns per-iteration losses."""
    loss_fn = loss_fn or classification_loss
    opt = SGD(model.parameters(), lr=lr, momentum=momentum, weight_decay=weight_decay)
    losses = []
    for _ in range(epochs):
        for batch in batches:
            _zero_all(model)
            loss = loss_fn(model, batch)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
    return losses


# ---------------------------------------------------------------------------
# SpikeDHS: bilevel cell/layer search


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 8
    warmup_epochs: int = 2
    lr_w: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    lr_arch: float = 0.1
    aux_weight: float = 0.4

    def __post_init__(self):
        if self.epochs < self.warmup_epochs:
            raise ValueError("epochs must cover the warm-up period")


def spikedhs_search(
    supernet,
    split_a: list[Batch],
    split_b: list[Batch],
    config: SearchConfig,
    *,
    loss_fn: Callable | None = None,
    log: list | None = None,
) -> Genotype:
    """First-order alternating bilevel search over a supernet.

    Weights train on split A every iteration; architecture parameters
    train on split B once the warm-up epochs have passed. Any non-finite
    loss aborts with a diagnostic snapshot of the architecture state.
    """
    if loss_fn is None:
        def loss_fn(model, batch):
            return classification_loss(model, batch, config.aux_weight)

    opt_w = SGD(
        supernet.parameters(),
        lr=config.lr_w,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    opt_arch = SGD(supernet.arch_parameters(), lr=config.lr_arch)
    val_stream = _cycle(split_b)
    step = 0
    for epoch in range(config.epochs):
        arch_phase = epoch >= config.warmup_epochs
        for batch in split_a:
            val_loss = None
            try:
                if arch_phase:
                    _zero_all(supernet)
                    loss_b = loss_fn(supernet, next(val_stream))
                    loss_b.backward()
                    opt_arch.step()
                    val_loss = float(loss_b.data)
                _zero_all(supernet)
                loss_a = loss_fn(supernet, batch)
                loss_a.backward()
                opt_w.step()
            except NonFiniteError as err:
                raise DivergenceError(
                    f"search diverged at epoch {epoch} step {step}: {err}",
                    _snapshot(supernet, epoch=epoch, step=step, error=str(err)),
                ) from err
            if log is not None:
                log.append(
                    {
                        "step": step,
                        "epoch": epoch,
                        "alphas": [a.data.tolist() for a in supernet.arch_parameters()],
                        "selection": _genotype_doc(supernet.decode()),
                        "train_loss": float(loss_a.data),
                        "val_loss": val_loss,
                        "firing_rates": supernet.firing_rates(),
                    }
                )
            step += 1
    return supernet.decode()


def _snapshot(supernet, **extra) -> dict:
    snap = {
        "alphas": [a.data.tolist() for a in supernet.arch_parameters()],
        "firing_rates": supernet.firing_rates(),
    }
    snap.update(extra)
    return snap


def _genotype_doc(genotype: Genotype) -> dict:
    return {
        "cells": {
            name: [[[op, i] for op, i in node] for node in nodes]
            for name, nodes in sorted(genotype.cells.items())
        },
        "path": list(genotype.path) if genotype.path is not None else None,
    }


# ---------------------------------------------------------------------------
# DGS: differentiable surrogate-gradient search


@dataclass(frozen=True)
class DgsConfig:
    iterations: int = 100  # I_g
    num_candidates: int = 3
    delta_b: float = 0.2
    lr_w: float = 0.05
    lr_alpha: float = 0.1
    linear_shortcut: bool = False

    def __post_init__(self):
        if self.num_candidates < 1 or self.num_candidates % 2 == 0:
            raise ValueError("num_candidates must be odd and positive")


def candidate_kernel_updates(
    model,
    site: SpikingConv,
    batch: Batch,
    candidates: list[SurrogateSpec],
    config: DgsConfig,
    *,
    loss_fn: Callable | None = None,
) -> list[np.ndarray]:
    """One SGD step of the site kernel under each candidate surrogate.

    The direct route backpropagates once per candidate. The linear
    shortcut backpropagates once with the incumbent and rescales the
    gradient by b_i/b, which is exact when the candidate derivatives are
    temperature rescalings of the incumbent (the Triangle family).
    """
    loss_fn = loss_fn or classification_loss
    base_spec = site.neuron_spec
    w0 = site.w.data.copy()
    if config.linear_shortcut:
        _zero_all(model)
        loss_fn(model, batch).backward()
        grad = site.w.grad.copy()
        scale = [c.temperature / base_spec.surrogate.temperature for c in candidates]
        updates = [w0 - config.lr_w * s * grad for s in scale]
    else:
        updates = []
        for cand in candidates:
            site.neuron_spec = replace(base_spec, surrogate=cand)
            _zero_all(model)
            loss_fn(model, batch).backward()
            updates.append(w0 - config.lr_w * site.w.grad)
        site.neuron_spec = base_spec
    _zero_all(model)
    return updates


@dataclass
class DgsRoundResult:
    selected: SurrogateSpec
    mean_alpha: np.ndarray
    tie: bool
    records: list[dict] = field(default_factory=list)


def dgs_round(
    model,
    site_name: str,
    batches: list[Batch],
    config: DgsConfig,
    *,
    loss_fn: Callable | None = None,
    log: list | None = None,
) -> DgsRoundResult:
    """One surrogate-selection round at a single site.

    Model weights are read-only for the whole round: candidate updates go
    into detached kernel copies, the mixed current is formed from those,
    and only the control weights alpha move. The site's surrogate is
    replaced by the batch-averaged argmax; ties keep the incumbent.
    """
    loss_fn = loss_fn or classification_loss
    site = model.sites()[site_name]
    base_spec = site.neuron_spec
    candidates = candidate_family(base_spec.surrogate, config.num_candidates, config.delta_b)
    incumbent = config.num_candidates // 2
    alpha = Tensor(
        np.full(len(candidates), EPS_ARCH), requires_grad=True, name=f"dgs.{site_name}"
    )
    opt_alpha = SGD([alpha], lr=config.lr_alpha)
    alpha_sum = np.zeros(len(candidates))
    records = log if log is not None else []
    stream = _cycle(batches)
    for it in range(config.iterations):
        batch = next(stream)
        kernels = candidate_kernel_updates(model, site, batch, candidates, config, loss_fn=loss_fn)
        site.kernel_mix = (alpha, [Tensor(k) for k in kernels])
        try:
            alpha.zero_grad()
            loss = loss_fn(model, batch)
            loss.backward()
            opt_alpha.step()
        finally:
            site.kernel_mix = None
            _zero_all(model)
        alpha_sum += alpha.data
        records.append(
            {
                "step": it,
                "site": site_name,
                "alphas": alpha.data.tolist(),
                "train_loss": float(loss.data),
                "temperatures": [c.temperature for c in candidates],
            }
        )
    mean_alpha = alpha_sum / config.iterations
    best = float(mean_alpha.max())
    winners = [i for i, v in enumerate(mean_alpha) if v == best]
    tie = len(winners) > 1
    pick = incumbent if (tie or winners[0] == incumbent) else winners[0]
    if tie:
        records.append({"step": config.iterations, "site": site_name, "tie": True})
    selected = candidates[pick]
    site.neuron_spec = replace(base_spec, surrogate=selected)
    return DgsRoundResult(
        selected=selected, mean_alpha=mean_alpha, tie=tie, records=records
    )


# ---------------------------------------------------------------------------
# TPS: temporal-parameter search


@dataclass(frozen=True)
class TpsConfig:
    steps: int = 6
    iterations_per_step: int = 100  # s
    warmup_epochs: int = 5
    delta_tau: float = 0.1
    lr_w: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_a: float = 0.5

    def __post_init__(self):
        if self.delta_tau <= 0:
            raise ValueError("delta_tau must be positive")


def _step_tau(x: float) -> float | None:
    """Round a stepped tau to the decimal grid and keep it inside (0,1).

    Repeated +-delta arithmetic drifts (0.3 - 0.1 - 0.1 - 0.1 is 3e-17,
    not 0); without snapping, near-zero taus would sneak past the
    open-interval check.
    """
    x = round(x, 9)
    return x if 0.0 < x < 1.0 else None


def temporal_candidates(spec: NeuronSpec, delta: float) -> list[NeuronSpec]:
    """Candidate star around the incumbent temporal parameters.

    LIF/PLIF vary tau; ALIF varies tau and the adaptation constant as
    separate axes. Candidates falling outside (0,1) are dropped; the
    incumbent is always first so argmax ties resolve toward it.
    """
    cands = [spec]
    for tau in (_step_tau(spec.tau - delta), _step_tau(spec.tau + delta)):
        if tau is not None:
            cands.append(replace(spec, tau=tau))
    if spec.kind == "alif":
        for tau_a in (_step_tau(spec.tau_adapt - delta), _step_tau(spec.tau_adapt + delta)):
            if tau_a is not None:
                cands.append(replace(spec, tau_adapt=tau_a))
    return cands


def _temporal_site(site) -> bool:
    return isinstance(site, SpikingConv) and site.neuron_spec.kind in ("lif", "plif", "alif")


def _conv_site(site) -> bool:
    return isinstance(site, SpikingConv)


def _attach_mixtures(model, delta: float, candidate_fn, site_filter) -> dict[str, TemporalMixture]:
    mixtures = {}
    for name, site in model.sites().items():
        if not site_filter(site):
            continue
        mix = TemporalMixture(candidate_fn(site.neuron_spec, delta), name=f"tps.{name}")
        site.mixture = mix
        mixtures[name] = mix
    return mixtures


def _detach_mixtures(model):
    for site in model.sites().values():
        if isinstance(site, SpikingConv):
            site.mixture = None


@dataclass
class TpsResult:
    specs: dict[str, NeuronSpec]
    records: list[dict]


def tps_search(
    model,
    batches: list[Batch],
    config: TpsConfig,
    *,
    loss_fn: Callable | None = None,
    energy_weight: float = 0.0,
    candidate_fn: Callable = temporal_candidates,
    site_filter: Callable = _temporal_site,
    log: list | None = None,
) -> TpsResult:
    """Stepwise temporal-parameter selection on every searchable site.

    After a weights-only warm-up, each step trains weights and control
    weights jointly for `iterations_per_step` iterations, then freezes
    tau to the argmax of the iteration-averaged control weights and
    resets them to epsilon. `energy_weight` > 0 adds the hybrid-neuron
    energy objective (see :func:`hns_search`).
    """
    loss_fn = loss_fn or classification_loss
    records = log if log is not None else []
    if config.warmup_epochs:
        train_model(
            model,
            batches,
            epochs=config.warmup_epochs,
            lr=config.lr_w,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
            loss_fn=loss_fn,
        )
    stream = _cycle(batches)
    opt_w = SGD(
        model.parameters(),
        lr=config.lr_w,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    for step in range(config.steps):
        mixtures = _attach_mixtures(model, config.delta_tau, candidate_fn, site_filter)
        if not mixtures:
            raise ValueError("no searchable temporal sites on this model")
        opt_a = SGD([m.a for m in mixtures.values()], lr=config.lr_a)
        a_sums = {name: np.zeros(len(m.candidates)) for name, m in mixtures.items()}
        last_loss = float("nan")
        for _ in range(config.iterations_per_step):
            batch = next(stream)
            _zero_all(model)
            loss = loss_fn(model, batch)
            if energy_weight:
                loss = loss + energy_weight * _energy_term(mixtures)
            loss.backward()
            opt_w.step()
            opt_a.step()
            last_loss = float(loss.data)
            for name, m in mixtures.items():
                a_sums[name] += m.a.data
        selections = {}
        for name, m in mixtures.items():
            mean_a = a_sums[name] / config.iterations_per_step
            choice = m.candidates[int(np.argmax(mean_a))]
            model.sites()[name].neuron_spec = choice
            selections[name] = choice
        _detach_mixtures(model)
        model.reset_rates()
        for batch in batches[: max(1, len(batches) // 4)]:
            with tg.no_grad():
                model_logits(model, batch)
        records.append(
            {
                "step": step,
                "a": {name: (a_sums[name] / config.iterations_per_step).tolist()
                      for name in mixtures},
                "selections": {
                    name: {"kind": s.kind, "tau": s.tau, "tau_adapt": s.tau_adapt}
                    for name, s in selections.items()
                },
                "tau": {name: s.tau for name, s in selections.items()},
                "train_loss": last_loss,
                "firing_rates": model.firing_rates(),
            }
        )
    specs = {
        name: site.neuron_spec for name, site in model.sites().items() if site_filter(site)
    }
    return TpsResult(specs=specs, records=records)


# ---------------------------------------------------------------------------
# HNS: hybrid neuron search


def _energy_term(mixtures: dict[str, TemporalMixture]) -> Tensor:
    """Differentiable expected energy factor, summed over sites."""
    total = None
    for m in mixtures.values():
        term = tg.tsum(tg.softmax(m.a, axis=0) * Tensor(m.rho()))
        total = term if total is None else total + term
    return total


def hybrid_candidates(kinds: tuple[str, ...]) -> Callable:
    """Candidate builder over unit kinds, spiking kinds first."""
    ordered = [k for k in kinds if k != "relu"] + [k for k in kinds if k == "relu"]

    def build(spec: NeuronSpec, delta: float) -> list[NeuronSpec]:
        return [replace(spec, kind=k) for k in ordered]

    return build


@dataclass
class HnsResult:
    kinds: dict[str, str]
    records: list[dict]


def hns_search(
    model,
    batches: list[Batch],
    lam: float,
    config: TpsConfig,
    *,
    kinds: tuple[str, ...] = ("lif", "relu"),
    loss_fn: Callable | None = None,
    log: list | None = None,
) -> HnsResult:
    """Hybrid-neuron selection: TPS machinery over unit kinds with the
    total loss L = L_task + lambda * sum_l softmax(a)_l . rho_l."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    result = tps_search(
        model,
        batches,
        config,
        loss_fn=loss_fn,
        energy_weight=lam,
        candidate_fn=hybrid_candidates(kinds),
        site_filter=_conv_site,
        log=log,
    )
    kind_map = {name: spec.kind for name, spec in result.specs.items()}
    return HnsResult(kinds=kind_map, records=result.records)
