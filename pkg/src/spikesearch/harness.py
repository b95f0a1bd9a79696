"""Synthetic tasks, run configuration, and the run-directory pipeline.

A run executes search -> decode -> retrain -> eval -> energy and leaves a
self-contained directory behind: the exact config snapshot, a trajectory
JSON with every search record, CSV learning curves, an energy report, and
final metrics. Re-running from the snapshot reproduces the metrics
bit-exactly: all randomness flows from the single seed through the named
substreams ``data`` (dataset generation), ``init`` (the evaluated
network's weights), and ``search`` (supernet weights during search).

The three toy tasks are sized for minutes on a CPU:

* ``toy_classify`` -- noisy class prototypes, static over time.
* ``toy_temporal`` -- every pixel emits a sub-threshold pulse pair and
  the class lives in the inter-pulse gap, so only membrane leak (not
  spatial shape or firing rate) separates the classes; a tau=0 binary
  network sees identical rate statistics for both. With ``planted_tau``
  set, labels come instead from a frozen unit-weight LIF teacher at that
  leak, splitting samples by teacher spike count.
* ``toy_stereo`` -- shifted random-dot event pairs: one canvas event
  stream SBT-encoded and sliced into left/right views a fixed horizontal
  shift apart, so the planted disparity equals the shift.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import tensorgrad as tg
from .energy import estimate_energy, measure_firing_rate
from .network import (
    ClassificationSupernet,
    FixedClassificationNet,
    Genotype,
    SpikingConv,
    StackClassifier,
    SupernetConfig,
    TrellisConfig,
    instantiate,
)
from .neurons import NeuronSpec
from .optim import SGD
from .search import (
    Batch,
    DgsConfig,
    SearchConfig,
    TpsConfig,
    classification_loss,
    dgs_round,
    hns_search,
    model_logits,
    spikedhs_search,
    tps_search,
    train_model,
)
from .stereohead import (
    EventStream,
    StereoNet,
    disparity_metrics,
    sbt_encode,
    stereo_loss,
    subpixel_estimate,
    write_disparity_pgm,
)
from .tensorgrad import Tensor

TASKS = ("toy_classify", "toy_temporal", "toy_stereo")
SEARCHES = ("none", "spikedhs", "dgs", "tps", "hns")
STREAMS = ("data", "init", "search")

RUN_DIR_ENV = "SPIKESEARCH_RUNS"


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named use of the run seed."""
    if name not in STREAMS:
        raise ValueError(f"unknown substream {name!r}; expected one of {STREAMS}")
    return np.random.default_rng([seed, STREAMS.index(name)])


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    """One run, fully specified; every field has a working default."""

    task: str = "toy_classify"
    seed: int = 0
    # model
    neuron_kind: str = "lif"
    tau: float = 0.2
    timesteps: int = 4
    stem_channels: int = 4
    num_cells: int = 2
    num_nodes: int = 1
    # data
    num_train: int = 256
    num_val: int = 128
    num_test: int = 128
    batch_size: int = 32
    num_classes: int = 2
    image_size: int = 6
    planted_tau: float | None = None
    # search
    search: str = "spikedhs"
    search_epochs: int = 8
    warmup_epochs: int = 2
    lr_arch: float = 0.1
    iterations: int = 40
    tps_steps: int = 6
    delta_tau: float = 0.1
    delta_b: float = 0.2
    num_candidates: int = 3
    lr_a: float = 0.5
    lam: float = 1000.0
    # optimizer
    opt: str = "sgd"
    lr: float = 0.025
    momentum: float = 0.9
    weight_decay: float = 3e-4
    aux_weight: float = 0.4
    epochs: int = 2
    # stereo
    num_stacks: int = 2
    num_disparities: int = 4
    disparity: int = 2
    focal_baseline: float = 120.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.search not in SEARCHES:
            raise ValueError(f"unknown search {self.search!r}; expected one of {SEARCHES}")
        if self.opt != "sgd":
            raise ValueError(f"unknown optimizer {self.opt!r}")
        if min(self.num_train, self.num_val, self.num_test, self.batch_size) < 1:
            raise ValueError("split sizes and batch size must be positive")
        if self.epochs < 0 or self.timesteps < 1:
            raise ValueError("epochs must be >= 0 and timesteps >= 1")
        if self.disparity % 2 or self.disparity < 0:
            raise ValueError("planted disparity must be even and nonnegative")
        if self.disparity // 2 >= self.num_disparities:
            raise ValueError("planted disparity exceeds the matching range")
        # the stereo stem is an unpadded 3x3, so features lose 2 pixels per
        # side pair; what remains must still cover the matching range
        if self.task == "toy_stereo" and self.image_size - 2 <= 2 * (self.num_disparities - 1):
            raise ValueError("image too narrow for the disparity range after the stem")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SyntheticSpec:
    """What to generate; datasets are a pure function of (spec, seed)."""

    kind: str = "toy_classify"
    num_classes: int = 2
    timesteps: int = 4
    samples: int = 512
    image_size: int = 6
    flip_prob: float = 0.15
    pulse_amp: float = 0.45
    pulse_density: float = 0.5
    planted_tau: float | None = None
    disparity: int = 2
    num_stacks: int = 2
    splits: tuple[int, int, int] | None = None  # None: 50/25/25 of samples

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValueError(f"unknown generator {self.kind!r}; expected one of {TASKS}")
        if self.splits is not None and sum(self.splits) != self.samples:
            raise ValueError("split sizes must sum to the sample count")
        if self.kind == "toy_temporal" and self.timesteps < 4:
            raise ValueError("toy_temporal needs at least 4 timesteps for a pulse pair")


def spec_for(config: RunConfig) -> SyntheticSpec:
    return SyntheticSpec(
        kind=config.task,
        num_classes=config.num_classes,
        timesteps=config.timesteps,
        samples=config.num_train + config.num_val + config.num_test,
        image_size=config.image_size,
        planted_tau=config.planted_tau,
        disparity=config.disparity,
        num_stacks=config.num_stacks,
        splits=(config.num_train, config.num_val, config.num_test),
    )


# ---------------------------------------------------------------------------
# synthetic data


class Dataset(NamedTuple):
    """Movies (n, T, C, H, W) with labels; stereo adds the right view and
    uses per-sample planted disparities as labels."""

    movies: np.ndarray
    labels: np.ndarray
    right: np.ndarray | None = None


class Splits(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset


def _split_sizes(spec: SyntheticSpec) -> tuple[int, int, int]:
    if spec.splits is not None:
        return spec.splits
    if spec.samples < 4:
        raise ValueError("need at least 4 samples to split")
    train = spec.samples // 2
    val = spec.samples // 4
    return train, val, spec.samples - train - val


def _balanced_labels(rng, n: int, classes: int) -> np.ndarray:
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    return labels


def _classify_part(spec: SyntheticSpec, rng, n: int, protos: np.ndarray) -> Dataset:
    labels = _balanced_labels(rng, n, spec.num_classes)
    hw = spec.image_size
    flips = rng.random((n, 1, hw, hw)) < spec.flip_prob
    images = np.where(flips, ~protos[labels], protos[labels]).astype(float)
    movies = np.repeat(images[:, None], spec.timesteps, axis=1)
    return Dataset(movies, labels)


def _temporal_part(spec: SyntheticSpec, rng, n: int) -> Dataset:
    # every sample is a random pixel mask pulsed twice at sub-threshold
    # amplitude; class 0 uses gap 1 (the second pulse rides the first's
    # membrane residue), class 1 uses gap 2 (the residue has leaked too
    # far). Both pulse frames equal the same mask, so the multiset of
    # frames is {mask, mask, 0, ...} for either class and a memoryless
    # (tau = 0) network's time-averaged logits carry no label information.
    labels = _balanced_labels(rng, n, 2)
    hw, T = spec.image_size, spec.timesteps
    gaps = labels + 1
    t0 = rng.integers(0, T - 3, size=n)
    mask = (rng.random((n, 1, hw, hw)) < spec.pulse_density) * spec.pulse_amp
    movies = np.zeros((n, T, 1, hw, hw))
    idx = np.arange(n)
    movies[idx, t0] += mask
    movies[idx, t0 + gaps] += mask
    return Dataset(movies, labels)


def temporal_teacher_counts(movies: np.ndarray, tau: float, v_th: float = 0.5) -> np.ndarray:
    """Per-sample spike count of a unit-weight LIF teacher over the movie."""
    n, T = movies.shape[:2]
    v = np.zeros_like(movies[:, 0])
    counts = np.zeros(n)
    for t in range(T):
        v = tau * v + movies[:, t]
        spikes = (v >= v_th).astype(float)
        counts += spikes.sum(axis=(1, 2, 3))
        v = v * (1.0 - spikes)
    return counts


def _teacher_relabel(part: Dataset, tau: float) -> Dataset:
    # rank split: the more-spiking half is class 1 (stable ties by index),
    # so re-running the teacher reproduces the labels exactly
    counts = temporal_teacher_counts(part.movies, tau)
    order = np.argsort(counts, kind="stable")
    labels = np.zeros(len(counts), dtype=np.int64)
    labels[order[len(counts) // 2 :]] = 1
    return Dataset(part.movies, labels)


def _stereo_part(spec: SyntheticSpec, rng, n: int) -> Dataset:
    T, c, hw, s = spec.timesteps, spec.num_stacks, spec.image_size, spec.disparity
    duration = 100
    windows = T * c
    wide = hw + s
    left = np.zeros((n, T, c, hw, hw))
    right = np.zeros_like(left)
    for i in range(n):
        num_events = 2 * windows * hw * wide
        t = np.sort(rng.integers(0, windows * duration, size=num_events))
        t[0] = 0  # pin the SBT anchor so both views share window edges
        x = rng.integers(0, wide, size=num_events)
        y = rng.integers(0, hw, size=num_events)
        p = rng.choice([-1, 1], size=num_events)
        canvas = EventStream(np.stack([t, x, y, p], axis=1), hw, wide)
        stacks = sbt_encode(canvas, windows, duration).reshape(T, c, hw, wide)
        left[i] = stacks[..., :hw]
        right[i] = stacks[..., s:]
    return Dataset(left, np.full(n, float(s)), right=right)


def generate(spec: SyntheticSpec, seed: int) -> Splits:
    """Deterministic train/val/test splits, each internally class-balanced."""
    rng = substream(seed, "data")
    sizes = _split_sizes(spec)
    if spec.kind == "toy_classify":
        protos = rng.random((spec.num_classes, 1, spec.image_size, spec.image_size)) < 0.5
        parts = [_classify_part(spec, rng, n, protos) for n in sizes]
    elif spec.kind == "toy_temporal":
        parts = [_temporal_part(spec, rng, n) for n in sizes]
        if spec.planted_tau is not None:
            parts = [_teacher_relabel(p, spec.planted_tau) for p in parts]
    else:
        parts = [_stereo_part(spec, rng, n) for n in sizes]
    return Splits(*parts)


def as_batches(part: Dataset, batch_size: int) -> list[Batch]:
    n, T = part.movies.shape[:2]
    out = []
    for i in range(0, n, batch_size):
        frames = tuple(part.movies[i : i + batch_size, t] for t in range(T))
        out.append(Batch(inputs=frames, labels=part.labels[i : i + batch_size]))
    return out


class StereoBatch(NamedTuple):
    left: tuple[np.ndarray, ...]
    right: tuple[np.ndarray, ...]
    disparity: np.ndarray


def as_stereo_batches(part: Dataset, batch_size: int) -> list[StereoBatch]:
    n, T = part.movies.shape[:2]
    out = []
    for i in range(0, n, batch_size):
        sl = slice(i, i + batch_size)
        out.append(
            StereoBatch(
                left=tuple(part.movies[sl, t] for t in range(T)),
                right=tuple(part.right[sl, t] for t in range(T)),
                disparity=part.labels[sl],
            )
        )
    return out


# ---------------------------------------------------------------------------
# models


def _neuron(config: RunConfig) -> NeuronSpec:
    return NeuronSpec(kind=config.neuron_kind, tau=config.tau)


def default_genotype(num_nodes: int) -> Genotype:
    """Canonical fallback: every node reads inputs 0 and 1 through b3 convs
    (what an all-ties supernet decodes to)."""
    node = (("conv3x3_sg_b3", 0), ("conv3x3_sg_b3", 1))
    nodes = tuple(node for _ in range(num_nodes))
    return Genotype(cells={"normal": nodes, "reduce": nodes})


def _supernet_config(config: RunConfig) -> SupernetConfig:
    return SupernetConfig(
        in_channels=1,
        stem_channels=config.stem_channels,
        num_cells=config.num_cells,
        num_nodes=config.num_nodes,
        num_classes=config.num_classes,
        timesteps=config.timesteps,
        neuron=_neuron(config),
    )


def build_stack(config: RunConfig, rng) -> StackClassifier:
    layers = []
    cin = 1
    for i in range(2):
        layers.append(SpikingConv(f"l{i}", cin, config.stem_channels, rng, neuron=_neuron(config)))
        cin = config.stem_channels
    return StackClassifier(layers, config.num_classes, rng)


def build_stereo_net(config: RunConfig, rng) -> StereoNet:
    trellis = TrellisConfig(
        in_channels=config.num_stacks,
        base_channels=config.stem_channels,
        num_layers=config.num_cells,
        num_levels=1,
        num_nodes=config.num_nodes,
        timesteps=config.timesteps,
        stem_rate=1,
        neuron=_neuron(config),
    )
    node = (("conv3x3_sg_b3", 0), ("conv3x3_sg_b3", 1))
    genotype = Genotype(
        cells={"cell": tuple(node for _ in range(config.num_nodes))},
        path=(0,) * config.num_cells,
    )
    return StereoNet(trellis, genotype, rng, num_disparities=config.num_disparities)


def genotype_doc(genotype: Genotype) -> dict:
    return {
        "cells": {
            name: [[[op, i] for op, i in node] for node in nodes]
            for name, nodes in sorted(genotype.cells.items())
        },
        "path": list(genotype.path) if genotype.path is not None else None,
    }


# ---------------------------------------------------------------------------
# the pipeline


def _resolve_out_dir(config: RunConfig, out_dir) -> Path:
    if out_dir is not None:
        return Path(out_dir)
    root = Path(os.environ.get(RUN_DIR_ENV, "runs"))
    base = f"{config.task}-{config.search}-seed{config.seed}"
    out = root / base
    k = 1
    while out.exists():
        out = root / f"{base}-{k}"
        k += 1
    return out


def _write_json(path: Path, doc):
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_curves(path: Path, losses: list[float]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "train_loss"])
        writer.writerows([i, v] for i, v in enumerate(losses))


def _check_finite(metrics: dict):
    for key, value in metrics.items():
        if isinstance(value, float) and not np.isfinite(value):
            raise FloatingPointError(f"metric {key!r} is not finite")


def _evaluate(net, batches: list[Batch]) -> dict:
    correct, total, loss_sum = 0, 0, 0.0
    with tg.no_grad():
        for batch in batches:
            logits, _ = model_logits(net, batch)
            loss_sum += float(classification_loss(net, batch).data) * len(batch.labels)
            correct += int((np.argmax(logits.data, axis=1) == batch.labels).sum())
            total += len(batch.labels)
    return {"test_accuracy": correct / total, "test_loss": loss_sum / total}


def _energy_artifacts(net, frame_sets, config: RunConfig, input_shape, out: Path) -> dict:
    rates = measure_firing_rate(net, frame_sets)
    report = estimate_energy(net, rates, config.timesteps, input_shape)
    (out / "energy.csv").write_text(report.to_csv())
    return {
        "energy_pj": report.energy_pj,
        "additions": report.additions,
        "macs": report.macs,
    }


def _run_classify(config: RunConfig, out: Path, trajectory: dict) -> dict:
    splits = generate(spec_for(config), config.seed)
    train_b = as_batches(splits.train, config.batch_size)
    val_b = as_batches(splits.val, config.batch_size)
    test_b = as_batches(splits.test, config.batch_size)
    init_rng = substream(config.seed, "init")
    search_rng = substream(config.seed, "search")
    records: list[dict] = []
    trajectory["records"] = records
    metrics: dict = {"task": config.task, "search": config.search, "seed": config.seed}

    if config.search == "spikedhs":
        supernet = ClassificationSupernet(_supernet_config(config), search_rng)
        genotype = spikedhs_search(
            supernet,
            train_b,
            val_b,
            SearchConfig(
                epochs=config.search_epochs,
                warmup_epochs=config.warmup_epochs,
                lr_w=config.lr,
                momentum=config.momentum,
                weight_decay=config.weight_decay,
                lr_arch=config.lr_arch,
                aux_weight=config.aux_weight,
            ),
            log=records,
        )
        net = instantiate(supernet, genotype, rng=init_rng)
        metrics["genotype"] = genotype_doc(genotype)
        _write_json(out / "genotype.json", metrics["genotype"])
    elif config.search == "none":
        genotype = default_genotype(config.num_nodes)
        net = FixedClassificationNet(_supernet_config(config), genotype, init_rng)
        metrics["genotype"] = genotype_doc(genotype)
    elif config.search == "dgs":
        net = build_stack(config, init_rng)
        if config.warmup_epochs:
            train_model(
                net,
                train_b,
                epochs=config.warmup_epochs,
                lr=config.lr,
                momentum=config.momentum,
                weight_decay=config.weight_decay,
            )
        dgs_cfg = DgsConfig(
            iterations=config.iterations,
            num_candidates=config.num_candidates,
            delta_b=config.delta_b,
            lr_w=config.lr,
            lr_alpha=config.lr_a,
        )
        for name in net.sites():
            dgs_round(net, name, train_b, dgs_cfg, log=records)
        metrics["surrogate_temperatures"] = {
            name: site.neuron_spec.surrogate.temperature
            for name, site in net.sites().items()
        }
    elif config.search in ("tps", "hns"):
        net = build_stack(config, init_rng)
        tps_cfg = TpsConfig(
            steps=config.tps_steps,
            iterations_per_step=config.iterations,
            warmup_epochs=config.warmup_epochs,
            delta_tau=config.delta_tau,
            lr_w=config.lr,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
            lr_a=config.lr_a,
        )
        if config.search == "tps":
            result = tps_search(net, train_b, tps_cfg, log=records)
            metrics["tau"] = {name: spec.tau for name, spec in result.specs.items()}
        else:
            result = hns_search(net, train_b, config.lam, tps_cfg, log=records)
            metrics["kinds"] = result.kinds

    losses = train_model(
        net,
        train_b,
        epochs=config.epochs,
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    trajectory["train_losses"] = losses
    _write_curves(out / "curves.csv", losses)
    metrics.update(_evaluate(net, test_b))
    hw = config.image_size
    metrics.update(
        _energy_artifacts(net, [b.inputs for b in test_b], config, (1, hw, hw), out)
    )
    return metrics


def _run_stereo(config: RunConfig, out: Path, trajectory: dict) -> dict:
    if config.search != "none":
        raise ValueError("the stereo pipeline runs with search='none'")
    splits = generate(spec_for(config), config.seed)
    train_b = as_stereo_batches(splits.train, config.batch_size)
    test_b = as_stereo_batches(splits.test, config.batch_size)
    net = build_stereo_net(config, substream(config.seed, "init"))
    opt = SGD(
        net.parameters(),
        lr=config.lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )
    losses = []
    for _ in range(config.epochs):
        for batch in train_b:
            for p in net.parameters():
                p.zero_grad()
            costs = net.forward_sequence(
                [Tensor(f) for f in batch.left], [Tensor(f) for f in batch.right]
            )
            loss = stereo_loss(costs, batch.disparity)
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
    trajectory["train_losses"] = losses
    _write_curves(out / "curves.csv", losses)

    # columns to the left of the matching range see no counterpart; they
    # are excluded from the metrics, as is standard for border pixels
    border = 2 * (config.num_disparities - 1)
    est_maps, gt_maps = [], []
    first_map = None
    with tg.no_grad():
        for batch in test_b:
            costs = net.forward_sequence(
                [Tensor(f) for f in batch.left], [Tensor(f) for f in batch.right]
            )
            for i in range(costs.shape[0]):
                est = subpixel_estimate(costs.data[i])
                if first_map is None:
                    first_map = est
                est_maps.append(est[:, border:])
                gt_maps.append(np.full_like(est[:, border:], batch.disparity[i]))
    metrics = {"task": config.task, "search": config.search, "seed": config.seed}
    metrics.update(
        disparity_metrics(np.stack(est_maps), np.stack(gt_maps), config.focal_baseline)
    )
    write_disparity_pgm(out / "disparity.pgm", first_map)
    metrics.update(
        _energy_artifacts(
            net.features,
            [b.left for b in test_b],
            config,
            (config.num_stacks, config.image_size, config.image_size),
            out,
        )
    )
    return metrics


def run(config: RunConfig, out_dir=None) -> Path:
    """Execute the configured pipeline into a run directory.

    The config snapshot is written first and the trajectory is flushed
    even when a stage fails, so a crashed run leaves its partial logs
    behind; the exception still propagates (the CLI turns it into a
    nonzero exit code).
    """
    out = _resolve_out_dir(config, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", config.to_dict())
    trajectory: dict = {
        "task": config.task,
        "search": config.search,
        "records": [],
        "train_losses": [],
    }
    try:
        if config.task == "toy_stereo":
            metrics = _run_stereo(config, out, trajectory)
        else:
            metrics = _run_classify(config, out, trajectory)
        _check_finite(metrics)
    finally:
        _write_json(out / "trajectory.json", trajectory)
    _write_json(out / "metrics.json", metrics)
    return out
