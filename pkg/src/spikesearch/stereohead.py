"""Event encoding (SBT) and the sub-pixel deep-stereo output head.

The matching network produces a cost tensor C of shape (d_max/2, h, w)
where index d stands for disparity D(d) = 2*d. The head turns C into a
disparity map with a softmin-weighted sub-pixel estimator restricted to a
window around the per-pixel argmin, and trains against a discretized
Laplace target via the sub-pixel cross entropy. The cross entropy here is
the Laplace-weighted mean log-softmin, so a uniform cost volume scores
-log(d_max/2) and a confidently correct one scores near 0; training code
minimizes its negation (see ``stereo_loss``).

Raw input is a stream of DVS events (t, x, y, polarity). ``sbt_encode``
merges them into temporally adjacent frames by signed polarity
accumulation; consecutive stacks form one network input.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import tensorgrad as tg
from .network import FixedTrellisNet, Genotype, TrellisConfig
from .tensorgrad import Tensor

# Disparity represented by cost-tensor index d: D(d) = DISPARITY_STEP * d.
# The matching cost is computed at every other disparity, hence d_max/2 rows.
DISPARITY_STEP = 2.0


# ---------------------------------------------------------------------------
# event streams


@dataclass
class EventStream:
    """DVS events as int64 rows (t_us, x, y, polarity) plus sensor size.

    Timestamps must be nondecreasing, coordinates in-bounds, polarity +-1.
    Frames derived from a stream are indexed [y, x].
    """

    events: np.ndarray
    height: int
    width: int

    def __post_init__(self):
        ev = np.asarray(self.events, dtype=np.int64)
        if ev.size == 0:
            ev = ev.reshape(0, 4)
        if ev.ndim != 2 or ev.shape[1] != 4:
            raise ValueError(f"events must be (n, 4) rows of (t, x, y, p), got {ev.shape}")
        if self.height < 1 or self.width < 1:
            raise ValueError("sensor size must be positive")
        if np.any(np.diff(ev[:, 0]) < 0):
            raise ValueError("event timestamps must be nondecreasing")
        x, y = ev[:, 1], ev[:, 2]
        if np.any((x < 0) | (x >= self.width) | (y < 0) | (y >= self.height)):
            raise ValueError("event coordinates out of sensor bounds")
        if np.any(np.abs(ev[:, 3]) != 1):
            raise ValueError("event polarity must be +1 or -1")
        self.events = ev

    def __len__(self) -> int:
        return self.events.shape[0]


def sbt_encode(stream: EventStream, num_stacks: int, stack_duration: int) -> np.ndarray:
    """Stacking-based-on-time encoding: (num_stacks, H, W) signed counts.

    Window k covers [t0 + k*duration, t0 + (k+1)*duration) anchored at the
    first event's timestamp; events past the last window fold into the
    final stack so the encoding conserves total signed polarity exactly.
    An empty stream encodes to all-zero stacks.
    """
    if num_stacks < 1:
        raise ValueError("need at least one stack")
    if stack_duration <= 0:
        raise ValueError("stack duration must be positive")
    stacks = np.zeros((num_stacks, stream.height, stream.width))
    if len(stream) == 0:
        return stacks
    ev = stream.events
    k = np.minimum((ev[:, 0] - ev[0, 0]) // stack_duration, num_stacks - 1)
    np.add.at(stacks, (k.astype(int), ev[:, 2], ev[:, 1]), ev[:, 3].astype(float))
    return stacks


# ---------------------------------------------------------------------------
# sub-pixel estimator and loss


def _cost_array(costs) -> np.ndarray:
    c = costs.data if isinstance(costs, Tensor) else np.asarray(costs, dtype=float)
    if c.ndim != 3:
        raise ValueError(f"cost tensor must be (d_max/2, h, w), got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost tensor must be finite")
    return c


def subpixel_estimate(costs, delta: int = 2) -> np.ndarray:
    """Per-pixel disparity D_hat = sum_d D(d) * softmin weights near the argmin.

    The softmin is the softmax of negated costs at temperature 1,
    renormalized over the window |argmin - d| < delta (strict, so delta=2
    keeps three indices; windows are clipped at the tensor edges). Output
    lies within [min, max] of D(d) over each pixel's window.
    """
    c = _cost_array(costs)
    if delta < 1:
        raise ValueError("estimator support delta must be >= 1")
    d_hat = np.argmin(c, axis=0)
    grid = np.arange(c.shape[0])[:, None, None]
    window = np.abs(grid - d_hat[None]) < delta
    z = np.where(window, np.exp(c.min(axis=0, keepdims=True) - c), 0.0)
    weights = z / z.sum(axis=0, keepdims=True)
    return (DISPARITY_STEP * grid * weights).sum(axis=0)


def _laplace_weights(num_disparities: int, mean: np.ndarray, b: float) -> np.ndarray:
    """Laplace density over the D(d) grid, renormalized along d."""
    grid = DISPARITY_STEP * np.arange(num_disparities)
    dist = np.abs(grid[:, None, None] - mean[None])
    z = np.exp((dist.min(axis=0, keepdims=True) - dist) / b)
    return z / z.sum(axis=0, keepdims=True)


def subpixel_cross_entropy(costs, d_gt, b: float = 2.0, mask=None) -> Tensor:
    """Laplace-weighted mean log-softmin of the cost tensor.

    L = (1/|supervised|) sum_{y,x} sum_d Laplace(D(d) | mu=d_gt, b) * log softmin_d C,
    with the Laplace density evaluated at the D(d) grid then renormalized
    over d. Pixels are unsupervised where ``d_gt`` is non-finite or
    ``mask`` is false; supervising no pixel at all is an error. The result
    is differentiable in ``costs``.
    """
    ct = costs if isinstance(costs, Tensor) else Tensor(np.asarray(costs, dtype=float))
    num_d, h, w = _cost_array(ct).shape
    if b <= 0:
        raise ValueError("laplace diversity b must be positive")
    gt = np.asarray(d_gt, dtype=float)
    if gt.ndim == 0:
        gt = np.full((h, w), float(gt))
    if gt.shape != (h, w):
        raise ValueError(f"ground truth shape {gt.shape} does not match costs {(h, w)}")
    valid = np.isfinite(gt)
    if mask is not None:
        valid = valid & np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError("subpixel_cross_entropy: every pixel is masked")
    weights = _laplace_weights(num_d, np.where(valid, gt, 0.0), b) * valid
    log_q = tg.log_softmax(-ct, axis=0)
    return tg.tsum(log_q * Tensor(weights)) * (1.0 / float(valid.sum()))


def disparity_metrics(d_hat, d_gt, focal_baseline: float) -> dict[str, float]:
    """MDE, median depth error, mean disparity error, and 1PA.

    Depth is focal*baseline/disparity; zero-disparity pixels carry no
    depth and are excluded (ground truth zeros from all metrics, estimate
    zeros from the depth errors). 1PA is the fraction of valid pixels with
    |D_hat - D_gt| <= 1. No valid pixel is an error.
    """
    est = np.asarray(d_hat, dtype=float)
    gt = np.asarray(d_gt, dtype=float)
    if est.shape != gt.shape:
        raise ValueError(f"disparity map shapes differ: {est.shape} vs {gt.shape}")
    if focal_baseline <= 0:
        raise ValueError("focal*baseline must be positive")
    valid = gt > 0
    if not valid.any():
        raise ValueError("disparity_metrics: no pixels with positive ground truth")
    err = np.abs(est[valid] - gt[valid])
    depth_ok = valid & (est > 0)
    if not depth_ok.any():
        raise ValueError("disparity_metrics: no pixels with positive estimated disparity")
    depth_err = np.abs(focal_baseline / est[depth_ok] - focal_baseline / gt[depth_ok])
    return {
        "mde": float(depth_err.mean()),
        "median_depth_error": float(np.median(depth_err)),
        "mean_disparity_error": float(err.mean()),
        "one_pixel_accuracy": float((err <= 1.0).mean()),
    }


# ---------------------------------------------------------------------------
# stereo network: siamese feature trellis + correlation matching


def correlation_volume(left: Tensor, right: Tensor, num_disparities: int) -> Tensor:
    """Cost C[:, d, y, x] = -mean_c left[c, y, x] * right[c, y, x - D(d)].

    Features are (n, c, h, w); the result is (n, num_disparities, h, w).
    Columns with x < D(d) have no counterpart in the right view and get
    cost 0, which never undercuts a genuine (negative) correlation of
    nonnegative spiking features.
    """
    if left.shape != right.shape:
        raise ValueError(f"feature shapes differ: {left.shape} vs {right.shape}")
    n, c, h, w = left.shape
    if int(DISPARITY_STEP) * (num_disparities - 1) >= w:
        raise ValueError(f"{num_disparities} disparities need width > {2 * (num_disparities - 1)}")
    planes = []
    for d in range(num_disparities):
        s = int(DISPARITY_STEP) * d
        if s == 0:
            prod = left * right
        else:
            prod = tg.crop(left, (0, 0, 0, s), (n, c, h, w - s)) * tg.crop(
                right, (0, 0, 0, 0), (n, c, h, w - s)
            )
        plane = tg.tmean(prod, axis=1, keepdims=True)
        if s:
            plane = tg.pad2d(plane, (0, 0, s, 0))
        planes.append(-plane)
    return tg.concat(planes, axis=1)


class StereoNet:
    """Shared-weight feature trellis on both views + correlation head.

    The feature net is a ``FixedTrellisNet`` built from a genotype and run
    separately over the left and right stack sequences; time-averaged
    features feed ``correlation_volume``. Trained only on the synthetic
    shifted random-dot toy task (see the harness), where a horizontal
    shift of s pixels between views plants ground-truth disparity s and a
    cost minimum at index s/2.
    """

    def __init__(
        self,
        config: TrellisConfig,
        genotype: Genotype,
        rng: np.random.Generator,
        num_disparities: int = 4,
    ):
        if num_disparities < 2:
            raise ValueError("need at least two disparity indices")
        self.features = FixedTrellisNet(config, genotype, rng)
        self.num_disparities = num_disparities

    def forward_sequence(self, left: list[Tensor], right: list[Tensor]) -> Tensor:
        """Cost volumes (n, num_disparities, h', w') for a batch of pairs."""
        if len(left) != len(right) or not left:
            raise ValueError("left/right sequences must be nonempty and equally long")
        mean_l = _time_mean(self.features.forward_sequence(left))
        mean_r = _time_mean(self.features.forward_sequence(right))
        return correlation_volume(mean_l, mean_r, self.num_disparities)

    def parameters(self) -> list[Tensor]:
        return self.features.parameters()

    def reset_rates(self):
        self.features.reset_rates()

    def firing_rates(self) -> dict[str, float]:
        return self.features.firing_rates()


def _time_mean(frames: list[Tensor]) -> Tensor:
    total = frames[0]
    for f in frames[1:]:
        total = total + f
    return total * (1.0 / float(len(frames)))


def stereo_loss(costs: Tensor, d_gt, b: float = 2.0) -> Tensor:
    """Trainable objective: negated sub-pixel cross entropy, batch mean.

    ``subpixel_cross_entropy`` peaks at 0 for a confident correct volume,
    so gradient descent minimizes its negation. ``costs`` is a batch
    (n, d, h, w); ``d_gt`` holds one scalar or (h, w) map per sample.
    """
    n = costs.shape[0]
    total = None
    for i in range(n):
        one = tg.reshape(tg.crop(costs, (i, 0, 0, 0), (1,) + costs.shape[1:]), costs.shape[1:])
        per = subpixel_cross_entropy(one, d_gt[i], b)
        total = per if total is None else total + per
    return total * (-1.0 / float(n))


# ---------------------------------------------------------------------------
# file formats


def write_events_csv(path, stream: EventStream):
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(stream.events.tolist())


def read_events_csv(path, height: int, width: int) -> EventStream:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row:
                rows.append([int(v) for v in row])
    ev = np.asarray(rows, dtype=np.int64) if rows else np.zeros((0, 4), dtype=np.int64)
    return EventStream(ev, height, width)


def write_events_binary(path, stream: EventStream):
    """Rows of four little-endian int64 values (t, x, y, p), no header."""
    stream.events.astype("<i8").tofile(path)


def read_events_binary(path, height: int, width: int) -> EventStream:
    flat = np.fromfile(path, dtype="<i8")
    if flat.size % 4:
        raise ValueError(f"binary event file holds {flat.size} values, not a multiple of 4")
    return EventStream(flat.reshape(-1, 4), height, width)


def write_pgm(path, values):
    """Binary 16-bit PGM (P5, maxval 65535, big-endian samples)."""
    arr = np.rint(np.asarray(values, dtype=float))
    if arr.ndim != 2:
        raise ValueError("PGM images are 2-D")
    if arr.size and (arr.min() < 0 or arr.max() > 65535):
        raise ValueError("PGM samples must fit in 16 bits")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n65535\n".encode())
        fh.write(arr.astype(">u2").tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().split()[:1] != [b"P5"]:
            raise ValueError("not a binary PGM file")
        fields: list[bytes] = []
        while len(fields) < 3:
            line = fh.readline()
            if not line:
                raise ValueError("truncated PGM header")
            if not line.startswith(b"#"):
                fields.extend(line.split())
        w, h, maxval = (int(v) for v in fields[:3])
        dtype = ">u2" if maxval > 255 else np.uint8
        raster = np.frombuffer(fh.read(), dtype=dtype, count=w * h)
    return raster.reshape(h, w).astype(np.uint16)


def write_disparity_pgm(path, disparity, scale: float = 256.0):
    """Store a disparity map as 16-bit PGM at ``scale`` counts per pixel
    of disparity; values are clipped to the representable range."""
    q = np.rint(np.asarray(disparity, dtype=float) * scale)
    write_pgm(path, np.clip(q, 0, 65535))


def write_metrics_json(path, metrics: dict):
    with open(path, "w") as fh:
        json.dump({k: float(v) for k, v in metrics.items()}, fh, indent=2, sort_keys=True)
        fh.write("\n")
