"""Surrogate-gradient function families for spiking nonlinearities.

A spike is a Heaviside step in the forward pass; during backprop its
derivative is replaced by a smooth, nonnegative surrogate. Four families
are provided, each shaped by a temperature ``b``:

* ``Dspike``     -- scaled/shifted tanh, clamped to [0, 1]
* ``Triangle``   -- piecewise-linear tent
* ``Superspike`` -- squared fast sigmoid
* ``Arctan``     -- Cauchy-shaped bump

Dspike and Triangle are defined on the raw membrane potential with their
peak at the firing threshold (dynamics normalized so V_th = 0.5 by
default); Superspike and Arctan are defined on the centered argument
``x - V_th``. All functions are vectorized over numpy arrays.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

FAMILIES = ("Dspike", "Triangle", "Superspike", "Arctan")

# Lower bound applied wherever a search mutates the temperature; keeps the
# surrogate from degenerating into a flat line.
MIN_TEMPERATURE = 0.1


@dataclass(frozen=True)
class SurrogateSpec:
    """A surrogate family tag plus its temperature and threshold."""

    family: str = "Dspike"
    temperature: float = 3.0
    threshold: float = 0.5
    # The printed Triangle form has support width 2; the conventional tent
    # has width 1/b. Off by default, switchable for ablations.
    triangle_conventional: bool = False

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown surrogate family {self.family!r}; expected one of {FAMILIES}")
        if not np.isfinite(self.temperature) or self.temperature <= 0.0:
            raise ValueError(f"surrogate temperature must be positive, got {self.temperature}")
        if not np.isfinite(self.threshold):
            raise ValueError("surrogate threshold must be finite")

    def with_temperature(self, b: float) -> "SurrogateSpec":
        return dataclasses.replace(self, temperature=b)


def _dspike_coeffs(b: float, v_th: float) -> tuple[float, float]:
    # Solve a*tanh(b(x-c))+d for the boundary conditions value(0)=0, value(1)=1.
    a = 1.0 / (np.tanh(b * (1.0 - v_th)) + np.tanh(b * v_th))
    d = a * np.tanh(b * v_th)
    return a, d


def dspike_forward(x, b: float, v_th: float = 0.5):
    """Smooth spike-shaped ramp: a*tanh(b(x-v_th))+d on [0,1], clamped outside.

    The coefficients a, d are fixed by value(0)=0 and value(1)=1.
    """
    if b <= 0.0:
        raise ValueError(f"temperature must be positive, got {b}")
    x = np.asarray(x, dtype=np.float64)
    a, d = _dspike_coeffs(b, v_th)
    core = a * np.tanh(b * (x - v_th)) + d
    return np.where(x < 0.0, 0.0, np.where(x > 1.0, 1.0, core))


def derivative(spec: SurrogateSpec, x):
    """Backward value of the surrogate at raw membrane potential ``x``.

    Dspike/Triangle peak at ``spec.threshold`` and are evaluated on the raw
    argument; Superspike/Arctan are evaluated on ``x - spec.threshold``.
    """
    x = np.asarray(x, dtype=np.float64)
    b = spec.temperature
    c = spec.threshold
    if spec.family == "Dspike":
        a, _ = _dspike_coeffs(b, c)
        t = np.tanh(b * (x - c))
        val = a * b * (1.0 - t * t)
        # Zero outside the clamped forward's active region.
        return np.where((x >= 0.0) & (x <= 1.0), val, 0.0)
    if spec.family == "Triangle":
        if spec.triangle_conventional:
            return b * np.maximum(0.0, 1.0 - 2.0 * b * np.abs(x - c))
        return b * np.maximum(0.0, 1.0 - np.abs(x - c))
    t = x - c
    if spec.family == "Superspike":
        return 1.0 / (b * np.abs(t) + 1.0) ** 2
    # Arctan
    return (b / 3.0) / (1.0 + (np.pi * t) ** 2)


def antiderivative(spec: SurrogateSpec, x):
    """Smooth primitive of ``derivative``; the forward of the SG-relaxed network.

    Chosen so the value at the threshold is the Dspike midpoint (0.5 for the
    default normalization). Replacing every hard spike with this function
    makes backward() the exact derivative of the forward, which is what the
    finite-difference gradient checks exercise.
    """
    x = np.asarray(x, dtype=np.float64)
    b = spec.temperature
    c = spec.threshold
    if spec.family == "Dspike":
        return dspike_forward(x, b, c)
    t = x - c
    if spec.family == "Triangle":
        if spec.triangle_conventional:
            half = 1.0 / (2.0 * b)
            core = b * t - (b * b) * t * t * np.sign(t)
            return 0.5 + np.where(np.abs(t) <= half, core, np.sign(t) * 0.25)
        core = b * (t - 0.5 * t * t * np.sign(t))
        return 0.5 + np.where(np.abs(t) <= 1.0, core, np.sign(t) * (b / 2.0))
    if spec.family == "Superspike":
        return 0.5 + t / (1.0 + b * np.abs(t))
    # Arctan
    return 0.5 + (b / (3.0 * np.pi)) * np.arctan(np.pi * t)


def candidate_family(spec: SurrogateSpec, n: int, delta_b: float) -> list[SurrogateSpec]:
    """N specs with temperatures centered on spec.temperature, spacing delta_b.

    The middle element is the input spec itself (bitwise-equal temperature).
    """
    if n < 1 or n % 2 == 0:
        raise ValueError(f"candidate count must be odd and positive, got {n}")
    half = (n - 1) // 2
    low = spec.temperature - half * delta_b
    if low <= 0.0:
        raise ValueError(
            f"candidate temperatures must stay positive: b={spec.temperature}, "
            f"N={n}, delta_b={delta_b} gives lower endpoint {low}"
        )
    return [spec.with_temperature(spec.temperature + (i - half) * delta_b) for i in range(n)]
