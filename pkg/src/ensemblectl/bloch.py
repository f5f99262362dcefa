"""Dimensionless Bloch ensemble model.

State is the magnetisation ``M = (Mx, My, Mz)``, the ensemble parameters are
``s = (omega, epsilon)`` (frequency offset and rf scaling) and the two
controls ``(u, v)`` drive rotations about y and x respectively.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

OMEGA_X = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
OMEGA_Y = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
OMEGA_Z = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
for _m in (OMEGA_X, OMEGA_Y, OMEGA_Z):
    _m.setflags(write=False)

AXES = {
    "x": np.array([1.0, 0.0, 0.0]),
    "y": np.array([0.0, 1.0, 0.0]),
    "z": np.array([0.0, 0.0, 1.0]),
    "-x": np.array([-1.0, 0.0, 0.0]),
    "-y": np.array([0.0, -1.0, 0.0]),
    "-z": np.array([0.0, 0.0, -1.0]),
}


@dataclass(frozen=True)
class RotationGenerators:
    omega_x: np.ndarray = OMEGA_X
    omega_y: np.ndarray = OMEGA_Y
    omega_z: np.ndarray = OMEGA_Z


GENERATORS = RotationGenerators()


def commutator(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a @ b - b @ a


@dataclass
class BlochParams:
    """Ensemble and pulse parameters in dimensionless units.

    ``B`` is the frequency half-band (omega in [-B, B]), ``delta`` the rf
    inhomogeneity half-width (epsilon in [1 - delta, 1 + delta]).
    ``frequency_profile`` is added to omega when set, so a single system with
    a time-varying frequency uses ``B = 0``.
    """

    B: float = 1.0
    delta: float = 0.0
    amplitude_bound: float = 2.0
    duration: float = 1.0
    frequency_profile: Optional[Callable] = None

    def __post_init__(self):
        if not (self.B >= 0 and math.isfinite(self.B)):
            raise ValueError(f"B must be finite and >= 0, got {self.B}")
        if not (0.0 <= self.delta < 1.0):
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")
        if not self.amplitude_bound > 0:
            raise ValueError(f"amplitude_bound must be > 0, got {self.amplitude_bound}")
        if not self.duration > 0:
            raise ValueError(f"duration must be > 0, got {self.duration}")

    @property
    def omega_range(self) -> tuple[float, float]:
        return (-self.B, self.B)

    @property
    def epsilon_range(self) -> tuple[float, float]:
        return (1.0 - self.delta, 1.0 + self.delta)

    def omega_eff(self, t, omega):
        if self.frequency_profile is None:
            return omega
        return omega + self.frequency_profile(t)


def generator(omega, epsilon, u, v):
    """Assemble ``omega*Oz + epsilon*u*Oy + epsilon*v*Ox`` with broadcasting.

    Returns an array of shape ``broadcast(...) + (3, 3)``.
    """
    omega, epsilon, u, v = np.broadcast_arrays(
        *(np.asarray(a, dtype=float) for a in (omega, epsilon, u, v))
    )
    eu = epsilon * u
    ev = epsilon * v
    out = np.zeros(omega.shape + (3, 3))
    out[..., 0, 1] = -omega
    out[..., 1, 0] = omega
    out[..., 0, 2] = eu
    out[..., 2, 0] = -eu
    out[..., 1, 2] = -ev
    out[..., 2, 1] = ev
    return out


def _rotate(omega, epsilon, u, v, m):
    # closed form of generator(...) @ m, avoids building 3x3 matrices
    mx, my, mz = m[..., 0], m[..., 1], m[..., 2]
    eu = epsilon * u
    ev = epsilon * v
    return np.stack(
        [-omega * my + eu * mz, omega * mx - ev * mz, -eu * mx + ev * my], axis=-1
    )


def bloch_rhs(t, s, m, control, params: Optional[BlochParams] = None):
    """Right-hand side of the dimensionless Bloch equations.

    Broadcasts over leading axes: ``s[..., 2] = (omega, epsilon)``,
    ``m[..., 3]``, ``control[..., 2] = (u, v)``.
    """
    s = np.asarray(s, dtype=float)
    m = np.asarray(m, dtype=float)
    control = np.asarray(control, dtype=float)
    omega = s[..., 0]
    if params is not None:
        omega = params.omega_eff(np.asarray(t, dtype=float), omega)
    return _rotate(omega, s[..., 1], control[..., 0], control[..., 1], m)


def bloch_jacobians(t, s, m, control, params: Optional[BlochParams] = None):
    """Exact state and control Jacobians of :func:`bloch_rhs`.

    Returns ``(jx, ju)`` with shapes ``(..., 3, 3)`` and ``(..., 3, 2)``.
    """
    s = np.asarray(s, dtype=float)
    m = np.asarray(m, dtype=float)
    control = np.asarray(control, dtype=float)
    omega = s[..., 0]
    if params is not None:
        omega = params.omega_eff(np.asarray(t, dtype=float), omega)
    eps = s[..., 1]
    jx = generator(omega, eps, control[..., 0], control[..., 1])
    eps_b = np.broadcast_to(eps, np.broadcast_shapes(eps.shape, m.shape[:-1]))[..., None]
    ju = np.stack([eps_b * (m @ OMEGA_Y.T), eps_b * (m @ OMEGA_X.T)], axis=-1)
    return jx, ju


def ad_chain(omega: float, k: int) -> np.ndarray:
    """Iterated commutator ``ad^k_{omega*Oz}(Oy)``."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    drift = omega * OMEGA_Z
    out = OMEGA_Y.copy()
    for _ in range(k):
        out = commutator(drift, out)
    return out


def ad_chain_closed_form(omega: float, k: int) -> np.ndarray:
    """Closed form of :func:`ad_chain`: odd k gives x-rotations, even k y-rotations."""
    if k == 0:
        return OMEGA_Y.copy()
    if k % 2 == 1:
        j = (k + 1) // 2
        return (-1) ** j * omega**k * OMEGA_X
    j = k // 2
    return (-1) ** j * omega**k * OMEGA_Y


# -- validation integrator -------------------------------------------------


def simulate(
    params: BlochParams,
    controls: Callable,
    initial,
    samples,
    steps: int = 4000,
    duration: Optional[float] = None,
    return_path: bool = False,
):
    """Integrate the Bloch ensemble with fixed-step classical RK4.

    Parameters
    ----------
    controls : callable
        Vectorised ``t -> (len(t), 2)`` array of ``(u, v)`` on ``[0, duration]``.
    initial : array, shape (3,) or (K, 3)
        Initial magnetisation, shared or per sample.
    samples : array, shape (K, 2)
        ``(omega, epsilon)`` pairs, integrated simultaneously.
    steps : int
        Number of RK4 steps, at least 100.

    Returns
    -------
    ndarray, shape (K, 3)
        Terminal magnetisation per sample (or the full ``(steps+1, K, 3)`` path).
    """
    if steps < 100:
        raise ValueError(f"steps must be >= 100, got {steps}")
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    T = params.duration if duration is None else float(duration)
    h = T / steps
    tgrid = np.linspace(0.0, T, 2 * steps + 1)
    uv = np.asarray(controls(tgrid), dtype=float).reshape(len(tgrid), 2)
    if not np.all(np.isfinite(uv)):
        raise ValueError("control interpolant returned non-finite values")
    omega0 = samples[:, 0]
    eps = samples[:, 1]
    if params.frequency_profile is not None:
        omega_t = omega0[None, :] + np.asarray(params.frequency_profile(tgrid), dtype=float).reshape(-1, 1)
    else:
        omega_t = np.broadcast_to(omega0, (len(tgrid), len(omega0)))

    m = np.broadcast_to(np.asarray(initial, dtype=float), samples.shape[:1] + (3,)).copy()
    path = [m.copy()] if return_path else None

    def f(i, state):
        return _rotate(omega_t[i], eps, uv[i, 0], uv[i, 1], state)

    for n in range(steps):
        i0, im, i1 = 2 * n, 2 * n + 1, 2 * n + 2
        k1 = f(i0, m)
        k2 = f(im, m + 0.5 * h * k1)
        k3 = f(im, m + 0.5 * h * k2)
        k4 = f(i1, m + h * k3)
        m = m + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if path is not None:
            path.append(m.copy())
    if not np.all(np.isfinite(m)):
        raise FloatingPointError("RK4 integration produced non-finite states")
    return np.stack(path) if path is not None else m


def piecewise_constant_controls(times, values):
    """Zero-order-hold control callable, handy for tests and CSV pulses."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)

    def controls(t):
        idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 1)
        return values[idx]

    return controls


def linear_controls(times, values):
    """Piecewise-linear interpolation of sampled ``(u, v)``."""
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)

    def controls(t):
        t = np.asarray(t, dtype=float)
        return np.stack([np.interp(t, times, values[:, 0]), np.interp(t, times, values[:, 1])], axis=-1)

    return controls


# -- physical units ----------------------------------------------------------


@dataclass
class PhysicalPulse:
    """Pulse in lab units: time (s), amplitude (Hz) and phase (rad) per sample."""

    times: np.ndarray
    amplitude_hz: np.ndarray
    phase: np.ndarray
    nominal_amplitude_hz: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.amplitude_hz = np.asarray(self.amplitude_hz, dtype=float)
        self.phase = np.asarray(self.phase, dtype=float)
        if np.any(self.amplitude_hz < 0):
            raise ValueError("amplitudes must be non-negative")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_seconds", "amplitude_hz", "phase_rad"])
            for row in zip(self.times, self.amplitude_hz, self.phase):
                w.writerow([f"{x:.12g}" for x in row])

    @classmethod
    def from_csv(cls, path, nominal_amplitude_hz: float) -> "PhysicalPulse":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return cls(data[:, 0], data[:, 1], data[:, 2], nominal_amplitude_hz)


def dimensionless_to_seconds(tau, nominal_amplitude_hz: float):
    """``t = tau / (2 pi A)``."""
    return np.asarray(tau, dtype=float) / (2.0 * np.pi * nominal_amplitude_hz)


def to_physical(pulse, nominal_amplitude_hz: float) -> PhysicalPulse:
    """Convert a dimensionless pulse to lab units.

    ``pulse`` is anything with ``times`` and ``controls`` attributes (e.g. a
    ``PulseSolution``) or a ``(times, controls)`` pair.
    """
    if isinstance(pulse, tuple):
        times, controls = pulse
    else:
        times, controls = pulse.times, pulse.controls
    if not nominal_amplitude_hz > 0:
        raise ValueError("nominal amplitude must be positive")
    controls = np.asarray(controls, dtype=float).reshape(-1, 2)
    u, v = controls[:, 0], controls[:, 1]
    return PhysicalPulse(
        times=dimensionless_to_seconds(times, nominal_amplitude_hz),
        amplitude_hz=nominal_amplitude_hz * np.hypot(u, v),
        phase=np.arctan2(v, u),
        nominal_amplitude_hz=nominal_amplitude_hz,
    )


def from_physical(pulse: PhysicalPulse, nominal_amplitude_hz: Optional[float] = None):
    """Inverse of :func:`to_physical`: returns ``(tau, controls)``."""
    amp = pulse.nominal_amplitude_hz if nominal_amplitude_hz is None else nominal_amplitude_hz
    if not amp > 0:
        raise ValueError("nominal amplitude must be positive")
    tau = pulse.times * (2.0 * np.pi * amp)
    mag = pulse.amplitude_hz / amp
    controls = np.stack([mag * np.cos(pulse.phase), mag * np.sin(pulse.phase)], axis=-1)
    return tau, controls
