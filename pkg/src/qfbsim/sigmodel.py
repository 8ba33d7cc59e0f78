"""Stochastic synthesizer of the analog waveform arriving at the ADC.

Models one dispersive-readout channel: a two-level qubit with T1 decay
and thermal excitation, a linear cavity whose complex envelope relaxes
toward a qubit-state-dependent steady state while a square readout pulse
drives it (and toward zero otherwise), and a detection chain collapsed
into a full-scale amplitude, static I/Q offsets and additive white
Gaussian noise.  The carrier sits at a quarter of the sampling rate, so
four consecutive samples step the carrier phase by 90 degrees.

The global demodulation phase is chosen such that the ground/excited
separation of the steady-state envelope lies entirely in the in-phase
component recovered by the digital pipeline, with the excited state on
the non-negative side.
"""

from __future__ import annotations

import bisect
import cmath
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import fxp
from .fxp import ADC_WIDTH, ConfigError, FxpSample

PLANCK = 6.62607015e-34      # J s
BOLTZMANN = 1.380649e-23     # J / K

STATE_G = 0
STATE_E = 1


class Gate(Enum):
    PI_HALF = "pi_half"
    PI = "pi"
    CONDITIONAL_PI = "conditional_pi"


@dataclass(frozen=True)
class DeviceParams:
    """Physical device and detection-chain parameters (SI units).

    kappa and chi are angular rates (rad/s); chi is signed, carrying the
    direction of the dispersive shift.  offset_i/offset_q are static
    offsets of the detected envelope, the source the pipeline's offset
    subtraction exists to cancel.
    """

    f_q: float = 6.148e9
    f_r: float = 7.133e9
    kappa: float = 2 * math.pi * 6.3e6
    chi: float = -2 * math.pi * 1.1e6
    f_if: float = 25e6
    f_s: float = 100e6
    t1: float = 1.4e-6
    p_therm: float = 0.0
    amp_ss: float = 0.6
    noise_sigma: float = 0.0
    offset_i: float = 0.0
    offset_q: float = 0.0

    def __post_init__(self) -> None:
        if self.f_s <= 0 or abs(self.f_if * 4 - self.f_s) > 1e-6 * self.f_s:
            raise ConfigError("synthesizer requires f_if = f_s / 4")
        if not 0.0 <= self.p_therm < 0.5:
            raise ConfigError("p_therm must be within [0, 0.5)")
        if not self.t1 > 0:
            raise ConfigError("t1 must be positive")
        if not self.kappa > 0:
            raise ConfigError("kappa must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    @property
    def sample_period(self) -> float:
        return 1.0 / self.f_s

    def decay_rate(self) -> float:
        """Energy relaxation rate (1/s)."""
        return 0.0 if math.isinf(self.t1) else 1.0 / self.t1

    def excitation_rate(self) -> float:
        """Thermal excitation rate keeping the equilibrium at p_therm."""
        if self.p_therm == 0.0:
            return 0.0
        return self.decay_rate() * self.p_therm / (1.0 - self.p_therm)

    def steady_alpha(self, state: int) -> complex:
        """Steady-state envelope during a pulse for a held qubit state."""
        sigma = 1.0 if state == STATE_G else -1.0
        half_k = self.kappa / 2.0
        return half_k / (half_k + 1j * sigma * self.chi)

    def envelope_rate(self, state: int) -> complex:
        """Complex relaxation rate of the envelope for a held state."""
        sigma = 1.0 if state == STATE_G else -1.0
        return self.kappa / 2.0 + 1j * sigma * self.chi

    def demod_gain(self) -> complex:
        """Maps the cavity envelope onto the detected complex baseband."""
        return 1j * (self.amp_ss / 2.0)


@dataclass(frozen=True)
class PulseSchedule:
    """Square readout pulses and instantaneous gate events for one repetition."""

    readout_pulses: tuple[tuple[float, float], ...]
    gates: tuple[tuple[float, Gate], ...] = ()
    t_start: float = 0.0
    repetition_period: float = 1e-6

    def __post_init__(self) -> None:
        prev_end = -math.inf
        for start, duration in self.readout_pulses:
            if duration <= 0:
                raise ConfigError("pulse durations must be positive")
            if start < prev_end:
                raise ConfigError("readout pulses must be ordered and non-overlapping")
            prev_end = start + duration
        times = [t for t, _ in self.gates]
        if times != sorted(times):
            raise ConfigError("gate events must be time-ordered")
        if self.repetition_period <= 0:
            raise ConfigError("repetition_period must be positive")

    @property
    def t_end(self) -> float:
        return self.t_start + self.repetition_period

    def pulse_on(self, t: float) -> bool:
        return any(s <= t < s + d for s, d in self.readout_pulses)

    def edge_times(self) -> list[float]:
        edges = []
        for s, d in self.readout_pulses:
            edges += [s, s + d]
        return edges


@dataclass(frozen=True)
class QubitTrajectory:
    """Piecewise-constant qubit state over one repetition window.

    segments: (start_time, state) pairs, contiguous and alternating,
    the first starting at the window start.
    """

    segments: tuple[tuple[float, int], ...]
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not self.segments:
            raise ValueError("trajectory needs at least one segment")
        for (t0, s0), (t1, s1) in zip(self.segments, self.segments[1:]):
            if t1 <= t0:
                raise ValueError("segments must be strictly time-ordered")

    def state_at(self, t: float) -> int:
        idx = bisect.bisect_right([seg[0] for seg in self.segments], t) - 1
        return self.segments[max(idx, 0)][1]

    def flip_times(self) -> list[tuple[float, int]]:
        """(time, new_state) for every state change after the window start."""
        return [(t, s) for (t, s) in self.segments[1:]]


def thermal_population(t_env: float, f_q: float) -> float:
    """Equilibrium excited-state population of a two-level system."""
    if not t_env > 0:
        raise ValueError("t_env must be positive")
    x = math.exp(-PLANCK * f_q / (BOLTZMANN * t_env))
    return x / (1.0 + x)


def temperature_from_population(p: float, f_q: float) -> float:
    """Inverse of thermal_population by bisection."""
    if not 0.0 < p < 0.5:
        raise ValueError("population must be within (0, 0.5)")
    lo, hi = 1e-6, 1e3
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if thermal_population(mid, f_q) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _draw_initial(params: DeviceParams, initial, rng) -> int:
    if initial in (STATE_G, "g"):
        return STATE_G
    if initial in (STATE_E, "e"):
        return STATE_E
    if initial == "thermal":
        return STATE_E if rng.random() < params.p_therm else STATE_G
    raise ValueError(f"unknown initial state {initial!r}")


def sample_trajectory(params: DeviceParams, schedule: PulseSchedule, initial,
                      rng, *, feedback_flag: bool = False,
                      seed: int = 0) -> QubitTrajectory:
    """Draw one stochastic trajectory under the gate schedule.

    Jump waiting times are exact exponentials with state-dependent rates
    (decay from e, thermal excitation from g), so there is no time-step
    bias.  Gates act as instantaneous population maps: PI swaps the
    state, PI_HALF re-samples it as e with probability one half
    (projective readout of an equal superposition), and CONDITIONAL_PI
    applies PI only when this repetition's feedback flag is set.
    """
    t = schedule.t_start
    state = _draw_initial(params, initial, rng)
    segments: list[tuple[float, int]] = [(t, state)]
    rates = {STATE_E: params.decay_rate(), STATE_G: params.excitation_rate()}

    def record(time: float, new_state: int) -> None:
        # zero-length segments (gate exactly at an existing event time)
        # collapse into a state replacement
        if segments[-1][0] == time:
            segments[-1] = (time, new_state)
        else:
            segments.append((time, new_state))

    def advance(until: float) -> None:
        nonlocal t, state
        while True:
            rate = rates[state]
            dt = rng.exponential(1.0 / rate) if rate > 0 else math.inf
            if t + dt >= until:
                t = until
                return
            t += dt
            state ^= 1
            record(t, state)

    for gate_time, gate in schedule.gates:
        advance(min(gate_time, schedule.t_end))
        if gate_time >= schedule.t_end:
            break
        if gate is Gate.PI:
            state ^= 1
        elif gate is Gate.PI_HALF:
            state = STATE_E if rng.random() < 0.5 else STATE_G
        elif gate is Gate.CONDITIONAL_PI:
            if feedback_flag:
                state ^= 1
        if state != segments[-1][1]:
            record(t, state)
    advance(schedule.t_end)
    return QubitTrajectory(tuple(segments), rng_seed=seed)


def _propagate(alpha: complex, target: complex, rate: complex, dt: float) -> complex:
    return target + (alpha - target) * cmath.exp(-rate * dt)


def envelope_at_times(params: DeviceParams, schedule: PulseSchedule,
                      trajectory: QubitTrajectory, times) -> np.ndarray:
    """Cavity envelope alpha(t) at sorted query times (exact propagation).

    The envelope relaxes toward the state-dependent steady target while
    a pulse drives the cavity and toward zero otherwise, with the
    state-dependent complex rate; qubit jumps and pulse edges split the
    integration into intervals on which the solution is closed-form.
    alpha is continuous across every event.
    """
    events = sorted(
        [(t, None) for t in schedule.edge_times() if t > schedule.t_start]
        + [(t, s) for t, s in trajectory.flip_times()],
        key=lambda e: e[0],
    )
    out = np.empty(len(times), dtype=complex)
    alpha = 0.0 + 0.0j
    t_prev = schedule.t_start
    state = trajectory.state_at(schedule.t_start)
    k = 0

    def step_to(t_query: float) -> complex:
        target = params.steady_alpha(state) if schedule.pulse_on(t_prev) else 0.0
        return _propagate(alpha, target, params.envelope_rate(state), t_query - t_prev)

    for n, t_q in enumerate(times):
        while k < len(events) and events[k][0] <= t_q:
            ev_t, ev_state = events[k]
            alpha = step_to(ev_t)
            t_prev = ev_t
            if ev_state is not None:
                state = ev_state
            k += 1
        out[n] = step_to(t_q)
    return out


def cavity_envelope(params: DeviceParams, trajectory: QubitTrajectory,
                    pulse: tuple[float, float], t: float) -> complex:
    """Envelope at time t for a single readout pulse (zero before it)."""
    schedule = PulseSchedule(readout_pulses=(pulse,),
                             t_start=min(pulse[0], t, 0.0) - 1e-12,
                             repetition_period=1.0)
    return complex(envelope_at_times(params, schedule, trajectory, [t])[0])


def carrier_tables(n: int, phase_offset: int) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin of the quarter-rate carrier at sample indices 0..n-1."""
    idx = (np.arange(n) + phase_offset) & 3
    cos = np.array([1, 0, -1, 0])[idx]
    sin = np.array([0, 1, 0, -1])[idx]
    return cos, sin


def analog_waveform(params: DeviceParams, schedule: PulseSchedule,
                    trajectory: QubitTrajectory, *,
                    phase_offset: int = 0) -> np.ndarray:
    """Noiseless pre-quantization ADC voltage at every sample instant.

    V(t_n) = Re[2 b(t_n) e^{i pi (n + phase_offset) / 2}] where b is the
    detected complex baseband: the cavity envelope scaled into the
    in-phase separation convention plus the static offsets.  The integer
    phase_offset ties the carrier phase to a downstream demodulator whose
    phase counter started that many samples earlier.
    """
    ts = params.sample_period
    n = round(schedule.repetition_period / ts)
    times = schedule.t_start + np.arange(n) * ts
    alpha = envelope_at_times(params, schedule, trajectory, times)
    b = params.demod_gain() * alpha + complex(params.offset_i, params.offset_q)
    cos, sin = carrier_tables(n, phase_offset)
    return 2.0 * (b.real * cos - b.imag * sin)


@dataclass
class AdcStream:
    """Digitized waveform plus the trigger bit lane."""

    samples: list[FxpSample]
    triggers: list[int]
    saturated_count: int

    def raw_array(self) -> np.ndarray:
        return np.array([s.raw for s in self.samples], dtype=np.int64)

    def dump_csv(self) -> str:
        lines = ["t_ns,raw,tr"]
        for n, (s, tr) in enumerate(zip(self.samples, self.triggers)):
            lines.append(f"{10 * n},{s.raw},{tr}")
        return "\n".join(lines) + "\n"


def quantize_array(volts: np.ndarray) -> tuple[np.ndarray, int]:
    """Vectorized 14-bit ADC quantization; returns (raw, clip_count)."""
    scaled = volts / fxp.ADC_LSB_VOLTS
    rounded = np.where(scaled >= 0, np.floor(scaled + 0.5), np.ceil(scaled - 0.5))
    lo, hi = fxp.raw_bounds(ADC_WIDTH)
    clipped = int(np.count_nonzero((rounded < lo) | (rounded > hi)))
    return np.clip(rounded, lo, hi).astype(np.int64), clipped


def trigger_lane(schedule: PulseSchedule, n: int, ts: float) -> list[int]:
    """1 during the first sample of each readout pulse, else 0."""
    triggers = [0] * n
    for start, _ in schedule.readout_pulses:
        j = round((start - schedule.t_start) / ts)
        if 0 <= j < n:
            triggers[j] = 1
    return triggers


def synthesize_adc_stream(params: DeviceParams, schedule: PulseSchedule,
                          trajectory: QubitTrajectory, rng=None, *,
                          phase_offset: int = 0) -> AdcStream:
    """Digitize the synthesized waveform and emit the trigger lane.

    Additive Gaussian noise of std noise_sigma is applied per sample
    before quantization; quantizer saturation events are counted, not
    fatal.
    """
    volts = analog_waveform(params, schedule, trajectory,
                            phase_offset=phase_offset)
    if params.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an rng")
        volts = volts + rng.normal(0.0, params.noise_sigma, size=len(volts))
    raw, clipped = quantize_array(volts)
    samples = [FxpSample(int(r), ADC_WIDTH) for r in raw]
    triggers = trigger_lane(schedule, len(samples), params.sample_period)
    return AdcStream(samples=samples, triggers=triggers, saturated_count=clipped)
