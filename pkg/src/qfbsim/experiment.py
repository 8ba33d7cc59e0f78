"""Closed-loop qubit-initialization experiment on top of the DSP model.

One repetition spans a 660 ns window sampled on the 10 ns ADC grid:

    t < 0        idle, qubit in its initial state
    t = 0        optional init gate, first readout pulse M1 starts (160 ns)
    t = tau_RO   first integration window (l samples) ends; threshold
                 comparison produces the feedback bit
    t = t_pi     conditional pi pulse center: applied iff the feedback
                 bit fired and feedback is enabled
    t = 360 ns   second readout pulse M2, second integration window

The ADC stream reaching the pipeline lags the trigger lane by a fixed
six-sample transport skew; the pipeline's trigger synchronizer depth
matches it, which is what lines the integration window up with the
readout pulse.

run_experiment drives a vectorized Monte Carlo of the full loop (exact
exponential jump times, closed-form cavity envelope propagation, the
bit-exact batch pipeline) and reports quadrant statistics next to an
independent analytic rate-equation prediction.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import histo, sigmodel
from .fxp import ADC_LSB_VOLTS, ConfigError, FxpSample, quantize
from .histo import HistogramRam, Mode, bin7_raw_array
from .latency import CLOCK_PERIOD_NS, LatencyBudget, tau_eltot, total_feedback_latency
from .pipeline import FILTER_WIDTH, PipelineConfig, run_stream_batch
from .sigmodel import STATE_E, STATE_G, DeviceParams, carrier_tables, quantize_array

NS = 1e-9
TICK_NS = 10
ADC_SKEW_TICKS = 6          # ADC samples in flight ahead of the trigger lane
CARRIER_PHASE_OFFSET = ADC_SKEW_TICKS
GRID_START_NS = -80
N_SOURCE = 66               # samples per repetition window
N_TICKS = N_SOURCE + ADC_SKEW_TICKS
PULSE_NS = 160
M1_START_NS = 0
M2_START_NS = 360
TRIG1_TICK = (M1_START_NS - GRID_START_NS) // TICK_NS
TRIG2_TICK = (M2_START_NS - GRID_START_NS) // TICK_NS
CHUNK_REPS = 4096

PI_HALF_INIT = "pi_half_init"
THERMAL_INIT = "thermal_init"
SCENARIOS = (PI_HALF_INIT, THERMAL_INIT)

QUADRANT_KEYS = ("gg", "ge", "eg", "ee")

# fb fires on a non-negative in-phase value regardless of quadrature;
# fb2 is its complement (ground-state identification)
FEEDBACK_LUT = (1, 1, 0, 0)
COMPLEMENT_LUT = (0, 0, 1, 1)


class CalibrationError(RuntimeError):
    """A calibration target cannot be reached with this configuration."""


def threshold_sample(threshold_volts: float) -> FxpSample:
    """Threshold quantized onto the filtered-signal grid."""
    return quantize(threshold_volts, FILTER_WIDTH)


def build_pipeline_config(device: DeviceParams, threshold_volts: float,
                          *, delay: int = 10, window_len: int = 4,
                          scale_shift: int = 3) -> PipelineConfig:
    """Pipeline setup matching the experiment's demodulation frame.

    The threshold becomes the in-phase offset (so the sign bit of the
    scaled output is the state decision) and the quadrature offset
    cancels the state-independent component of the filtered signal.
    """
    c_i = threshold_sample(threshold_volts)
    q_mean = (device.amp_ss / 2.0) * device.steady_alpha(STATE_G).real + device.offset_q
    c_q = quantize(q_mean, FILTER_WIDTH)
    return PipelineConfig(window_len=window_len, delay=delay, c_i=c_i, c_q=c_q,
                          s_i=scale_shift, s_q=scale_shift,
                          lut1=FEEDBACK_LUT, lut2=COMPLEMENT_LUT,
                          sync_depth=ADC_SKEW_TICKS)


@dataclass(frozen=True)
class ExperimentConfig:
    device: DeviceParams
    scenario: str
    feedback_enabled: bool = True
    repetitions: int = 1 << 17
    master_seed: int = 1
    threshold_volts: float = 0.016
    pipeline: PipelineConfig | None = None
    latency_budget: LatencyBudget = field(default_factory=LatencyBudget)

    def __post_init__(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be at least 1")
        if self.pipeline is None:
            object.__setattr__(self, "pipeline", build_pipeline_config(
                self.device, self.threshold_volts))
        pipe = self.pipeline
        if pipe.c_i.raw != threshold_sample(self.threshold_volts).raw:
            raise ConfigError("pipeline in-phase offset does not match threshold_volts")
        if pipe.sync_depth != ADC_SKEW_TICKS:
            raise ConfigError(
                f"trigger synchronizer depth must equal the ADC transport "
                f"skew of {ADC_SKEW_TICKS} samples")
        if pipe.delay * TICK_NS > PULSE_NS:
            raise ConfigError("integration end (delay * 10 ns) falls beyond the pulse")
        if pipe.delay < pipe.window_len:
            raise ConfigError("integration window starts before the pulse")

    @property
    def tau_ro_ns(self) -> int:
        """Readout duration: pulse start to integration-window end."""
        return self.pipeline.delay * TICK_NS

    @property
    def window_center_ns(self) -> float:
        """Integration-window center, relative to the pulse start."""
        return self.tau_ro_ns - self.pipeline.window_len * TICK_NS / 2.0

    @property
    def t_pi_ns(self) -> float:
        """Conditional pulse center: readout end plus the electronic
        chain, halfway into the actuator pulse."""
        el, _ = tau_eltot(self.latency_budget)
        return self.tau_ro_ns + el + self.latency_budget.tau_ap / 2.0

    def eval_tick(self, trigger_tick: int) -> int:
        """Pipeline tick whose outputs form a readout event for a
        trigger asserted at trigger_tick."""
        return trigger_tick + self.pipeline.sync_depth + 2 + self.pipeline.delay


@dataclass(frozen=True)
class _Protocol:
    """What happens inside one repetition window."""

    init_gate: str              # "none" | "pi" | "pi_half"
    double: bool = True         # second readout pulse present
    conditional: bool = True    # conditional pi wired to the feedback bit


@dataclass
class _McResult:
    n: int
    it1: np.ndarray
    qt1: np.ndarray
    fb1: np.ndarray
    it2: np.ndarray | None
    qt2: np.ndarray | None
    saturated: int


# ---------------------------------------------------------------------------
# vectorized trajectory + envelope engine


def _grid_times_s() -> np.ndarray:
    return (GRID_START_NS + TICK_NS * np.arange(N_SOURCE)) * NS


def _sample_jump_columns(rng, state: np.ndarray, a: float, b: float,
                         gamma_down: float, gamma_up: float):
    """Exact exponential jump times for every repetition within [a, b).

    Returns a list of chronological event columns: each is a (reps,)
    array of jump times with +inf where that repetition has no further
    jump.  A fresh full-size exponential column is consumed per
    iteration so the draw layout depends only on the worst repetition.
    """
    cols = []
    state = state.copy()
    t = np.full(state.shape, a)
    active = np.ones(state.shape, dtype=bool)
    while True:
        rates = np.where(state == STATE_E, gamma_down, gamma_up)
        u = rng.exponential(1.0, size=state.shape)
        with np.errstate(divide="ignore"):
            dt = np.where(rates > 0, u / np.maximum(rates, 1e-300), np.inf)
        t_next = t + dt
        jump = active & (t_next < b)
        if not jump.any():
            break
        cols.append(np.where(jump, t_next, np.inf))
        state[jump] ^= 1
        t = np.where(jump, t_next, t)
        active = jump
    return cols


class _EnvelopeFiller:
    """Propagates the batch cavity envelope across one repetition."""

    def __init__(self, device: DeviceParams, reps: int):
        self.a_g = device.steady_alpha(STATE_G)
        self.a_e = device.steady_alpha(STATE_E)
        self.lam_g = device.envelope_rate(STATE_G)
        self.lam_e = device.envelope_rate(STATE_E)
        self.alpha = np.zeros(reps, dtype=complex)
        self.grid = _grid_times_s()
        self.out = np.zeros((reps, N_SOURCE), dtype=complex)

    def _step(self, alpha, state, t_from, t_to, pulse_on):
        lam = np.where(state == STATE_G, self.lam_g, self.lam_e)
        if pulse_on:
            target = np.where(state == STATE_G, self.a_g, self.a_e)
        else:
            target = 0.0
        return target + (alpha - target) * np.exp(-lam * (t_to - t_from))

    def run_segment(self, state: np.ndarray, a: float, b: float,
                    pulse_on: bool, cols) -> np.ndarray:
        """Fill grid points inside [a, b) and advance alpha to b.

        cols are chronological per repetition, so each grid point is
        evaluated exactly once: right before the first event past it.
        """
        state = state.copy()
        idx = np.flatnonzero((self.grid >= a) & (self.grid < b))
        t_cur = np.full(state.shape, a)
        filled = np.zeros((state.shape[0], idx.size), dtype=bool)
        for times in [*cols, None]:
            bound = np.full(state.shape, np.inf) if times is None else times
            for jj, j in enumerate(idx):
                gt = self.grid[j]
                need = (gt < bound) & ~filled[:, jj]
                if need.any():
                    self.out[need, j] = self._step(
                        self.alpha[need], state[need], t_cur[need], gt, pulse_on)
                    filled[:, jj] |= need
            if times is not None:
                valid = np.isfinite(times)
                if valid.any():
                    self.alpha[valid] = self._step(
                        self.alpha[valid], state[valid], t_cur[valid],
                        times[valid], pulse_on)
                    t_cur = np.where(valid, times, t_cur)
                    state = np.where(valid, state ^ 1, state)
        self.alpha = self._step(self.alpha, state, t_cur, b, pulse_on)
        return state


def _phase_a_segments(cfg: ExperimentConfig):
    t_pi = cfg.t_pi_ns * NS
    return [(GRID_START_NS * NS, M1_START_NS * NS, False),
            (M1_START_NS * NS, (M1_START_NS + PULSE_NS) * NS, True),
            ((M1_START_NS + PULSE_NS) * NS, t_pi, False)]


def _phase_b_segments(cfg: ExperimentConfig, double: bool):
    t_pi = cfg.t_pi_ns * NS
    t_end = (GRID_START_NS + N_SOURCE * TICK_NS) * NS
    if not double:
        return [(t_pi, t_end, False)]
    return [(t_pi, M2_START_NS * NS, False),
            (M2_START_NS * NS, (M2_START_NS + PULSE_NS) * NS, True),
            ((M2_START_NS + PULSE_NS) * NS, t_end, False)]


def _waveform_volts(device: DeviceParams, alpha_grid: np.ndarray,
                    cols: slice) -> np.ndarray:
    cos, sin = carrier_tables(N_SOURCE, CARRIER_PHASE_OFFSET)
    b = device.demod_gain() * alpha_grid[:, cols] \
        + complex(device.offset_i, device.offset_q)
    return 2.0 * (b.real * cos[cols] - b.imag * sin[cols])


def _trigger_lane(double: bool, ticks: int) -> np.ndarray:
    tr = np.zeros(ticks, dtype=np.int64)
    tr[TRIG1_TICK] = 1
    if double:
        tr[TRIG2_TICK] = 1
    return tr


def _to_pipeline_stream(raw: np.ndarray, ticks: int) -> np.ndarray:
    """Apply the ADC transport skew: tick n carries source sample n-6."""
    reps = raw.shape[0]
    stream = np.zeros((reps, ticks), dtype=np.int64)
    stream[:, ADC_SKEW_TICKS:ADC_SKEW_TICKS + raw.shape[1]] = raw
    return stream


def _run_chunk(cfg: ExperimentConfig, protocol: _Protocol, stream_id: int,
               chunk_idx: int, reps: int):
    """One deterministic batch of repetitions.

    Draw order is fixed: per-sample noise, initial states, first-phase
    jumps (with the init-gate draw at t = 0), then - after the feedback
    bit is known from the pipeline - the conditional pi and the
    second-phase jumps.  Nothing after the first phase influences the
    first readout, so the first-measurement statistics are bit-identical
    between feedback-on and feedback-off runs of the same seed.
    """
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.master_seed & 0xFFFFFFFFFFFFFFFF,
                                stream_id, chunk_idx]))
    dev = cfg.device
    sigma = dev.noise_sigma
    noise = rng.normal(0.0, sigma, size=(reps, N_SOURCE)) if sigma > 0 else None
    state = (rng.random(reps) < dev.p_therm).astype(np.uint8)

    gamma_down = dev.decay_rate()
    gamma_up = dev.excitation_rate()
    filler = _EnvelopeFiller(dev, reps)

    for seg_idx, (a, b, on) in enumerate(_phase_a_segments(cfg)):
        if seg_idx == 1:
            if protocol.init_gate == "pi_half":
                state = (rng.random(reps) < 0.5).astype(np.uint8)
            elif protocol.init_gate == "pi":
                state = state ^ 1
        cols = _sample_jump_columns(rng, state, a, b, gamma_down, gamma_up)
        state = filler.run_segment(state, a, b, on, cols)

    # first readout: quantize the part of the window decided so far and
    # run the pipeline just past the first evaluation tick
    n_a = np.flatnonzero(filler.grid < cfg.t_pi_ns * NS).size
    v_a = _waveform_volts(dev, filler.out, slice(0, n_a))
    if noise is not None:
        v_a = v_a + noise[:, :n_a]
    raw_a, sat_a = quantize_array(v_a)
    m1 = cfg.eval_tick(TRIG1_TICK)
    ticks_a = n_a + ADC_SKEW_TICKS
    bt_a = run_stream_batch(cfg.pipeline, _to_pipeline_stream(raw_a, ticks_a),
                            _trigger_lane(False, ticks_a))
    fb1 = bt_a.fb[:, m1 + 1]

    flip = fb1.astype(bool) if (protocol.conditional and cfg.feedback_enabled) \
        else np.zeros(reps, dtype=bool)
    state = np.where(flip, state ^ 1, state)

    for a, b, on in _phase_b_segments(cfg, protocol.double):
        cols = _sample_jump_columns(rng, state, a, b, gamma_down, gamma_up)
        state = filler.run_segment(state, a, b, on, cols)

    v_b = _waveform_volts(dev, filler.out, slice(n_a, N_SOURCE))
    if noise is not None:
        v_b = v_b + noise[:, n_a:]
    raw_b, sat_b = quantize_array(v_b)
    raw = np.hstack([raw_a, raw_b])

    bt = run_stream_batch(cfg.pipeline, _to_pipeline_stream(raw, N_TICKS),
                          _trigger_lane(protocol.double, N_TICKS))
    if not np.array_equal(bt.fb[:, m1 + 1], fb1):
        raise RuntimeError("feedback preview diverged from the full pipeline run")

    it1 = bt.i_t[:, m1]
    qt1 = bt.q_t[:, m1]
    it2 = qt2 = None
    if protocol.double:
        m2 = cfg.eval_tick(TRIG2_TICK)
        it2 = bt.i_t[:, m2]
        qt2 = bt.q_t[:, m2]
    return it1, qt1, fb1, it2, qt2, int(sat_a + sat_b)


def _run_mc(cfg: ExperimentConfig, protocol: _Protocol, *, stream_id: int = 0,
            jobs: int = 1) -> _McResult:
    sizes = []
    remaining = cfg.repetitions
    while remaining > 0:
        sizes.append(min(CHUNK_REPS, remaining))
        remaining -= sizes[-1]
    args = [(cfg, protocol, stream_id, idx, size)
            for idx, size in enumerate(sizes)]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_run_chunk_star, args, chunksize=1))
    else:
        parts = [_run_chunk(*a) for a in args]
    it1 = np.concatenate([p[0] for p in parts])
    qt1 = np.concatenate([p[1] for p in parts])
    fb1 = np.concatenate([p[2] for p in parts])
    it2 = qt2 = None
    if protocol.double:
        it2 = np.concatenate([p[3] for p in parts])
        qt2 = np.concatenate([p[4] for p in parts])
    saturated = sum(p[5] for p in parts)
    return _McResult(n=cfg.repetitions, it1=it1, qt1=qt1, fb1=fb1,
                     it2=it2, qt2=qt2, saturated=saturated)


def _run_chunk_star(args):
    return _run_chunk(*args)


# ---------------------------------------------------------------------------
# analytic oracle


def _propagate_excited(pe: float, dt_s: float, device: DeviceParams) -> float:
    """Excited-state population after dt of free evolution."""
    if math.isinf(device.t1) or dt_s <= 0:
        return pe
    g_tot = device.decay_rate() + device.excitation_rate()
    p_eq = device.p_therm
    return p_eq + (pe - p_eq) * math.exp(-g_tot * dt_s)


def noiseless_filtered_means(cfg: ExperimentConfig) -> tuple[float, float]:
    """Filtered in-phase means (volts) for held ground/excited qubits.

    Runs the actual pipeline on the noiseless synthesized stream, so the
    demodulation transient across the integration window is included.
    """
    dev = replace(cfg.device, noise_sigma=0.0)
    sched = sigmodel.PulseSchedule(
        readout_pulses=((M1_START_NS * NS, PULSE_NS * NS),),
        t_start=GRID_START_NS * NS,
        repetition_period=N_SOURCE * TICK_NS * NS)
    m1 = cfg.eval_tick(TRIG1_TICK)
    means = []
    for state in (STATE_G, STATE_E):
        traj = sigmodel.QubitTrajectory(((GRID_START_NS * NS, state),))
        volts = sigmodel.analog_waveform(dev, sched, traj,
                                         phase_offset=CARRIER_PHASE_OFFSET)
        raw, _ = quantize_array(volts)
        bt = run_stream_batch(cfg.pipeline,
                              _to_pipeline_stream(raw[np.newaxis, :], N_TICKS),
                              _trigger_lane(False, N_TICKS))
        means.append(float(bt.i[0, m1]) * ADC_LSB_VOLTS)
    return means[0], means[1]


def _gauss_tail(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def overlap_probability(cfg: ExperimentConfig,
                        noise_sigma: float | None = None) -> float:
    """Expected state-misidentification probability from noise overlap.

    The filtered noise is Gaussian with std sigma / sqrt(2 l) (only half
    of the window samples carry each quadrature); the overlap is the
    equal-prior average of the two tail masses across the threshold.
    """
    sigma = cfg.device.noise_sigma if noise_sigma is None else noise_sigma
    if sigma == 0:
        return 0.0
    mu_g, mu_e = noiseless_filtered_means(cfg)
    c = cfg.pipeline.c_i.raw * ADC_LSB_VOLTS
    sigma_f = sigma / math.sqrt(2 * cfg.pipeline.window_len)
    return 0.5 * (_gauss_tail((c - mu_g) / sigma_f)
                  + _gauss_tail((mu_e - c) / sigma_f))


def calibrate_noise(target_overlap: float, cfg: ExperimentConfig) -> float:
    """Per-sample noise std that produces the requested overlap error.

    Bisection against the analytic overlap; the result reproduces the
    target within 0.001 absolute.
    """
    if target_overlap <= 0:
        raise ValueError("target overlap must be positive")
    if target_overlap >= 0.5:
        raise CalibrationError("overlap targets of 50% or more are unattainable")
    mu_g, mu_e = noiseless_filtered_means(cfg)
    c = cfg.pipeline.c_i.raw * ADC_LSB_VOLTS
    if not mu_g < c < mu_e:
        raise CalibrationError(
            "threshold lies outside the g/e separation; overlap cannot be tuned")
    lo, hi = 0.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if overlap_probability(cfg, mid) < target_overlap:
            lo = mid
        else:
            hi = mid
    sigma = 0.5 * (lo + hi)
    if abs(overlap_probability(cfg, sigma) - target_overlap) > 1e-3:
        raise CalibrationError("noise calibration did not converge")
    return sigma


def oracle_probabilities(cfg: ExperimentConfig) -> dict:
    """Rate-equation prediction of the report probabilities.

    Populations propagate with the total relaxation rate toward the
    thermal equilibrium, the first measurement projects the state at the
    integration-window center, readout misidentification enters as a
    symmetric flip with probability overlap/2, and the conditional pi
    acts as an ideal population swap on feedback-on records.
    """
    dev = cfg.device
    eps = overlap_probability(cfg) / 2.0
    c1 = cfg.window_center_ns * NS
    c2 = (M2_START_NS + cfg.window_center_ns) * NS
    t_pi = cfg.t_pi_ns * NS

    pe0 = 0.5 if cfg.scenario == PI_HALF_INIT else dev.p_therm
    pe_c1 = _propagate_excited(pe0, c1, dev)

    quadrants = dict.fromkeys(QUADRANT_KEYS, 0.0)
    for actual_e, p_actual in ((True, pe_c1), (False, 1.0 - pe_c1)):
        for read_e in (True, False):
            p_read = (1.0 - eps) if read_e == actual_e else eps
            branch = p_actual * p_read
            if branch == 0.0:
                continue
            pe = 1.0 if actual_e else 0.0
            pe = _propagate_excited(pe, t_pi - c1, dev)
            if cfg.feedback_enabled and read_e:
                pe = 1.0 - pe
            pe = _propagate_excited(pe, c2 - t_pi, dev)
            # both read probabilities are formed the same way so that the
            # feedback swap identity holds bit for bit
            p_read_e2 = pe * (1.0 - eps) + (1.0 - pe) * eps
            p_read_g2 = (1.0 - pe) * (1.0 - eps) + pe * eps
            first = "e" if read_e else "g"
            quadrants[first + "e"] += branch * p_read_e2
            quadrants[first + "g"] += branch * p_read_g2
    return {
        "p_e1": quadrants["eg"] + quadrants["ee"],
        "p_e2": quadrants["ge"] + quadrants["ee"],
        "quadrants": quadrants,
        "readout_flip": eps,
    }


# ---------------------------------------------------------------------------
# reports


@dataclass
class ExperimentReport:
    scenario: str
    feedback_enabled: bool
    repetitions: int
    master_seed: int
    p_e1: float
    p_e1_err: float
    p_e2: float
    p_e2_err: float
    quadrants: dict
    quadrant_errs: dict
    oracle: dict
    latency: dict
    config_echo: dict
    adc_saturated: int
    histogram: HistogramRam = field(repr=False, default=None)

    def to_json(self) -> str:
        doc = {k: v for k, v in asdict(self).items() if k != "histogram"}
        return json.dumps(doc, sort_keys=True, indent=2)


def _binomial_err(p: float, n: int) -> float:
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def _latency_echo(cfg: ExperimentConfig) -> dict:
    b = cfg.latency_budget
    el, el_u = tau_eltot(b)
    fb, fb_u = total_feedback_latency(b)
    return {
        "components_ns": b.components(),
        "uncertainties_ns": b.uncertainties(),
        "tau_awg_inferred": b.awg_inferred,
        "tau_eltot_ns": [el, el_u],
        "tau_fb_ns": [fb, fb_u],
        "tau_ro_ns": cfg.tau_ro_ns,
        "conditional_pulse_center_ns": cfg.t_pi_ns,
    }


def _config_echo(cfg: ExperimentConfig) -> dict:
    pipe = cfg.pipeline
    return {
        "device": {k: (v if not isinstance(v, float) or math.isfinite(v) else "inf")
                   for k, v in asdict(cfg.device).items()},
        "pipeline": {
            "window_len": pipe.window_len,
            "delay": pipe.delay,
            "c_i_raw": pipe.c_i.raw,
            "c_q_raw": pipe.c_q.raw,
            "s_i": pipe.s_i,
            "s_q": pipe.s_q,
            "lut1": list(pipe.lut1),
            "lut2": list(pipe.lut2),
            "sync_depth": pipe.sync_depth,
        },
        "threshold_volts": cfg.threshold_volts,
        "threshold_raw": pipe.c_i.raw,
    }


def _protocol_for(cfg: ExperimentConfig) -> _Protocol:
    gate = "pi_half" if cfg.scenario == PI_HALF_INIT else "none"
    return _Protocol(init_gate=gate, double=True, conditional=True)


def _correlation_addresses(res: _McResult, seg: int) -> np.ndarray:
    b1 = bin7_raw_array(res.it1)
    b2 = bin7_raw_array(res.it2)
    q5 = bin7_raw_array(res.qt2) >> 2
    return (((b2.astype(np.int64) << 5 | q5) << 7 | b1) << 2) | seg


def _assemble_report(cfg: ExperimentConfig, res: _McResult,
                     ram: HistogramRam) -> ExperimentReport:
    n = res.n
    e1 = res.it1 >= 0
    e2 = res.it2 >= 0
    counts = {
        "gg": int(np.count_nonzero(~e1 & ~e2)),
        "ge": int(np.count_nonzero(~e1 & e2)),
        "eg": int(np.count_nonzero(e1 & ~e2)),
        "ee": int(np.count_nonzero(e1 & e2)),
    }
    quadrants = {k: counts[k] / n for k in QUADRANT_KEYS}
    p_e1 = quadrants["eg"] + quadrants["ee"]
    p_e2 = quadrants["ge"] + quadrants["ee"]
    return ExperimentReport(
        scenario=cfg.scenario,
        feedback_enabled=cfg.feedback_enabled,
        repetitions=n,
        master_seed=cfg.master_seed,
        p_e1=p_e1,
        p_e1_err=_binomial_err(p_e1, n),
        p_e2=p_e2,
        p_e2_err=_binomial_err(p_e2, n),
        quadrants=quadrants,
        quadrant_errs={k: _binomial_err(quadrants[k], n) for k in QUADRANT_KEYS},
        oracle=oracle_probabilities(cfg),
        latency=_latency_echo(cfg),
        config_echo=_config_echo(cfg),
        adc_saturated=res.saturated,
        histogram=ram,
    )


def run_experiment(cfg: ExperimentConfig, *, jobs: int = 1) -> ExperimentReport:
    """Simulate the full two-measurement feedback protocol."""
    res = _run_mc(cfg, _protocol_for(cfg), stream_id=0, jobs=jobs)
    ram = HistogramRam(Mode.CORRELATION, segment_count=1)
    ram.update_addresses(_correlation_addresses(res, seg=0))
    return _assemble_report(cfg, res, ram)


@dataclass
class FeedbackComparison:
    off: ExperimentReport
    on: ExperimentReport
    histogram: HistogramRam   # segment 0: feedback off, segment 1: on


def run_feedback_comparison(cfg: ExperimentConfig, *,
                            jobs: int = 1) -> FeedbackComparison:
    """Same-seed feedback-off and feedback-on runs sharing one histogram."""
    ram = HistogramRam(Mode.CORRELATION, segment_count=2)
    reports = []
    for seg, enabled in enumerate((False, True)):
        sub = replace(cfg, feedback_enabled=enabled)
        res = _run_mc(sub, _protocol_for(sub), stream_id=0, jobs=jobs)
        ram.update_addresses(_correlation_addresses(res, seg=seg))
        reports.append(_assemble_report(sub, res, ram))
    return FeedbackComparison(off=reports[0], on=reports[1], histogram=ram)


# ---------------------------------------------------------------------------
# fidelity and threshold calibration


@dataclass
class ReadoutFidelity:
    f_r: float
    p_e_no_pulse: float
    p_g_pi_pulse: float
    p_decay: float
    p_overlap: float
    p_therm: float
    budget_sum: float
    identity_gap: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)


def readout_fidelity(cfg: ExperimentConfig, *, jobs: int = 1) -> ReadoutFidelity:
    """Single-shot fidelity from the two single-measurement ensembles.

    The no-pulse ensemble leaves the qubit in its thermal state; the
    pi-pulse ensemble inverts it at the pulse start.  Decisions use the
    pipeline threshold.
    """
    res_g = _run_mc(cfg, _Protocol("none", double=False, conditional=False),
                    stream_id=1, jobs=jobs)
    res_e = _run_mc(cfg, _Protocol("pi", double=False, conditional=False),
                    stream_id=2, jobs=jobs)
    p_e_no = float(np.count_nonzero(res_g.it1 >= 0)) / res_g.n
    p_g_pi = float(np.count_nonzero(res_e.it1 < 0)) / res_e.n
    f_r = 1.0 - p_e_no - p_g_pi
    p_decay = 1.0 - math.exp(-(cfg.window_center_ns * NS) / cfg.device.t1) \
        if math.isfinite(cfg.device.t1) else 0.0
    p_overlap = overlap_probability(cfg)
    budget_sum = 2.0 * cfg.device.p_therm + p_decay + p_overlap
    return ReadoutFidelity(
        f_r=f_r,
        p_e_no_pulse=p_e_no,
        p_g_pi_pulse=p_g_pi,
        p_decay=p_decay,
        p_overlap=p_overlap,
        p_therm=cfg.device.p_therm,
        budget_sum=budget_sum,
        identity_gap=abs((1.0 - f_r) - budget_sum),
    )


def optimize_threshold(cfg: ExperimentConfig, *, jobs: int = 1) -> float:
    """Threshold (volts) maximizing single-shot readout fidelity.

    Scans every decision boundary realized by the calibration ensembles
    at the scaled output's full resolution; ties resolve to the midpoint
    of the tied candidate range.
    """
    res_g = _run_mc(cfg, _Protocol("none", double=False, conditional=False),
                    stream_id=1, jobs=jobs)
    res_e = _run_mc(cfg, _Protocol("pi", double=False, conditional=False),
                    stream_id=2, jobs=jobs)
    candidates = np.unique(np.concatenate([res_g.it1, res_e.it1]))
    sorted_g = np.sort(res_g.it1)
    sorted_e = np.sort(res_e.it1)
    p_e_no = (res_g.n - np.searchsorted(sorted_g, candidates, side="left")) / res_g.n
    p_g_pi = np.searchsorted(sorted_e, candidates, side="left") / res_e.n
    fidelity = 1.0 - p_e_no - p_g_pi
    if candidates.size < 2 or np.ptp(fidelity) == 0:
        raise CalibrationError("fidelity is flat; no usable signal to optimize on")
    best = np.flatnonzero(fidelity == fidelity.max())
    t_scaled = 0.5 * (candidates[best[0]] + candidates[best[-1]])
    pipe = cfg.pipeline
    return (pipe.c_i.raw + t_scaled / (1 << pipe.s_i)) * ADC_LSB_VOLTS
