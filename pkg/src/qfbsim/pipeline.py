"""Cycle-accurate model of the feedback signal processor.

One `tick()` call advances the machine by one 10 ns clock cycle:

    ADC register -> fs/4 mixer (registered) -> moving average (registered)
    -> offset/scale preprocessing (combinational) -> sign-bit LUT
    discrimination (combinational) -> registered fb/fb2/fb_time outputs

The trigger input runs through its own chain: a fixed synchronization
delay line that compensates the ADC-vs-trigger interface skew, one
register per pipeline stage, a rising-edge detector, and a user delay of
`d` cycles whose output (fb_time) marks the cycle at which the
discriminator result is gated into the feedback triggers.

Outputs of `tick()` follow register semantics: the returned values are
what is observable *during* the cycle, i.e. the state the registers held
when the cycle began; the sample and trigger passed in are captured at
the end of the cycle and influence later ticks only.  Consequently the
filtered output at tick n depends on input samples up to n-3 (the three
registered stages), and the fb rising edge lands exactly
sync_depth + 2 + d + 1 ticks after the trigger rising edge at the input.

A vectorized batch implementation (`run_stream_batch`) reproduces the
scalar machine bit-exactly over arrays of independent streams; the test
suite proves the equivalence element by element.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fxp
from .fxp import ADC_LSB_VOLTS, ADC_WIDTH, ConfigError, FxpSample

# Datapath widths.  A full-scale 14-bit sample negated by the mixer needs
# 15 bits (-(-8192) = +8192); the accumulator holds up to 40 mixer
# outputs (40 * 8192 < 2**20) so 21 bits can never overflow; the
# normalized average fits back into 15 bits; preprocessing grows by the
# offset subtraction and shift into 16 bits.
MIXER_WIDTH = 15
ACCUMULATOR_WIDTH = 21
FILTER_WIDTH = 15
PREPROC_WIDTH = 16

# fs/4 mixer coefficient sequences: cos(2*pi*n/4) and -sin(2*pi*n/4).
COS_SEQ = (1, 0, -1, 0)
NSIN_SEQ = (0, -1, 0, 1)

DEFAULT_SYNC_DEPTH = 6

MAX_WINDOW = 40
MAX_DELAY = 255


@dataclass(frozen=True)
class PipelineConfig:
    """Run-time knobs of the processor.

    window_len: moving-average length l (even, 2..40; the cycle-accurate
        normalizer requires a power of two).
    delay: trigger-to-evaluation delay d in clock cycles; d*10 ns is the
        readout time covered by the integration window.
    c_i, c_q: offsets subtracted from the filtered I/Q before scaling.
    s_i, s_q: power-of-two scale exponents (-7..+7).
    lut1, lut2: 4-entry truth tables indexed by (x << 1) | y where x, y
        are the sign bits of the preprocessed I/Q.
    sync_depth: fixed trigger-synchronization delay (ADC interface skew
        compensation); overridable for what-if studies.
    """

    window_len: int = 4
    delay: int = 10
    c_i: FxpSample = FxpSample(0, FILTER_WIDTH)
    c_q: FxpSample = FxpSample(0, FILTER_WIDTH)
    s_i: int = 0
    s_q: int = 0
    lut1: tuple[int, int, int, int] = (1, 1, 0, 0)  # 1 iff x = 0
    lut2: tuple[int, int, int, int] = (1, 0, 1, 0)  # 1 iff y = 0
    sync_depth: int = DEFAULT_SYNC_DEPTH

    def __post_init__(self) -> None:
        l = self.window_len
        if l < 2 or l > MAX_WINDOW or l % 2:
            raise ConfigError(f"window_len {l} must be even and within 2..{MAX_WINDOW}")
        if l & (l - 1):
            raise ConfigError(
                f"window_len {l} is not a power of two; the shift normalizer "
                "cannot realize 1/l"
            )
        if not 0 <= self.delay <= MAX_DELAY:
            raise ConfigError(f"delay {self.delay} outside 0..{MAX_DELAY}")
        for name, s in (("s_i", self.s_i), ("s_q", self.s_q)):
            if not fxp.SHIFT_MIN <= s <= fxp.SHIFT_MAX:
                raise ConfigError(f"{name}={s} outside {fxp.SHIFT_MIN}..{fxp.SHIFT_MAX}")
        for name, lut in (("lut1", self.lut1), ("lut2", self.lut2)):
            if len(lut) != 4 or any(b not in (0, 1) for b in lut):
                raise ConfigError(f"{name} must be four bits, got {lut!r}")
        if self.sync_depth < 1:
            raise ConfigError("sync_depth must be at least 1")

    @property
    def norm_shift(self) -> int:
        return self.window_len.bit_length() - 1


class PipelineState:
    """Every register of the machine; reset() zeroes all of them."""

    def __init__(self, config: PipelineConfig) -> None:
        self.config = config
        self.reset()

    def reset(self) -> None:
        cfg = self.config
        self.phase = 0                      # 2-bit counter stamping input samples
        self.adc_raw = 0
        self.adc_phase = 0
        self.mix_re = 0
        self.mix_im = 0
        self.dly_re = [0] * cfg.window_len  # moving-average delay lines
        self.dly_im = [0] * cfg.window_len
        self.dly_pos = 0
        self.acc_re = 0
        self.acc_im = 0
        self.i_reg = 0
        self.q_reg = 0
        self.sync = [0] * cfg.sync_depth    # trigger synchronization stages
        self.tr_a = 0                       # per-pipeline-stage trigger registers
        self.tr_b = 0
        self.tr_b_prev = 0                  # rising-edge history bit
        self.dline = [0] * cfg.delay        # user delay z^-d
        self.fb_reg = 0
        self.fb2_reg = 0
        self.fbtime_reg = 0
        self.overflow = {"accumulator": False, "filter": False, "i_t": False, "q_t": False}

    def snapshot(self) -> dict:
        """Copyable view of all registers (for save/restore tests)."""
        d = self.__dict__.copy()
        d.pop("config")
        for key in ("dly_re", "dly_im", "sync", "dline"):
            d[key] = list(d[key])
        d["overflow"] = dict(d["overflow"])
        return d

    def restore(self, snap: dict) -> None:
        for key, value in snap.items():
            setattr(self, key, list(value) if isinstance(value, list) else
                    (dict(value) if isinstance(value, dict) else value))


@dataclass(frozen=True)
class TickOutput:
    """Signals observable during one clock cycle (raw integer values)."""

    cycle: int
    adc_raw: int
    tr: int
    re_sm: int
    im_sm: int
    i: int
    q: int
    i_t: int
    q_t: int
    fb_time: int
    fb: int
    fb2: int


def mixer_fs4(sample: FxpSample, phase: int) -> tuple[FxpSample, FxpSample]:
    """Multiplier-less fs/4 down-conversion of one sample.

    The cosine sequence (1, 0, -1, 0) and negated sine sequence
    (0, -1, 0, 1) take only values in {-1, 0, 1}, so the product reduces
    to selection and negation.  Output width grows to 15 bits because
    -(-8192) is not a 14-bit value.
    """
    if phase not in (0, 1, 2, 3):
        raise ValueError(f"phase {phase} outside 0..3")
    re = FxpSample(sample.raw * COS_SEQ[phase], MIXER_WIDTH, sample.lsb_volts)
    im = FxpSample(sample.raw * NSIN_SEQ[phase], MIXER_WIDTH, sample.lsb_volts)
    return re, im


class MovingAverageBranch:
    """Delay line + subtractor + accumulator + output adder for one branch.

    step_raw() performs one clock of the recursive update
    sum_n = acc + a_n - a_{n-l}; the accumulator keeps the running window
    sum and the normalized output is an arithmetic right shift by
    log2(l).  Registers start at zero, so the first l-1 outputs equal
    direct sums over the available samples with implicit leading zeros.
    """

    def __init__(self, window_len: int) -> None:
        if window_len < 2 or window_len % 2:
            raise ConfigError(f"window_len {window_len} must be even and >= 2")
        if window_len & (window_len - 1):
            raise ConfigError(f"window_len {window_len} must be a power of two")
        self.window_len = window_len
        self.norm_shift = window_len.bit_length() - 1
        self.dly = [0] * window_len
        self.pos = 0
        self.acc = 0
        self.overflow = False

    def step_raw(self, a: int) -> int:
        oldest = self.dly[self.pos]
        self.dly[self.pos] = a
        self.pos = (self.pos + 1) % self.window_len
        total = self.acc + a - oldest
        total, clipped = fxp.saturate(total, ACCUMULATOR_WIDTH)
        self.overflow |= clipped
        self.acc = total
        out, clipped = fxp.saturate(total >> self.norm_shift, FILTER_WIDTH)
        self.overflow |= clipped
        return out


def moving_average_step(branch: MovingAverageBranch, a_n: FxpSample) -> FxpSample:
    """One clock of the boxcar filter; returns the normalized window mean."""
    return FxpSample(branch.step_raw(a_n.raw), FILTER_WIDTH, a_n.lsb_volts)


def preprocess_raw(v_raw: int, c_raw: int, s: int) -> tuple[int, bool]:
    """(v - c) scaled by 2**s, saturated to the 16-bit preprocessed width."""
    return fxp.shift_raw(v_raw - c_raw, s, PREPROC_WIDTH)


def preprocess(v: FxpSample, c: FxpSample, s: int) -> FxpSample:
    """Offset subtraction and power-of-two scaling (combinational)."""
    if v.lsb_volts != c.lsb_volts:
        raise ValueError("offset scale must match signal scale")
    raw, _ = preprocess_raw(v.raw, c.raw, s)
    return FxpSample(raw, PREPROC_WIDTH, v.lsb_volts)


def discriminate(x: int, y: int, lut: tuple[int, int, int, int]) -> int:
    """Look up the feedback bit for sign bits (x, y)."""
    if x not in (0, 1) or y not in (0, 1):
        raise ValueError("sign bits must be 0 or 1")
    return lut[(x << 1) | y]


def sign_bit(raw: int) -> int:
    """Hardware sign bit: 0 for non-negative values, 1 for negative."""
    return 1 if raw < 0 else 0


def tick(config: PipelineConfig, state: PipelineState, adc_sample: FxpSample,
         tr: int, cycle: int = 0) -> TickOutput:
    """Advance the machine one clock cycle; returns the observable signals."""
    if adc_sample.width != ADC_WIDTH:
        raise ValueError(f"ADC samples must be {ADC_WIDTH}-bit")
    if tr not in (0, 1):
        raise ValueError("trigger must be a bit")

    # Combinational logic fed by the current register state.
    i_t, clip_i = preprocess_raw(state.i_reg, config.c_i.raw, config.s_i)
    q_t, clip_q = preprocess_raw(state.q_reg, config.c_q.raw, config.s_q)
    state.overflow["i_t"] |= clip_i
    state.overflow["q_t"] |= clip_q
    x = sign_bit(i_t)
    y = sign_bit(q_t)
    edge = state.tr_b & (1 - state.tr_b_prev)
    fbt_comb = state.dline[-1] if config.delay else edge
    fb_comb = config.lut1[(x << 1) | y] & fbt_comb
    fb2_comb = config.lut2[(x << 1) | y] & fbt_comb

    out = TickOutput(
        cycle=cycle,
        adc_raw=adc_sample.raw,
        tr=tr,
        re_sm=state.mix_re,
        im_sm=state.mix_im,
        i=state.i_reg,
        q=state.q_reg,
        i_t=i_t,
        q_t=q_t,
        fb_time=state.fbtime_reg,
        fb=state.fb_reg,
        fb2=state.fb2_reg,
    )

    # Clock edge: every register captures its input, computed from the
    # pre-edge values (order below only uses old values on the right).
    state.fb_reg = fb_comb
    state.fb2_reg = fb2_comb
    state.fbtime_reg = fbt_comb

    # Moving average consumes the current mixer registers.
    for (acc_attr, dly_attr, out_attr, a) in (
        ("acc_re", "dly_re", "i_reg", state.mix_re),
        ("acc_im", "dly_im", "q_reg", state.mix_im),
    ):
        dly = getattr(state, dly_attr)
        oldest = dly[state.dly_pos]
        dly[state.dly_pos] = a
        total = getattr(state, acc_attr) + a - oldest
        total, clipped = fxp.saturate(total, ACCUMULATOR_WIDTH)
        state.overflow["accumulator"] |= clipped
        setattr(state, acc_attr, total)
        norm, clipped = fxp.saturate(total >> config.norm_shift, FILTER_WIDTH)
        state.overflow["filter"] |= clipped
        setattr(state, out_attr, norm)
    state.dly_pos = (state.dly_pos + 1) % config.window_len

    # Mixer consumes the current ADC register and its captured phase.
    state.mix_re = state.adc_raw * COS_SEQ[state.adc_phase]
    state.mix_im = state.adc_raw * NSIN_SEQ[state.adc_phase]

    # ADC register captures the new sample, stamped with the running phase.
    state.adc_raw = adc_sample.raw
    state.adc_phase = state.phase
    state.phase = (state.phase + 1) & 3

    # Trigger chain shifts one stage.
    if config.delay:
        state.dline = [edge] + state.dline[:-1]
    state.tr_b_prev = state.tr_b
    state.tr_b = state.tr_a
    state.tr_a = state.sync[-1]
    state.sync = [tr] + state.sync[:-1]

    return out


def run_stream(config: PipelineConfig, samples: list[FxpSample],
               triggers: list[int], state: PipelineState | None = None,
               start_cycle: int = 0) -> list[TickOutput]:
    """Fold tick() over a sample/trigger stream from reset (deterministic)."""
    if len(samples) != len(triggers):
        raise ValueError("samples and triggers must have equal length")
    if state is None:
        state = PipelineState(config)
    return [
        tick(config, state, s, t, cycle=start_cycle + n)
        for n, (s, t) in enumerate(zip(samples, triggers))
    ]


TRACE_COLUMNS = ("cycle", "adc_raw", "tr", "re_sm", "im_sm", "i", "q",
                 "i_t", "q_t", "fb_time", "fb", "fb2")


def dump_trace(trace: list[TickOutput]) -> str:
    """CSV rendering of a trace, one row per clock cycle."""
    lines = [",".join(TRACE_COLUMNS)]
    for t in trace:
        lines.append(",".join(str(getattr(t, c)) for c in TRACE_COLUMNS))
    return "\n".join(lines) + "\n"


def trigger_to_fb_cycles(config: PipelineConfig) -> int:
    """Ticks from the trigger rising edge at the input to the fb rising edge."""
    return config.sync_depth + 2 + config.delay + 1


def readout_events(trace: list[TickOutput]) -> list[dict]:
    """Extract one record per fb_time event from a trace.

    The discriminator and histogram capture act combinationally during
    the evaluation cycle, one tick before the registered fb_time output
    rises.  Each record therefore pairs the preprocessed values of the
    evaluation cycle with the registered feedback bits of the next tick.
    """
    events = []
    for n in range(1, len(trace)):
        if trace[n].fb_time and not trace[n - 1].fb_time:
            ev = trace[n - 1]
            events.append({
                "cycle": ev.cycle,
                "i_t": ev.i_t,
                "q_t": ev.q_t,
                "fb": trace[n].fb,
                "fb2": trace[n].fb2,
            })
    return events


# ---------------------------------------------------------------------------
# Vectorized batch implementation (bit-exact twin of the scalar machine)
# ---------------------------------------------------------------------------

@dataclass
class BatchTrace:
    """Arrays of shape (reps, ticks) mirroring the scalar TickOutput fields."""

    i: np.ndarray
    q: np.ndarray
    i_t: np.ndarray
    q_t: np.ndarray
    fb: np.ndarray
    fb2: np.ndarray
    fb_time: np.ndarray  # shape (ticks,): trigger path is shared per batch


def _trigger_path(config: PipelineConfig, triggers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scalar simulation of the (shared) trigger chain.

    Returns (fbt_comb, fbt_reg): the combinational fb_time value during
    each tick and the registered output observable during each tick.
    """
    m = len(triggers)
    fbt_comb = np.zeros(m, dtype=np.uint8)
    fbt_reg = np.zeros(m, dtype=np.uint8)
    sync = [0] * config.sync_depth
    tr_a = tr_b = tr_b_prev = 0
    dline = [0] * config.delay
    reg = 0
    for n in range(m):
        edge = tr_b & (1 - tr_b_prev)
        comb = dline[-1] if config.delay else edge
        fbt_comb[n] = comb
        fbt_reg[n] = reg
        reg = comb
        if config.delay:
            dline = [edge] + dline[:-1]
        tr_b_prev = tr_b
        tr_b = tr_a
        tr_a = sync[-1]
        sync = [int(triggers[n])] + sync[:-1]
    return fbt_comb, fbt_reg


def filtered_iq_batch(config: PipelineConfig, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Filtered I/Q register values for a batch of streams.

    raw has shape (reps, ticks) of 14-bit sample values; the returned
    arrays match trace[n].i / trace[n].q of the scalar machine bit for
    bit.
    """
    reps, m = raw.shape
    l = config.window_len
    ticks = np.arange(m)
    cos = np.array(COS_SEQ, dtype=np.int64)
    nsin = np.array(NSIN_SEQ, dtype=np.int64)

    # Mixer register during tick n holds sample n-2 times its stamped phase.
    mix_re = np.zeros((reps, m), dtype=np.int64)
    mix_im = np.zeros((reps, m), dtype=np.int64)
    if m > 2:
        coef_re = cos[(ticks[2:] - 2) & 3]
        coef_im = nsin[(ticks[2:] - 2) & 3]
        mix_re[:, 2:] = raw[:, :-2] * coef_re
        mix_im[:, 2:] = raw[:, :-2] * coef_im

    # The filter register during tick n holds the window sum over mixer
    # registers up to tick n-1, shifted right by log2(l).
    def window_sum_shift(a: np.ndarray) -> np.ndarray:
        c = np.cumsum(a, axis=1)
        w = c.copy()
        w[:, l:] = c[:, l:] - c[:, :-l]
        out = np.zeros_like(a)
        out[:, 1:] = w[:, :-1] >> config.norm_shift
        return out

    return window_sum_shift(mix_re), window_sum_shift(mix_im)


def run_stream_batch(config: PipelineConfig, raw: np.ndarray,
                     triggers: np.ndarray) -> BatchTrace:
    """Vectorized equivalent of run_stream over (reps, ticks) sample arrays."""
    raw = np.asarray(raw, dtype=np.int64)
    if raw.ndim != 2:
        raise ValueError("raw must be a (reps, ticks) array")
    if raw.shape[1] != len(triggers):
        raise ValueError("triggers length must equal the tick count")

    i_arr, q_arr = filtered_iq_batch(config, raw)

    def prep(v: np.ndarray, c: int, s: int) -> np.ndarray:
        t = (v - c) << s if s >= 0 else (v - c) >> (-s)
        lo, hi = fxp.raw_bounds(PREPROC_WIDTH)
        return np.clip(t, lo, hi)

    i_t = prep(i_arr, config.c_i.raw, config.s_i)
    q_t = prep(q_arr, config.c_q.raw, config.s_q)
    x = (i_t < 0).astype(np.uint8)
    y = (q_t < 0).astype(np.uint8)
    lut1 = np.array(config.lut1, dtype=np.uint8)
    lut2 = np.array(config.lut2, dtype=np.uint8)
    fbt_comb, fbt_reg = _trigger_path(config, np.asarray(triggers))
    fb_comb = lut1[(x << 1) | y] & fbt_comb
    fb2_comb = lut2[(x << 1) | y] & fbt_comb
    fb = np.zeros_like(fb_comb)
    fb2 = np.zeros_like(fb2_comb)
    fb[:, 1:] = fb_comb[:, :-1]
    fb2[:, 1:] = fb2_comb[:, :-1]
    return BatchTrace(i=i_arr, q=q_arr, i_t=i_t, q_t=q_t, fb=fb, fb2=fb2,
                      fb_time=fbt_reg)
