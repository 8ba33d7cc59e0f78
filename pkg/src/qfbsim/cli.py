"""Command-line front end.

Subcommands cover the full workflow: per-cycle pipeline traces, the
two-measurement feedback experiment with histogram dumps, the latency
budget, noise calibration, threshold optimization, and single-shot
fidelity.  Exit codes: 0 success, 1 usage or validation problem, 2
runtime failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import config as run_config
from .experiment import (
    CalibrationError,
    ExperimentConfig,
    calibrate_noise,
    optimize_threshold,
    overlap_probability,
    readout_fidelity,
    run_experiment,
    run_feedback_comparison,
)
from .fxp import ADC_WIDTH, ConfigError, FxpSample
from .latency import (
    LatencyBudget,
    budget_report,
    integration_delay_setting,
    tau_eltot,
    total_feedback_latency,
    trigger_to_fb_delay,
)
from .pipeline import dump_trace, run_stream
from .sigmodel import (
    STATE_E,
    STATE_G,
    PulseSchedule,
    QubitTrajectory,
    synthesize_adc_stream,
)

SEED_ENV = "QFB_SEED"


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage failures exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="qfbsim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    pipe = sub.add_parser("simulate-pipeline",
                          help="dump a per-cycle pipeline trace")
    pipe.add_argument("--config", required=True, help="run configuration file")
    pipe.add_argument("--state", choices=("g", "e"), default="e",
                      help="held qubit state for the synthetic input")
    pipe.add_argument("--input", help="ADC CSV (t_ns,raw,tr) instead of "
                                      "synthesizing a waveform")
    pipe.add_argument("--ticks", type=int, default=48,
                      help="synthetic stream length in clock cycles")
    pipe.add_argument("--out", help="output path (default: stdout)")

    run = sub.add_parser("run-experiment",
                         help="run the two-measurement feedback experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir", required=True)
    run.add_argument("--repetitions", type=int, help="override the document")
    run.add_argument("--feedback", choices=("off", "on", "both"),
                     default="both")
    run.add_argument("--jobs", type=int, default=os.cpu_count() or 1)

    lat = sub.add_parser("latency-report", help="print the latency budget")
    lat.add_argument("--delay-cycles", type=int, default=10)
    lat.add_argument("--json", action="store_true")

    cal = sub.add_parser("calibrate-noise",
                         help="solve for the noise level hitting an overlap")
    cal.add_argument("--config", required=True)
    cal.add_argument("--target", type=float,
                     help="overlap error in percent (default: document value"
                          " or 3)")
    cal.add_argument("--json", action="store_true")

    opt = sub.add_parser("optimize-threshold",
                         help="scan thresholds for best fidelity")
    opt.add_argument("--config", required=True)
    opt.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    opt.add_argument("--json", action="store_true")

    fid = sub.add_parser("readout-fidelity",
                         help="single-shot fidelity and its error budget")
    fid.add_argument("--config", required=True)
    fid.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    fid.add_argument("--json", action="store_true")
    return parser


def _load(path: str) -> tuple[ExperimentConfig, float | None]:
    cfg, target = run_config.load_file(path)
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        try:
            cfg = replace(cfg, master_seed=int(seed, 0))
        except ValueError:
            raise run_config.ConfigFileError(
                [f"{SEED_ENV}={seed!r} is not an integer"])
    return cfg, target


def _write_text(path: Path, text: str) -> None:
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


def _counts_csv(counts, header: str) -> str:
    lines = [header]
    lines += [f"{i},{int(c)}" for i, c in enumerate(counts)]
    return "\n".join(lines) + "\n"


def _joint_csv(joint) -> str:
    lines = ["i1_bin,i2_bin,count"]
    nz = joint.nonzero()
    lines += [f"{int(a)},{int(b)},{int(joint[a, b])}" for a, b in zip(*nz)]
    return "\n".join(lines) + "\n"


def _write_marginals(out_dir: Path, ram, seg, suffix: str) -> None:
    _write_text(out_dir / f"marginal_i1{suffix}.csv",
                _counts_csv(ram.marginal_i1(seg), "i1_bin,count"))
    _write_text(out_dir / f"marginal_i2{suffix}.csv",
                _counts_csv(ram.marginal_i2(seg), "i2_bin,count"))
    _write_text(out_dir / f"joint_i1_i2{suffix}.csv",
                _joint_csv(ram.joint_i1_i2(seg)))


def _summary_line(rep) -> str:
    state = "on" if rep.feedback_enabled else "off"
    return (f"feedback {state}: P[E1] = {100 * rep.p_e1:.3f}%  "
            f"P[E2] = {100 * rep.p_e2:.3f}%")


def cmd_run_experiment(args) -> int:
    cfg, target = _load(args.config)
    if args.repetitions is not None:
        cfg = replace(cfg, repetitions=args.repetitions)
    cfg = run_config.resolve_noise(cfg, target)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.feedback == "both":
        comp = run_feedback_comparison(cfg, jobs=args.jobs)
        _write_text(out_dir / "report_feedback_off.json",
                    comp.off.to_json() + "\n")
        _write_text(out_dir / "report_feedback_on.json",
                    comp.on.to_json() + "\n")
        (out_dir / "histogram.bin").write_bytes(comp.histogram.dump_bytes())
        _write_marginals(out_dir, comp.histogram, 0, "_feedback_off")
        _write_marginals(out_dir, comp.histogram, 1, "_feedback_on")
        print(_summary_line(comp.off))
        print(_summary_line(comp.on))
    else:
        cfg = replace(cfg, feedback_enabled=args.feedback == "on")
        rep = run_experiment(cfg, jobs=args.jobs)
        _write_text(out_dir / "report.json", rep.to_json() + "\n")
        (out_dir / "histogram.bin").write_bytes(rep.histogram.dump_bytes())
        _write_marginals(out_dir, rep.histogram, 0, "")
        print(_summary_line(rep))
    print(f"wrote {out_dir}")
    return 0


def _parse_adc_csv(path: str) -> tuple[list[FxpSample], list[int]]:
    samples, triggers = [], []
    with open(path, "r", encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("t_ns"):
                continue
            fields = line.split(",")
            if len(fields) != 3:
                raise ConfigError(f"bad ADC CSV line: {line!r}")
            samples.append(FxpSample(int(fields[1]), ADC_WIDTH))
            triggers.append(int(fields[2]))
    if not samples:
        raise ConfigError(f"no samples in {path}")
    return samples, triggers


def cmd_simulate_pipeline(args) -> int:
    cfg, _ = _load(args.config)
    if args.input:
        samples, triggers = _parse_adc_csv(args.input)
    else:
        # noiseless single readout with the state held; the ADC data lane
        # runs 6 cycles behind the trigger lane, as in hardware
        skew = cfg.pipeline.sync_depth
        if args.ticks <= skew + 2:
            raise ConfigError(f"--ticks must exceed {skew + 2}")
        device = replace(cfg.device, noise_sigma=0.0, t1=math.inf,
                         p_therm=0.0)
        n_src = args.ticks - skew
        schedule = PulseSchedule(readout_pulses=((0.0, 160e-9),),
                                 t_start=-80e-9,
                                 repetition_period=n_src * 1e-8)
        state = STATE_E if args.state == "e" else STATE_G
        trajectory = QubitTrajectory(segments=((-80e-9, state),))
        stream = synthesize_adc_stream(device, schedule, trajectory,
                                       phase_offset=skew)
        samples = [FxpSample(0, ADC_WIDTH)] * skew + stream.samples
        triggers = stream.triggers + [0] * skew
    trace = run_stream(cfg.pipeline, samples, triggers)
    text = dump_trace(trace)
    if args.out:
        _write_text(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_latency_report(args) -> int:
    budget = LatencyBudget()
    if args.json:
        eltot = tau_eltot(budget)
        fb = total_feedback_latency(budget)
        doc = {
            "components_ns": budget.components(),
            "uncertainties_ns": budget.uncertainties(),
            "tau_eltot_ns": [eltot[0], eltot[1]],
            "tau_fb_ns": [fb[0], fb[1]],
            "trigger_to_fb_ns": trigger_to_fb_delay(args.delay_cycles, budget),
            "integration_delay_cycles": integration_delay_setting(budget.tau_ro),
        }
        print(json.dumps(doc, indent=2))
    else:
        print(budget_report(budget))
    return 0


def cmd_calibrate_noise(args) -> int:
    cfg, target = _load(args.config)
    if args.target is not None:
        target = args.target / 100.0
    if target is None:
        target = 0.03
    sigma = calibrate_noise(target, cfg)
    verified = overlap_probability(cfg, sigma)
    if args.json:
        print(json.dumps({"target": target, "noise_sigma_volts": sigma,
                          "verified_overlap": verified}, indent=2))
    else:
        print(f"noise sigma = {1000 * sigma:.4f} mV "
              f"(overlap {100 * verified:.3f}%, target {100 * target:.3f}%)")
    return 0


def cmd_optimize_threshold(args) -> int:
    cfg, target = _load(args.config)
    cfg = run_config.resolve_noise(cfg, target)
    best = optimize_threshold(cfg, jobs=args.jobs)
    if args.json:
        print(json.dumps({"threshold_volts": best,
                          "configured_volts": cfg.threshold_volts}, indent=2))
    else:
        print(f"optimal threshold = {1000 * best:.4f} mV "
              f"(configured {1000 * cfg.threshold_volts:.4f} mV)")
    return 0


def cmd_readout_fidelity(args) -> int:
    cfg, target = _load(args.config)
    cfg = run_config.resolve_noise(cfg, target)
    fid = readout_fidelity(cfg, jobs=args.jobs)
    if args.json:
        print(json.dumps(asdict(fid), indent=2))
    else:
        print(f"F_r = {100 * fid.f_r:.3f}%")
        print(f"  P[e | no pulse] = {100 * fid.p_e_no_pulse:.3f}%")
        print(f"  P[g | pi pulse] = {100 * fid.p_g_pi_pulse:.3f}%")
        print(f"  budget: 2 P_therm = {200 * fid.p_therm:.3f}%, "
              f"P_decay = {100 * fid.p_decay:.3f}%, "
              f"P_overlap = {100 * fid.p_overlap:.3f}%")
        print(f"  identity gap = {100 * fid.identity_gap:.3f}%")
    return 0


_COMMANDS = {
    "simulate-pipeline": cmd_simulate_pipeline,
    "run-experiment": cmd_run_experiment,
    "latency-report": cmd_latency_report,
    "calibrate-noise": cmd_calibrate_noise,
    "optimize-threshold": cmd_optimize_threshold,
    "readout-fidelity": cmd_readout_fidelity,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help()
        return 1
    try:
        return _COMMANDS[args.command](args)
    except run_config.ConfigFileError as exc:
        for line in exc.errors:
            print(f"error: {line}", file=sys.stderr)
        return 1
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CalibrationError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
