"""Command-line entry point: ``heralding <subcommand> [--flags]``.

Every subcommand accepts ``--config FILE.json``; keys in the file use the same
names as the flags, and explicit flags win over the file.  Reports embed the
effective configuration and the package version.

Exit codes: 0 success, 2 invalid input, 3 solver failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from ._io import atomic_write_text, dump_json, write_text_or_stdout
from .bell import CANONICAL_ANGLES, EntangledModel, simulate_chsh, chsh_S
from .coincidence import (CoincidenceConfig, CountsSummary, count_coincidences, delay_grid,
                          delay_scan, fit_delay_peak, heralding_ratio)
from .correction import SolverError, WindowParams, propagate_errors, solve_inverse
from .pipeline import REFERENCE_MODEL, run_batch
from .sim import (Channel, EventStream, SourceModel, format_streams_csv, parse_streams_csv,
                  read_streams, sidecar_path, simulate)
from .trace import (DiscriminatorConfig, discriminate, four_photon_demo,
                    pulse_height_histogram, read_waveform, valley_depth, write_waveform)

log = logging.getLogger("heralding")

EXIT_OK, EXIT_INVALID, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4

REFERENCE_RATES = {
    "s1_hz": 46855.2, "s2_hz": 6525.0, "cc_hz": 5418.8, "duration_s": 100.0,
    "tau_w_ps": 1_050_000, "tau_max_ps": 1_000_000, "tau_d1_ps": 50_000, "tau_d2_ps": 1_000_000,
}


class UsageError(ValueError):
    pass


# --- option groups ---------------------------------------------------------------

def _source_defaults() -> dict:
    return {f.name: getattr(REFERENCE_MODEL, f.name) for f in fields(SourceModel)}


_SOURCE_TYPES = {f.name: (int if f.name.endswith("_ps") or f.name == "rng_seed" else float)
                 for f in fields(SourceModel)}

_COINC_DEFAULTS = {f.name: f.default for f in fields(CoincidenceConfig)}

_DISC_DEFAULTS = {"threshold": 0.15, "rearm_dead_ps": 4_000_000, "polarity": "positive"}


def _add_options(p: argparse.ArgumentParser, types: dict, defaults: dict):
    for name, typ in types.items():
        p.add_argument(f"--{name}", type=typ, default=None,
                       help=f"default: {defaults.get(name)!r}")


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="JSON file with option values")
    p.add_argument("--out", default="-", help="output path ('-' for stdout)")


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    cfg = dict(defaults)
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{args.config}: invalid JSON ({exc})") from exc
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _source_model(c: dict) -> SourceModel:
    return SourceModel(**{k: _SOURCE_TYPES[k](c[k]) for k in _SOURCE_TYPES})


def _coinc_config(c: dict) -> CoincidenceConfig:
    return CoincidenceConfig(**{k: int(c[k]) for k in _COINC_DEFAULTS})


def _report(command: str, config: dict, **payload) -> dict:
    return {"tool": "heralding", "version": __version__, "command": command,
            "config": config, **payload}


def _read_stream_input(path: str, duration_ps) -> dict[Channel, EventStream]:
    if path == "-":
        return parse_streams_csv(sys.stdin, duration_ps)
    return read_streams(path, duration_ps)


# --- subcommands -----------------------------------------------------------------

def cmd_simulate(args) -> int:
    c = _resolve(args, _source_defaults())
    model = _source_model(c)
    signal, herald = simulate(model)
    write_text_or_stdout(args.out, format_streams_csv([signal, herald]))
    if args.out != "-":
        meta = _report("simulate", c, duration_ps=model.duration_ps,
                       source_model=model.to_dict(),
                       counts={"signal": len(signal), "herald": len(herald)})
        atomic_write_text(sidecar_path(Path(args.out)), dump_json(meta))
    log.info("signal %.1f /s, herald %.1f /s", signal.rate_hz, herald.rate_hz)
    return EXIT_OK


def cmd_count(args) -> int:
    c = _resolve(args, {**_COINC_DEFAULTS, "input": None, "duration_ps": None})
    if not c["input"]:
        raise UsageError("--input is required")
    streams = _read_stream_input(c["input"], c["duration_ps"])
    summary = count_coincidences(streams[Channel.SIGNAL], streams[Channel.HERALD],
                                 _coinc_config(c))
    ratio, err = heralding_ratio(summary) if summary.singles_herald_hz > 0 else (math.nan,) * 2
    rep = _report("count", c, **summary.to_dict(), heralding_ratio=ratio,
                  heralding_ratio_err=err)
    write_text_or_stdout(args.out, dump_json(rep))
    return EXIT_OK


def cmd_scan_delay(args) -> int:
    c = _resolve(args, {**_COINC_DEFAULTS, "input": None, "duration_ps": None,
                        "delay_min_ps": -1_000_000, "delay_max_ps": 1_000_000,
                        "delay_step_ps": 10_000, "fit": False})
    if not c["input"]:
        raise UsageError("--input is required")
    streams = _read_stream_input(c["input"], c["duration_ps"])
    delays = delay_grid(c["delay_min_ps"], c["delay_max_ps"], c["delay_step_ps"])
    scan = delay_scan(streams[Channel.SIGNAL], streams[Channel.HERALD], _coinc_config(c), delays)
    payload = scan.to_dict()
    if c["fit"]:
        fit = fit_delay_peak(scan)
        payload["fit"] = {"center_ps": fit.center_ps, "fwhm_ps": fit.fwhm_ps,
                          "fwhm_err_ps": fit.fwhm_err_ps, "amplitude_hz": fit.amplitude_hz,
                          "offset_hz": fit.offset_hz}
    write_text_or_stdout(args.out, dump_json(_report("scan-delay", c, **payload)))
    return EXIT_OK


def cmd_correct(args) -> int:
    defaults = {**REFERENCE_RATES, "input": None, "error_model": "independent",
                "mode": "jacobian", "n_draws": 10_000, "seed": 0}
    c = _resolve(args, defaults)
    if c["input"]:
        try:
            loaded = json.loads(Path(c["input"]).read_text() if c["input"] != "-"
                                else sys.stdin.read())
        except json.JSONDecodeError as exc:
            raise UsageError(f"rates input is not valid JSON ({exc})") from exc
        missing = {"s1_hz", "s2_hz", "cc_hz", "duration_s"} - set(loaded)
        if missing:
            raise UsageError(f"rates input lacks {sorted(missing)}")
        for k, v in loaded.items():
            if k in REFERENCE_RATES and getattr(args, k, None) is None:
                c[k] = v
    measured = CountsSummary.from_rates(float(c["s1_hz"]), float(c["s2_hz"]),
                                        float(c["cc_hz"]), float(c["duration_s"]))
    w = WindowParams(int(c["tau_w_ps"]), int(c["tau_max_ps"]),
                     int(c["tau_d1_ps"]), int(c["tau_d2_ps"]))
    est = solve_inverse(measured, w, errors=False)
    u = propagate_errors(measured, w, mode=c["mode"], n_draws=int(c["n_draws"]),
                         seed=int(c["seed"]), model=c["error_model"])
    out = {"pair_rate_hz": est.pair_rate_hz, "eta_signal": est.eta_signal,
           "eta_herald": est.eta_herald, **u._asdict()}
    ratio, ratio_err = heralding_ratio(measured)
    rep = _report("correct", c, **out, raw_eta_signal=ratio, raw_eta_signal_err=ratio_err,
                  raw_eta_herald=measured.coincidences_hz / measured.singles_signal_hz)
    write_text_or_stdout(args.out, dump_json(rep))
    return EXIT_OK


def _waveform_input(c: dict):
    if c["demo"]:
        w, _ = four_photon_demo(seed=int(c["seed"]))
        if c["write_waveform"]:
            write_waveform(c["write_waveform"], w)
        return w
    if not c["input"]:
        raise UsageError("--input (waveform .bin with .json sidecar) or --demo is required")
    return read_waveform(c["input"])


_WAVE_DEFAULTS = {**_DISC_DEFAULTS, "input": None, "demo": False, "write_waveform": None,
                  "seed": 0}


def cmd_discriminate(args) -> int:
    c = _resolve(args, {**_WAVE_DEFAULTS, "channel": "signal"})
    w = _waveform_input(c)
    cfg = DiscriminatorConfig(float(c["threshold"]), int(c["rearm_dead_ps"]), c["polarity"])
    stream = discriminate(w, cfg, Channel.parse(c["channel"]))
    write_text_or_stdout(args.out, format_streams_csv([stream]))
    log.info("%d events", len(stream))
    return EXIT_OK


def cmd_phd(args) -> int:
    c = _resolve(args, {**_WAVE_DEFAULTS, "threshold": 0.05, "rearm_dead_ps": 2_000_000,
                        "bins": 50, "range_min": None, "range_max": None})
    w = _waveform_input(c)
    cfg = DiscriminatorConfig(float(c["threshold"]), int(c["rearm_dead_ps"]), c["polarity"])
    rng = None
    if c["range_min"] is not None and c["range_max"] is not None:
        rng = (float(c["range_min"]), float(c["range_max"]))
    hist = pulse_height_histogram(w, cfg, bins=int(c["bins"]), range=rng)
    rep = _report("phd", c, **hist.to_dict(), n_pulses=int(hist.heights.size),
                  valley_depth=valley_depth(hist.counts))
    write_text_or_stdout(args.out, dump_json(rep))
    return EXIT_OK


def cmd_chsh(args) -> int:
    c = _resolve(args, {"visibility": 0.8874, "angles": list(CANONICAL_ANGLES),
                        "heralding_eta": 0.797, "analyzer_transmission": 0.85,
                        "pair_rate": 2000.0, "integration_s_per_setting": 10.0, "seed": 0})
    m = EntangledModel(float(c["visibility"]), tuple(c["angles"]), float(c["heralding_eta"]),
                       float(c["analyzer_transmission"]))
    res = simulate_chsh(m, float(c["pair_rate"]), float(c["integration_s_per_setting"]),
                        int(c["seed"]))
    above = (res.S - 2.0) / res.sigma_S if res.sigma_S > 0 else math.nan
    rep = _report("chsh", c, S_model=chsh_S(m), **res.to_dict(),
                  sigmas_above_classical=above)
    write_text_or_stdout(args.out, dump_json(rep))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    defaults = {**_source_defaults(), **_COINC_DEFAULTS, "n_seeds": 1,
                "error_model": "nested"}
    c = _resolve(args, defaults)
    model = _source_model(c)
    seeds = [model.rng_seed + k for k in range(int(c["n_seeds"]))]
    batch = run_batch(model, seeds, _coinc_config(c), error_model=c["error_model"])
    rep = _report("pipeline", c, runs=[r.to_dict() for r in batch["runs"]],
                  z_summary=batch["z_summary"], n_failed=batch["n_failed"])
    write_text_or_stdout(args.out, dump_json(rep))
    if batch["n_failed"]:
        print(f"heralding pipeline: solver failed on {batch['n_failed']} run(s); "
              "see solver_error in the report", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="heralding", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate detection streams to a timestamp CSV")
    _add_options(s, _SOURCE_TYPES, _source_defaults())
    _add_common(s)
    s.set_defaults(func=cmd_simulate)

    coinc_types = {k: int for k in _COINC_DEFAULTS}

    s = sub.add_parser("count", help="count singles and coincidences in a timestamp CSV")
    s.add_argument("--input")
    s.add_argument("--duration_ps", type=int)
    _add_options(s, coinc_types, _COINC_DEFAULTS)
    _add_common(s)
    s.set_defaults(func=cmd_count)

    s = sub.add_parser("scan-delay", help="coincidence rate versus signal delay")
    s.add_argument("--input")
    s.add_argument("--duration_ps", type=int)
    _add_options(s, coinc_types, _COINC_DEFAULTS)
    s.add_argument("--delay_min_ps", type=int)
    s.add_argument("--delay_max_ps", type=int)
    s.add_argument("--delay_step_ps", type=int, help="default 10 ns")
    s.add_argument("--fit", action="store_true", default=None, help="fit a Gaussian peak")
    _add_common(s)
    s.set_defaults(func=cmd_scan_delay)

    s = sub.add_parser("correct", help="accidental/dead-time corrected efficiencies")
    s.add_argument("--input", help="rates JSON ({s1_hz, s2_hz, cc_hz, duration_s, tau_*})")
    _add_options(s, {k: (int if k.endswith("_ps") else float) for k in REFERENCE_RATES},
                 REFERENCE_RATES)
    s.add_argument("--error_model", choices=("independent", "nested"))
    s.add_argument("--mode", choices=("jacobian", "montecarlo"))
    s.add_argument("--n_draws", type=int)
    s.add_argument("--seed", type=int)
    _add_common(s)
    s.set_defaults(func=cmd_correct)

    for name, func, helptext in (("discriminate", cmd_discriminate,
                                  "leading-edge discrimination of a waveform"),
                                 ("phd", cmd_phd, "pulse-height distribution of a waveform")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--input", help="waveform .bin (JSON sidecar alongside)")
        s.add_argument("--demo", action="store_true", default=None,
                       help="use the built-in four-photon trace")
        s.add_argument("--write_waveform", help="save the demo trace here")
        s.add_argument("--threshold", type=float)
        s.add_argument("--rearm_dead_ps", type=int)
        s.add_argument("--polarity", choices=("positive", "negative"))
        s.add_argument("--seed", type=int)
        if name == "discriminate":
            s.add_argument("--channel", choices=("signal", "herald"))
        else:
            s.add_argument("--bins", type=int)
            s.add_argument("--range_min", type=float)
            s.add_argument("--range_max", type=float)
        _add_common(s)
        s.set_defaults(func=func)

    s = sub.add_parser("chsh", help="simulate a CHSH measurement")
    s.add_argument("--visibility", type=float)
    s.add_argument("--angles", type=float, nargs=4, metavar=("A", "A2", "B", "B2"))
    s.add_argument("--heralding_eta", type=float)
    s.add_argument("--analyzer_transmission", type=float)
    s.add_argument("--pair_rate", type=float)
    s.add_argument("--integration_s_per_setting", type=float)
    s.add_argument("--seed", type=int)
    _add_common(s)
    s.set_defaults(func=cmd_chsh)

    s = sub.add_parser("pipeline", help="simulate, count, correct and score against truth")
    _add_options(s, _SOURCE_TYPES, _source_defaults())
    _add_options(s, coinc_types, _COINC_DEFAULTS)
    s.add_argument("--n_seeds", type=int)
    s.add_argument("--error_model", choices=("independent", "nested"))
    _add_common(s)
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SolverError as exc:
        print(f"heralding {args.command}: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (ValueError, TypeError, KeyError) as exc:
        print(f"heralding {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"heralding {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
