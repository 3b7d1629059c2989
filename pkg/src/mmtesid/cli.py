"""Command-line entry point: simulate, identify, predict, select-order, psd.

Every command reads an INI experiment file (``--config``).  Flags override
the file.  Exit status is 0 when every requested step converged and
validated, 1 for a non-converged fit and 2 for invalid input.
"""

import argparse
import configparser
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
from scipy import signal

from . import __version__
from .data import (Partition, add_measurement_noise, draw_theta_sequence,
                   generate_gwn_excitation, load_config, model_floats, model_ints,
                   partition_dataset, read_series, simulate_segments, write_series)
from .exceptions import ConvergenceWarning, ValidationError
from .inference import (FitOptions, model_residuals, initial_delta, noise_only_prediction,
                        run_pipeline)
from .kernel import MmteParams, kernel_psd
from .order import select_order
from .series import TimeSeries
from .spectral import residual_psd, suggest_modes
from .structure import (ModalDamping, RayleighDamping, base_excitation_maps,
                        build_benchmark_frame, build_shear_frame)

log = logging.getLogger("mmtesid")

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_INVALID = 0, 1, 2


# ---------------------------------------------------------------------------
# Config to objects
# ---------------------------------------------------------------------------

def _role_key(cfg, prefix, key):
    """``prefix + key`` when present in ``[model]``, otherwise ``key``."""
    return f"{prefix}{key}" if f"{prefix}{key}" in cfg.model else key


def _damping_spec(cfg, prefix):
    def get(key, default):
        return cfg.model.get(_role_key(cfg, prefix, key), default)

    kind = get("damping", "none").strip().lower()
    if kind == "none":
        return None
    if kind == "rayleigh":
        return RayleighDamping(float(get("rayleigh_alpha", "0")), float(get("rayleigh_beta", "0")))
    if kind == "modal":
        return ModalDamping(model_floats(cfg, _role_key(cfg, prefix, "modal_ratios")))
    raise ValidationError(f"[model] unknown damping type {kind!r}")


def build_system(cfg, role="model"):
    """Structural model from ``[model]``.

    Any key may be given a ``true_`` prefix (data-generating system only) or
    a ``model_`` prefix (identification model only), which is how deliberate
    misspecification or a perturbed starting model is set up.
    """
    prefix = "model_" if role == "model" else "true_"

    def key(name):
        return _role_key(cfg, prefix, name)

    kind = cfg.model.get(key("type"), "shear").strip().lower()
    dt = float(cfg.model.get(key("dt"), "0.01"))
    damping = _damping_spec(cfg, prefix)
    if kind == "benchmark12":
        observed = model_ints(cfg, key("observed"), (3, 6))
        return build_benchmark_frame(damping_spec=damping, dt=dt, observed_dofs=observed)
    if kind != "shear":
        raise ValidationError(f"[model] unknown type {kind!r}")
    masses = model_floats(cfg, key("masses"))
    stiffness = model_floats(cfg, key("stiffness"))
    observed = model_ints(cfg, key("observed"), tuple(range(len(masses))))
    free = model_ints(cfg, key("free"), tuple(range(len(masses))))
    input_kind = cfg.model.get(key("input"), "top").strip().lower()
    B = D = None
    if input_kind == "base":
        B, D = base_excitation_maps(masses, observed)
    elif input_kind != "top":
        raise ValidationError(f"[model] unknown input {input_kind!r}")
    return build_shear_frame(masses, stiffness, damping, observed_dofs=observed, input_map=B,
                             feedthrough=D, dt=dt,
                             stiffness_scale=float(cfg.model.get(key("stiffness_scale"), "1")),
                             free=free,
                             parameterization=cfg.model.get(key("parameterization"), "scaling"))


def fit_options(cfg, seed=None):
    o = cfg.optimizer
    opts = FitOptions(seed=cfg.seeds["optimizer"] if seed is None else seed,
                      truncation_tol=cfg.truncation_tol)
    conv = {"optimizer": str, "restarts": int, "max_iter": int, "sensitivity": str,
            "n_samples": int, "ftol": float, "xtol": float, "gtol": float,
            "min_rel_sigma_theta": float, "max_rel_sigma_theta": float, "mu_range": float,
            "max_eval": int, "kernel_warmup": _flag}
    for key, fn in conv.items():
        if key in o:
            setattr(opts, key, fn(o[key]))
    return opts


def _flag(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValidationError(f"[optimizer] expected a boolean, got {text!r}")


def _apply_overrides(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg.seeds = {k: args.seed + i for i, k in enumerate(cfg.seeds)}
    if getattr(args, "m", None) is not None:
        cfg.kernel_order = "auto" if args.m == "auto" else int(args.m)
    if getattr(args, "partitions", None) is not None:
        cfg.n_partitions = args.partitions
    if getattr(args, "partition_size", None) is not None:
        cfg.partition_size = args.partition_size
    if getattr(args, "out", None) is not None:
        out = Path(args.out)
        if cfg.x_path == cfg.output_dir / "x.csv":
            cfg.x_path = out / "x.csv"
        if cfg.y_path == cfg.output_dir / "y.csv":
            cfg.y_path = out / "y.csv"
        cfg.output_dir = out
    if getattr(args, "noise", None) is not None:
        cfg.noise_fraction = args.noise
    return cfg.validate()


def _holdout(cfg):
    return int(cfg.model.get("holdout", str(cfg.partition_size)))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg, args):
    truth = build_system(cfg, "truth")
    n, n_parts = cfg.partition_size, cfg.n_partitions
    total = n * n_parts + _holdout(cfg)
    std = float(cfg.model.get("excitation_std", "1"))
    x = generate_gwn_excitation(total, truth.dt, std, cfg.seeds["excitation"])
    nominal = truth.theta_nominal
    segments = -(-total // n)
    thetas = draw_theta_sequence(nominal, cfg.theta_variability, segments, cfg.seeds["theta"])
    clean = simulate_segments(truth, x, thetas, n)
    y = add_measurement_noise(clean, cfg.noise_fraction, cfg.seeds["noise"])
    out = cfg.output_dir
    write_series(cfg.x_path, x, "excitation")
    write_series(cfg.y_path, y, f"measured response, noise rms fraction {cfg.noise_fraction}")
    starts = x.times[::n][:segments]
    theta_series = TimeSeries(starts, thetas, tuple(f"theta{j + 1}" for j in range(thetas.shape[1])))
    write_series(out / "theta_true.csv", theta_series,
                 f"true parameters per segment of {n} samples")
    print(f"wrote {total} samples ({n_parts} partitions of {n} + {total - n * n_parts} held out) "
          f"to {out}")
    return EXIT_OK


def _load_data(cfg):
    cfg.validate(require_data=True)
    x = read_series(cfg.x_path)
    y = read_series(cfg.y_path)
    if len(x) != len(y):
        raise ValidationError("input and output files differ in length")
    return x, y


def _training(cfg, x, y):
    used = cfg.partition_size * cfg.n_partitions
    if used > len(x):
        raise ValidationError(f"{cfg.n_partitions} partitions of {cfg.partition_size} need "
                              f"{used} samples, data has {len(x)}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return partition_dataset(x.window(0, used), y.window(0, used), cfg.partition_size)


def _order(cfg, parts, system, opts):
    if cfg.kernel_order != "auto":
        return int(cfg.kernel_order), None
    selection = select_order(parts, system, cfg.m_max, opts)
    return selection.m, selection


def _fit(cfg, args, x_next=None):
    x, y = _load_data(cfg)
    system = build_system(cfg, "model")
    parts = _training(cfg, x, y)
    opts = fit_options(cfg)
    m, selection = _order(cfg, parts, system, opts)
    delta0 = initial_delta(parts, system, m)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        result = run_pipeline(parts, system, delta0, opts, m=m, x_next=x_next(x, y, parts)
                              if x_next else None)
    for w in caught:
        log.warning(str(w.message))
    return x, y, system, parts, result, selection


def _report(cfg, result, selection):
    Q = result.Q
    return {
        "version": __version__,
        "config": str(cfg.source) if cfg.source else None,
        "partition_size": cfg.partition_size,
        "n_partitions": len(result.states),
        "m": result.deltas[0].m,
        "delta": [dict(d.as_dict(), partition=i) for i, d in enumerate(result.deltas)],
        "delta_unconstrained": [d.to_unconstrained().tolist() for d in result.deltas],
        "Q": Q.Q.tolist(),
        "theta_mean": result.theta_mean.tolist(),
        "theta_std": result.theta_std.tolist(),
        "order_selection": None if selection is None else [
            {"m": s.m, "score": s.score, "log_likelihood": s.log_likelihood,
             "omega": list(s.omega)} for s in selection.scores],
        "diagnostics": result.diagnostics,
        "converged": result.converged,
    }


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return str(obj)


def cmd_identify(cfg, args):
    _, _, system, parts, result, selection = _fit(cfg, args)
    report = _report(cfg, result, selection)
    path = cfg.output_dir / "report.json"
    _write_json(path, report)
    for j, (mu, sd) in enumerate(zip(result.theta_mean, result.theta_std)):
        print(f"theta{j + 1}: mean {mu:.6g}  sd {sd:.3g}")
    print(f"report written to {path}")
    if not result.converged:
        print("one or more partitions did not converge (see report diagnostics)",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _prediction_series(pred):
    names = []
    cols = []
    for c, name in enumerate(pred.names or tuple(f"ch{c}" for c in range(pred.mean.shape[1]))):
        names += [f"{name}_mean", f"{name}_sd"]
        cols += [pred.mean[:, c], pred.sd[:, c]]
    return TimeSeries(pred.times, np.column_stack(cols), tuple(names))


def cmd_predict(cfg, args):
    horizon = float(args.horizon) if args.horizon is not None else None
    system_dt = float(cfg.model.get("dt", "0.01"))
    out = cfg.output_dir / "prediction.csv"
    if horizon is not None and horizon <= 0:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text("time\n")
        print(f"horizon is zero; wrote empty prediction to {out}")
        return EXIT_OK

    def window(x, y, parts):
        used = cfg.partition_size * cfg.n_partitions
        count = len(x) - used if horizon is None else int(round(horizon / system_dt))
        if count <= 0 or used + count > len(x):
            raise ValidationError(f"prediction window of {count} samples does not fit in the "
                                  f"{len(x) - used} samples after the training data")
        return Partition(len(parts) + 1, x.window(used, used + count),
                         y.window(used, used + count), used)

    x, y, system, parts, result, selection = _fit(cfg, args, x_next=window)
    pred = result.predictive
    series = _prediction_series(pred)
    write_series(out, series, f"mixture of {pred.n_samples} hyper-parameter samples")
    used = cfg.partition_size * cfg.n_partitions
    y_new = y.values[used:used + len(pred.times)]
    baseline = noise_only_prediction(window(x, y, parts), result.deltas[-1], result.states[-1],
                                     system)
    summary = {
        "horizon_samples": len(pred.times),
        "n_samples": pred.n_samples,
        "n_dropped": pred.n_dropped,
        "coverage_3sd": pred.coverage(y_new, 3.0),
        "baseline_coverage_3sd": baseline.coverage(y_new, 3.0),
        "converged": result.converged,
    }
    report = _report(cfg, result, selection)
    report["prediction"] = summary
    _write_json(cfg.output_dir / "report.json", report)
    print(f"prediction written to {out}; ±3SD coverage {summary['coverage_3sd']:.3f} "
          f"(noise-only baseline {summary['baseline_coverage_3sd']:.3f})")
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def cmd_select_order(cfg, args):
    x, y = _load_data(cfg)
    system = build_system(cfg, "model")
    parts = _training(cfg, x, y)
    m_max = args.m_max if args.m_max is not None else cfg.m_max
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        selection = select_order(parts, system, m_max, fit_options(cfg))
    print(selection.table())
    print(f"selected m = {selection.m}")
    path = cfg.output_dir / "order.csv"
    rows = np.array([[s.m, s.score, s.log_likelihood, s.n_delta] for s in selection.scores])
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, rows, delimiter=",", fmt="%.17g",
               header="BIC = log L - (N_delta/2) log(n N_o N_D)\nm,score,log_likelihood,n_delta")
    ok = all(s.converged for s in selection.scores)
    return EXIT_OK if ok else EXIT_NOT_CONVERGED


def _kernel_from_config(source):
    parser_section = source.get("kernel", {})
    keys = ("sigma_sq", "len_sq", "omega", "noise_sq")
    if not all(k in parser_section for k in keys):
        return None

    def floats(k):
        return [float(v) for v in parser_section[k].replace(";", ",").split(",") if v.strip()]
    return MmteParams(floats("sigma_sq"), floats("len_sq"), floats("omega"),
                      floats("noise_sq")[0])


def cmd_psd(cfg, args, raw):
    out = cfg.output_dir / "psd.csv"
    phi = _kernel_from_config(raw)
    if phi is not None:
        w = np.linspace(args.omega_min, args.omega_max, args.points)
        s = kernel_psd(w, phi)
        series = TimeSeries(w, s, ("psd",))
        write_series(out, series, "kernel spectral density; first column is angular "
                                  "frequency (rad/s), not time")
        peaks = [float(w[i]) for i in signal.find_peaks(s)[0]]
        print("local maxima (rad/s): " + ", ".join(f"{p:.3f}" for p in peaks))
    else:
        x, y = _load_data(cfg)
        system = build_system(cfg, "model")
        parts = _training(cfg, x, y)
        res = model_residuals(parts, system, system.theta_nominal)
        spec = residual_psd(res, system.dt)
        series = TimeSeries(spec.frequencies, spec.power, ("psd",))
        write_series(out, series, "residual spectral density; first column is frequency (Hz)")
        peaks = suggest_modes(spec, cfg.m_max)
        print("residual peaks (Hz): " + ", ".join(f"{p / (2 * np.pi):.3f}" for p in peaks))
    print(f"spectrum written to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _m_arg(text):
    if text.strip().lower() == "auto":
        return "auto"
    try:
        m = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("expected an integer or 'auto'") from None
    if m < 1:
        raise argparse.ArgumentTypeError("m must be >= 1")
    return m


def build_parser():
    parser = argparse.ArgumentParser(prog="mmtesid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="experiment INI file")
    common.add_argument("--seed", type=int, help="base seed replacing all configured seeds")
    common.add_argument("--m", type=_m_arg, help="kernel order or 'auto'")
    common.add_argument("--partitions", type=int, help="number of partitions N_D")
    common.add_argument("--partition-size", type=int, help="samples per partition n")
    common.add_argument("--out", type=Path, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", parents=[common], help="generate synthetic data")
    sim.add_argument("--noise", type=float, help="measurement noise as a fraction of RMS")
    sub.add_parser("identify", parents=[common], help="sequential identification")
    pred = sub.add_parser("predict", parents=[common], help="predict the held-out window")
    pred.add_argument("--horizon", type=float, help="prediction window in seconds")
    sel = sub.add_parser("select-order", parents=[common], help="BIC kernel-order sweep")
    sel.add_argument("--m-max", type=int, help="largest order to score")
    psd = sub.add_parser("psd", parents=[common],
                         help="kernel spectral density, or residual spectrum without [kernel] "
                              "parameters")
    psd.add_argument("--omega-min", type=float, default=0.0)
    psd.add_argument("--omega-max", type=float, default=20.0)
    psd.add_argument("--points", type=int, default=512)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = _apply_overrides(cfg, args)
        if args.command == "simulate":
            return cmd_simulate(cfg, args)
        if args.command == "identify":
            return cmd_identify(cfg, args)
        if args.command == "predict":
            return cmd_predict(cfg, args)
        if args.command == "select-order":
            return cmd_select_order(cfg, args)
        raw = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        raw.read(args.config)
        return cmd_psd(cfg, args, {s: dict(raw[s]) for s in raw.sections()})
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
