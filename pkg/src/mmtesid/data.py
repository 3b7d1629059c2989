"""Synthetic data generation, partitioning and file/config handling."""

import configparser
import csv
import io
import os
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import ValidationError
from .kernel import TimeGrid
from .series import TimeSeries, uniform_times

OUTPUT_DIR_ENV = "MMTESID_OUTPUT_DIR"


# ---------------------------------------------------------------------------
# Partitions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Partition:
    """One contiguous data segment.

    ``start`` is the global sample index of the first row.  ``initial_state``
    is the model state at the start of the segment; None means at rest.
    ``y`` may be None for windows that are only predicted.
    """

    index: int
    x: TimeSeries
    y: Optional[TimeSeries]
    start: int
    initial_state: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.y is not None and len(self.y) != len(self.x):
            raise ValidationError("partition inputs and outputs differ in length")

    @property
    def n(self):
        return len(self.x)

    @property
    def times(self):
        return self.x.times

    @property
    def dt(self):
        return self.x.dt

    @property
    def grid(self):
        return TimeGrid(float(self.times[0]), self.dt, self.n)

    def with_initial_state(self, state):
        return replace(self, initial_state=None if state is None else np.asarray(state, float))


def partition_dataset(x, y, n):
    """Split into ``floor(total / n)`` contiguous partitions of ``n`` samples.

    A trailing remainder is dropped with a warning.
    """
    total = len(x)
    if y is not None and len(y) != total:
        raise ValidationError("inputs and outputs differ in length")
    if n < 1 or n > total:
        raise ValidationError(f"partition size {n} is outside [1, {total}]")
    n_parts = total // n
    rest = total - n_parts * n
    if rest:
        warnings.warn(f"dropping {rest} trailing samples that do not fill a partition",
                      stacklevel=2)
    parts = []
    for i in range(n_parts):
        a, b = i * n, (i + 1) * n
        parts.append(Partition(i + 1, x.window(a, b), None if y is None else y.window(a, b), a))
    return parts


def concatenate(parts, which="y"):
    series = [getattr(p, which) for p in parts]
    return TimeSeries(np.concatenate([s.times for s in series]),
                      np.concatenate([s.values for s in series]), series[0].names)


# ---------------------------------------------------------------------------
# Synthetic signals
# ---------------------------------------------------------------------------

def generate_gwn_excitation(n, dt, std, seed, n_channels=1, t0=0.0, names=None):
    """Zero-mean Gaussian white noise force record."""
    if std <= 0:
        raise ValidationError("excitation standard deviation must be positive")
    rng = np.random.default_rng(seed)
    values = rng.normal(0.0, std, size=(int(n), n_channels))
    return TimeSeries(uniform_times(int(n), dt, t0), values,
                      names or tuple(f"force{c}" for c in range(n_channels)))


def draw_theta_sequence(nominal, rel_std, n_segments, seed):
    """Per-segment parameters ``theta_i ~ N(nominal, (rel_std * |nominal|)^2)``."""
    nominal = np.atleast_1d(np.asarray(nominal, dtype=float))
    if rel_std < 0:
        raise ValidationError("parameter variability must be non-negative")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((int(n_segments), nominal.size))
    return nominal + rel_std * np.abs(nominal) * z


def simulate_segments(system, x, thetas, n, initial_state=None):
    """Response to ``x`` with parameters switching every ``n`` samples.

    The state carries over between segments; samples past the last full
    segment use the last row of ``thetas``.
    """
    from .structure import final_state, simulate_response

    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    total = len(x)
    out = []
    z = initial_state
    k = 0
    for start in range(0, total, n):
        stop = min(start + n, total)
        theta = thetas[min(k, thetas.shape[0] - 1)]
        seg = x.window(start, stop)
        out.append(simulate_response(system, seg, theta, z).values)
        z = final_state(system, seg, theta, z)
        k += 1
    names = tuple(f"acc{d}" for d in system.observed_dofs)
    return TimeSeries(x.times, np.vstack(out), names)


def rms(values, axis=0):
    values = np.asarray(values, dtype=float)
    return np.sqrt(np.mean(values * values, axis=axis))


def add_measurement_noise(signal, rms_fraction, seed):
    """Add independent Gaussian noise with std ``rms_fraction * RMS(channel)``."""
    if rms_fraction < 0:
        raise ValidationError("noise fraction must be non-negative")
    if rms_fraction == 0:
        return signal.with_values(signal.values.copy())
    rng = np.random.default_rng(seed)
    scale = rms_fraction * rms(signal.values)
    noise = rng.standard_normal(signal.values.shape) * scale
    return signal.with_values(signal.values + noise)


# ---------------------------------------------------------------------------
# Time-series files
# ---------------------------------------------------------------------------

def write_series(path, series, header_comment=None):
    """Comma-separated: ``time`` then one column per channel, 17 significant digits."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if header_comment:
            for line in str(header_comment).splitlines():
                fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(("time",) + tuple(series.names))
        for t, row in zip(series.times, series.values):
            writer.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in row])


def read_series(path):
    path = Path(path)
    with open(path, newline="") as fh:
        text = fh.read()
    lines = [(k + 1, ln) for k, ln in enumerate(text.splitlines())
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValidationError(f"{path}: file is empty")
    header_no, header_line = lines[0]
    header = next(csv.reader(io.StringIO(header_line)))
    if len(header) < 2 or header[0].strip().lower() != "time":
        raise ValidationError(f"{path}:{header_no}: header must start with 'time' and name "
                              "at least one channel")
    if len(lines) == 1:
        raise ValidationError(f"{path}: no data rows")
    rows = []
    for line_no, line in lines[1:]:
        fields = next(csv.reader(io.StringIO(line)))
        if len(fields) != len(header):
            raise ValidationError(
                f"{path}:{line_no}: expected {len(header)} fields, found {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise ValidationError(f"{path}:{line_no}: non-numeric field") from None
    data = np.array(rows)
    try:
        return TimeSeries(data[:, 0], data[:, 1:], tuple(h.strip() for h in header[1:]))
    except ValidationError as exc:
        raise ValidationError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

SECTIONS = ("model", "kernel", "partitions", "noise", "optimizer", "output")


def _floats(text):
    return tuple(float(v) for v in str(text).replace(";", ",").split(",") if v.strip())


def _ints(text):
    return tuple(int(v) for v in str(text).replace(";", ",").split(",") if v.strip())


@dataclass
class ExperimentConfig:
    model: dict
    kernel_order: object = 3          # int or "auto"
    m_max: int = 4
    truncation_tol: Optional[float] = None
    partition_size: int = 500
    n_partitions: int = 10
    noise_fraction: float = 0.05
    theta_variability: float = 0.0
    seeds: dict = field(default_factory=lambda: {"excitation": 1, "noise": 2, "theta": 3,
                                                 "optimizer": 4, "predict": 5})
    optimizer: dict = field(default_factory=dict)
    output_dir: Path = Path("out")
    x_path: Optional[Path] = None
    y_path: Optional[Path] = None
    source: Optional[Path] = None

    @property
    def total_samples(self):
        return self.partition_size * self.n_partitions

    def validate(self, require_data=False):
        if self.partition_size < 16:
            raise ValidationError("[partitions] size must be at least 16")
        if self.n_partitions < 1:
            raise ValidationError("[partitions] count must be at least 1")
        if self.kernel_order != "auto" and int(self.kernel_order) < 1:
            raise ValidationError("[kernel] m must be >= 1 or 'auto'")
        if self.noise_fraction < 0:
            raise ValidationError("[noise] rms_fraction must be non-negative")
        if require_data:
            for p in (self.x_path, self.y_path):
                if p is None or not Path(p).exists():
                    raise ValidationError(f"referenced data file {p} does not exist")
        return self


def load_config(path, env=None):
    """Read an INI-style experiment configuration.

    The ``MMTESID_OUTPUT_DIR`` environment variable overrides ``[output] dir``.
    """
    env = os.environ if env is None else env
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ValidationError(f"{path}: {exc}") from None
    return config_from_parser(parser, base=path.parent, env=env, source=path)


def config_from_parser(parser, base=Path("."), env=None, source=None):
    env = os.environ if env is None else env
    if not parser.has_section("model"):
        raise ValidationError("config is missing the [model] section")
    model = dict(parser["model"])
    cfg = ExperimentConfig(model=model, source=source)
    if parser.has_section("kernel"):
        k = parser["kernel"]
        m = k.get("m", "3").strip().lower()
        cfg.kernel_order = "auto" if m == "auto" else int(m)
        cfg.m_max = k.getint("m_max", 4)
        tol = k.get("truncation_tol", "").strip().lower()
        cfg.truncation_tol = None if tol in ("", "none", "off") else float(tol)
    if parser.has_section("partitions"):
        p = parser["partitions"]
        cfg.partition_size = p.getint("size", cfg.partition_size)
        cfg.n_partitions = p.getint("count", cfg.n_partitions)
    if parser.has_section("noise"):
        nz = parser["noise"]
        cfg.noise_fraction = nz.getfloat("rms_fraction", cfg.noise_fraction)
        cfg.theta_variability = nz.getfloat("theta_std", cfg.theta_variability)
        for key in list(cfg.seeds):
            if f"{key}_seed" in nz:
                cfg.seeds[key] = nz.getint(f"{key}_seed")
        if "seed" in nz:
            base_seed = nz.getint("seed")
            cfg.seeds = {k: base_seed + i for i, k in enumerate(cfg.seeds)}
    if parser.has_section("optimizer"):
        cfg.optimizer = dict(parser["optimizer"])
    out = None
    if parser.has_section("output"):
        o = parser["output"]
        out = o.get("dir")
        if o.get("x"):
            cfg.x_path = _resolve(base, o.get("x"))
        if o.get("y"):
            cfg.y_path = _resolve(base, o.get("y"))
    if env.get(OUTPUT_DIR_ENV):
        out = env[OUTPUT_DIR_ENV]
    cfg.output_dir = _resolve(base, out or "out")
    if cfg.x_path is None:
        cfg.x_path = cfg.output_dir / "x.csv"
    if cfg.y_path is None:
        cfg.y_path = cfg.output_dir / "y.csv"
    return cfg.validate()


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def model_floats(cfg, key, default=None):
    if key not in cfg.model:
        if default is None:
            raise ValidationError(f"[model] is missing '{key}'")
        return default
    return _floats(cfg.model[key])


def model_ints(cfg, key, default=None):
    if key not in cfg.model:
        if default is None:
            raise ValidationError(f"[model] is missing '{key}'")
        return default
    return _ints(cfg.model[key])
