import json
import subprocess
import sys

import numpy as np
import pytest
from scipy import signal

from mmtesid.cli import EXIT_INVALID, EXIT_NOT_CONVERGED, EXIT_OK, main
from mmtesid.data import read_series

QUICK = """
[model]
type = shear
masses = 5.63, 6.03, 4.66
stiffness = 17.98, 25.58, 24.97
stiffness_scale = 1000
free = 1, 2
observed = 1, 2
dt = 0.01
damping = rayleigh
rayleigh_alpha = 0.0005
rayleigh_beta = 2.0
excitation_std = 10
holdout = 100

[kernel]
m = 1
m_max = 2

[partitions]
size = 100
count = 2

[noise]
rms_fraction = 0.05
theta_std = 0.01
seed = 5

[optimizer]
max_eval = {max_eval}
max_iter = {max_iter}
kernel_warmup = false
n_samples = 20

[output]
dir = out
"""


def write_config(tmp_path, max_eval=25, max_iter=400, extra=""):
    p = tmp_path / "quick.ini"
    p.write_text(QUICK.format(max_eval=max_eval, max_iter=max_iter) + extra)
    return p


@pytest.fixture
def simulated(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
    return cfg, tmp_path / "out"


def test_simulate_writes_expected_rows(simulated):
    _, out = simulated
    x, y = read_series(out / "x.csv"), read_series(out / "y.csv")
    assert len(x) == len(y) == 300
    assert y.names == ("acc1", "acc2")
    theta = read_series(out / "theta_true.csv")
    assert theta.values.shape == (3, 2)


def test_simulate_is_deterministic_and_seed_overrides(tmp_path):
    cfg = write_config(tmp_path)
    runs = []
    for sub, seed in (("a", None), ("b", None), ("c", 99)):
        args = ["simulate", "--config", str(cfg), "--out", str(tmp_path / sub)]
        if seed is not None:
            args += ["--seed", str(seed)]
        assert main(args) == EXIT_OK
        runs.append(read_series(tmp_path / sub / "y.csv").values)
    assert np.array_equal(runs[0], runs[1])
    assert not np.array_equal(runs[0], runs[2])


def test_zero_noise_gives_clean_response(tmp_path):
    cfg = write_config(tmp_path, extra="")
    text = cfg.read_text().replace("theta_std = 0.01", "theta_std = 0.0")
    cfg.write_text(text)
    assert main(["simulate", "--config", str(cfg), "--noise", "0"]) == EXIT_OK
    from mmtesid.cli import build_system
    from mmtesid.data import load_config
    from mmtesid.structure import simulate_response
    c = load_config(cfg)
    x = read_series(tmp_path / "out" / "x.csv")
    y = read_series(tmp_path / "out" / "y.csv")
    clean = simulate_response(build_system(c, "truth"), x, [1.0, 1.0]).values
    np.testing.assert_allclose(y.values, clean, rtol=1e-12, atol=1e-15)


def test_identify_single_partition(simulated, capsys):
    cfg, out = simulated
    code = main(["identify", "--config", str(cfg), "--partitions", "1"])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    report = json.loads((out / "report.json").read_text())
    assert report["n_partitions"] == 1 and report["m"] == 1
    assert len(report["delta"]) == 2 and len(report["theta_mean"]) == 2
    assert "theta1: mean" in capsys.readouterr().out


def test_predict_zero_horizon(simulated):
    cfg, out = simulated
    assert main(["predict", "--config", str(cfg), "--horizon", "0"]) == EXIT_OK
    assert (out / "prediction.csv").read_text() == "time\n"


def test_predict_writes_mean_and_sd(simulated):
    cfg, out = simulated
    code = main(["predict", "--config", str(cfg), "--horizon", "0.5"])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    pred = read_series(out / "prediction.csv")
    assert len(pred) == 50
    assert pred.names == ("acc1_mean", "acc1_sd", "acc2_mean", "acc2_sd")
    assert np.all(pred.values[:, 1] > 0)
    report = json.loads((out / "report.json").read_text())
    assert 0.0 <= report["prediction"]["coverage_3sd"] <= 1.0


def test_select_order_single_row(simulated, capsys):
    cfg, out = simulated
    code = main(["select-order", "--config", str(cfg), "--m-max", "1"])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    rows = np.atleast_2d(np.loadtxt(out / "order.csv", delimiter=","))
    assert rows.shape == (1, 4) and rows[0, 0] == 1
    assert "selected m = 1" in capsys.readouterr().out


def test_psd_of_configured_kernel(tmp_path, capsys):
    cfg = tmp_path / "k.ini"
    cfg.write_text("[model]\nmasses = 1\nstiffness = 1\n[kernel]\nm = 2\n"
                   "sigma_sq = 2, 8\nlen_sq = 5, 2.5\nomega = 2, 10\nnoise_sq = 0.5\n"
                   "[output]\ndir = out\n")
    assert main(["psd", "--config", str(cfg)]) == EXIT_OK
    spec = read_series(tmp_path / "out" / "psd.csv")
    w, s = spec.times, spec.values[:, 0]
    assert w.size == 512 and w[-1] == pytest.approx(20.0)
    peaks = w[signal.find_peaks(s)[0]]
    assert len(peaks) == 2
    assert abs(peaks[0] - 2.0) < 0.2 and abs(peaks[1] - 10.0) < 0.2
    assert "local maxima" in capsys.readouterr().out


def test_psd_of_residuals(simulated):
    cfg, out = simulated
    assert main(["psd", "--config", str(cfg), "--partition-size", "150"]) == EXIT_OK
    assert len(read_series(out / "psd.csv")) > 1


def test_non_converged_fit_exits_one(tmp_path):
    cfg = write_config(tmp_path, max_eval=3, max_iter=1)
    assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
    assert main(["identify", "--config", str(cfg)]) == EXIT_NOT_CONVERGED
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert report["converged"] is False


@pytest.mark.parametrize("args", [
    ["identify", "--config", "missing.ini"],
    ["identify", "--partitions", "0"],
    ["predict", "--horizon", "100"],
])
def test_invalid_input_exits_two(simulated, args, capsys):
    cfg, _ = simulated
    if "--config" not in args:
        args = args + ["--config", str(cfg)]
    assert main(args) == EXIT_INVALID
    assert "error:" in capsys.readouterr().err


def test_identify_without_data(tmp_path):
    assert main(["identify", "--config", str(write_config(tmp_path))]) == EXIT_INVALID


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "mmtesid", "--version"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and res.stdout.startswith("mmtesid")


def test_simulate_shipped_benchmark_config(tmp_path):
    from pathlib import Path
    cfg = Path(__file__).resolve().parents[1] / "configs" / "benchmark12.ini"
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
    x, y = read_series(tmp_path / "x.csv"), read_series(tmp_path / "y.csv")
    assert len(x) == len(y) == 10 * 500 + 500
    assert x.dt == pytest.approx(0.001)
    assert read_series(tmp_path / "theta_true.csv").values.shape == (11, 2)


def test_predict_is_reproducible(simulated):
    cfg, out = simulated
    runs = []
    for _ in range(2):
        main(["predict", "--config", str(cfg), "--horizon", "0.3"])
        runs.append((out / "prediction.csv").read_bytes())
    assert runs[0] == runs[1]
