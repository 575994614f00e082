import csv
import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from eqkd.config import replace
from eqkd.experiments import LOSSES
from eqkd.skr_model import capture_fraction, export_scan, optimize_mu, predict

# erf(64 / (sigma sqrt 2)) at FWHM 100 ps, and at the simulated hypot(30, 30) ps.
CAPTURE_FWHM100 = 0.86821
CAPTURE_DEFAULT = 0.86857


def test_capture_fraction(cfg):
    assert capture_fraction(cfg) == pytest.approx(CAPTURE_DEFAULT, abs=1e-5)
    sigma = 100 / (2 * math.sqrt(2 * math.log(2)))
    assert math.erf(64 / (sigma * math.sqrt(2))) == pytest.approx(CAPTURE_FWHM100, abs=1e-5)
    assert capture_fraction(cfg) == pytest.approx(CAPTURE_FWHM100, abs=1e-3)


def test_low_mu_limit_is_random(cfg):
    assert predict(1e-15, cfg).qber_z == pytest.approx(0.5, abs=0.01)
    assert predict(1e-15, cfg).secret_rate == 0.0


def test_no_darks_low_mu_limit_is_intrinsic(cfg):
    c = replace(cfg, **{"detectors.dark_rate_hz": 0.0})
    assert predict(1e-9, c).qber_z == pytest.approx(cfg.source.intrinsic_qber_z, abs=1e-6)


def test_optimum_qber(cfg):
    mu, best = optimize_mu(cfg)
    assert best.qber_z == pytest.approx(0.05, abs=0.01)
    assert 1e-3 < mu < 0.5
    # Golden-section optimum beats its neighbours at the stated tolerance.
    for m in (mu * 0.99, mu * 1.01):
        assert predict(m, cfg).secret_rate <= best.secret_rate * (1 + 1e-6)


def test_scan_shape(cfg):
    grid = np.geomspace(1e-4, 0.5, 200)
    preds = [predict(m, cfg) for m in grid]
    qz = np.array([p.qber_z for p in preds])
    skr = np.array([p.secret_rate for p in preds])
    assert np.all(np.diff(qz) > 0)
    k = int(np.argmax(skr))
    assert 0 < k < len(grid) - 1
    assert np.all(np.diff(skr[: k + 1]) >= 0) and np.all(np.diff(skr[k:]) <= 0)


def test_linearized_no_dark_optimum_at_upper_bound(cfg):
    c = replace(cfg, **{"detectors.dark_rate_hz": 0.0})
    mu, _ = optimize_mu(c, (1e-4, 0.5), accidentals=False, dead_time=False)
    assert mu == pytest.approx(0.5, rel=2e-3)


def test_loss_shift_invariance(cfg):
    # With no darks or dead time the rates depend on losses only through eta_A * eta_B.
    c = replace(cfg, **{"detectors.dark_rate_hz": 0.0})
    shifted = replace(c, **{f"losses.{k}": getattr(c.losses, k) + (-3.0 if k[0] == "A" else 3.0)
                            for k in LOSSES})
    mu1, p1 = optimize_mu(c, dead_time=False)
    mu2, p2 = optimize_mu(shifted, dead_time=False)
    assert mu1 == pytest.approx(mu2, rel=1e-3)
    assert p1.secret_rate == pytest.approx(p2.secret_rate, rel=1e-9)
    assert p1.qber_z == pytest.approx(p2.qber_z, rel=1e-9)


@given(st.floats(1e-6, 1.0))
def test_prediction_invariants(mu):
    from eqkd.config import Config

    p = predict(mu, Config())
    assert all(v >= 0 for v in p.singles.values())
    assert min(p.cz, p.az, p.cx, p.ax, p.raw_rate, p.secret_rate) >= 0
    assert 0 <= p.qber_z <= 0.5 and 0 <= p.qber_x <= 0.5
    if p.qber_z > Config().distillation.qber_abort:
        assert p.secret_rate == 0


def test_abort_threshold_truncates_scan(cfg):
    c = replace(cfg, **{"distillation.qber_abort": 0.045})
    mu, best = optimize_mu(c)
    assert best.qber_z <= 0.045
    assert predict(0.2, c).secret_rate == 0.0


def test_export_scan(cfg, tmp_path):
    grid = np.geomspace(1e-4, 0.5, 100)
    text = export_scan(cfg, grid, tmp_path / "scan.csv")
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == ["mu", "skr", "qber_z", "qber_x"] and len(rows) == 101
    assert (tmp_path / "scan.csv").read_text() == text
    for row in rows[1:6]:
        p = predict(float(row[0]), cfg)
        assert float(row[1]) == pytest.approx(p.secret_rate, rel=1e-5)
        assert float(row[2]) == pytest.approx(p.qber_z, rel=1e-5)
    assert export_scan(cfg, []) == "mu,skr,qber_z,qber_x\n"
