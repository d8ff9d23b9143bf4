import math

import numpy as np
import pytest

from talkfield.face_model import ShapeCoeffs, evaluate_shape
from talkfield.metrics import PSNR_CAP, MetricReport, envelope_correlation, mean_abs_diff, mouth_opening, psnr


def test_psnr_identical_is_capped(rng):
    a = rng.uniform(size=(4, 4, 3))
    assert psnr(a, a) == PSNR_CAP == 99.0


def test_psnr_closed_form():
    a = np.zeros((10, 10))
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def test_psnr_random_oracle_and_symmetry(rng):
    a, b = rng.uniform(size=(8, 8, 3)), rng.uniform(size=(8, 8, 3))
    flat = [(x - y) ** 2 for x, y in zip(a.ravel(), b.ravel())]
    ref = 10 * math.log10(1.0 / (math.fsum(flat) / len(flat)))
    assert abs(psnr(a, b) - ref) < 1e-10
    assert psnr(a, b) == psnr(b, a)
    with pytest.raises(ValueError):
        psnr(a, b[:4])


def test_mean_abs_diff(rng):
    a = rng.uniform(size=(3, 3))
    assert mean_abs_diff(a, a) == 0.0
    assert mean_abs_diff(a, a + 0.25) == pytest.approx(0.25, abs=1e-15)


def test_mouth_opening_baseline_and_oracle(basis0):
    up, lo = basis0.lip_pair
    d0 = abs(basis0.mean_shape[up, 1] - basis0.mean_shape[lo, 1])
    assert mouth_opening(np.zeros(6), basis0) == d0
    beta = np.array([0.4, -0.2, 0.1, 0.0, 0.3, -0.1])
    v = evaluate_shape(basis0, ShapeCoeffs(np.zeros(8), beta))
    assert mouth_opening(beta, basis0) == pytest.approx(abs(v[up, 1] - v[lo, 1]), abs=1e-15)


def test_mouth_opening_grows_with_jaw(basis0):
    values = [mouth_opening(s * np.eye(6)[0], basis0) for s in (0.0, 0.5, 1.0, 1.5, 2.0)]
    assert all(a < b for a, b in zip(values, values[1:]))
    assert mouth_opening(np.eye(6)[0], basis0) == mouth_opening(np.eye(6)[0], basis0)


def test_correlation_examples(rng):
    a = rng.normal(size=50)
    assert envelope_correlation(a, a) == pytest.approx(1.0, abs=1e-15)
    assert envelope_correlation(a, -a) == pytest.approx(-1.0, abs=1e-15)
    b = rng.normal(size=50)
    ma, mb = sum(a) / 50, sum(b) / 50
    num = sum((x - ma) * (y - mb) for x, y in zip(a, b))
    den = math.sqrt(sum((x - ma) ** 2 for x in a)) * math.sqrt(sum((y - mb) ** 2 for y in b))
    assert abs(envelope_correlation(a, b) - num / den) < 1e-12


def test_correlation_affine_invariance(rng):
    a, b = rng.normal(size=30), rng.normal(size=30)
    r = envelope_correlation(a, b)
    assert envelope_correlation(3.0 * a + 7.0, b) == pytest.approx(r, abs=1e-12)
    assert envelope_correlation(a, 0.5 * b - 2.0) == pytest.approx(r, abs=1e-12)


def test_correlation_errors():
    with pytest.raises(ValueError, match="constant"):
        envelope_correlation(np.ones(5), np.arange(5.0))
    with pytest.raises(ValueError):
        envelope_correlation([1.0, 2.0], [2.0, 1.0])
    with pytest.raises(ValueError):
        envelope_correlation(np.arange(4.0), np.arange(5.0))


def test_metric_report():
    r = MetricReport.of("psnr", [30.0, 40.0, 35.0])
    assert (r.mean, r.min, r.max) == (35.0, 30.0, 40.0)
    assert r.summary() == {"name": "psnr", "mean": 35.0, "min": 30.0, "max": 40.0, "count": 3}
    with pytest.raises(ValueError):
        MetricReport.of("x", [1.0, float("nan")])
    with pytest.raises(ValueError):
        MetricReport.of("x", [])
