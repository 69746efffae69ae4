import json

import numpy as np
import pytest

from l2c.calibration import (
    IDENTITY,
    JANUS_PRO_7B,
    CalibrationParams,
    ObjectiveWeights,
    apply_calibration,
    bisect_scale,
    calibrate_search,
    calibrated_stats,
    calibration_objective,
    params_from_dict,
    read_params,
    write_params,
)
from l2c.distribution import TargetStats, normalized_entropy, softmax
from l2c.otsu import otsu_report_grid
from l2c.synth import synth_corpus
from l2c.tensor_io import StatsConfig


@pytest.fixture(scope="module")
def cosine_corpus():
    return [synth_corpus("cosine", 256, 1024, seed=3)]


def test_params_validation():
    for bad in (dict(scale=0), dict(temperature=-1), dict(smoothing=1.5), dict(bias=float("nan"))):
        with pytest.raises(ValueError):
            CalibrationParams(**bad)
    with pytest.raises(ValueError):
        ObjectiveWeights(0, 0, 0, 0)
    with pytest.raises(ValueError):
        ObjectiveWeights(-1, 0, 0, 0)


def test_identity_is_plain_softmax(rng):
    s = rng.standard_normal((5, 30))
    np.testing.assert_array_equal(apply_calibration(s, IDENTITY), softmax(s))


def test_full_smoothing_is_uniform(rng):
    p = apply_calibration(5 * rng.standard_normal((3, 20)), CalibrationParams(scale=3, smoothing=1.0))
    np.testing.assert_allclose(p, 1 / 20, rtol=0, atol=1e-15)


def test_transform_matches_formula(rng):
    s = rng.standard_normal((4, 12))
    a, b, alpha, eps = 7.0, 0.03, 1.4, 0.02
    z = (a * s + b) / alpha
    e = np.exp(z - z.max(axis=1, keepdims=True))
    want = (1 - eps) * e / e.sum(axis=1, keepdims=True) + eps / 12
    got = apply_calibration(s, CalibrationParams(a, b, alpha, eps))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)
    np.testing.assert_allclose(got.sum(axis=1), 1, atol=1e-14)


def test_janus_config_sharpens_near_flat_cosine_row():
    k = 4096
    row = np.linspace(-1, 0.9, k)
    row[1234] = 1.0
    before = normalized_entropy(softmax(row))
    after = normalized_entropy(apply_calibration(row, JANUS_PRO_7B))
    assert after < before
    assert JANUS_PRO_7B.key() == (29.0381, 0.0, 1.0, 0.01)


def test_argmax_preserved(rng):
    for _ in range(50):
        k = int(rng.integers(2, 200))
        s = rng.standard_normal((3, k))
        params = CalibrationParams(scale=float(rng.uniform(0.1, 60)), bias=float(rng.uniform(-1, 1)),
                                   temperature=float(rng.uniform(0.5, 2)),
                                   smoothing=float(rng.uniform(0, 0.05)))
        np.testing.assert_array_equal(np.argmax(apply_calibration(s, params), axis=1), np.argmax(s, axis=1))


def test_objective_zero_at_own_stats(cosine_corpus):
    p = CalibrationParams(scale=12, temperature=1.1, smoothing=0.01)
    t = calibrated_stats(cosine_corpus, p)
    assert calibration_objective(p, cosine_corpus, t) == 0.0


def test_objective_single_term(cosine_corpus):
    t = calibrated_stats(cosine_corpus, IDENTITY)
    shifted = TargetStats(t.mean_entropy - 0.1, t.mean_conf, t.p95_conf, t.p95_entropy)
    assert calibration_objective(IDENTITY, cosine_corpus, shifted) == pytest.approx(0.01, abs=1e-12)


def test_objective_recompute(rng):
    corpus = [rng.standard_normal((20, 50)), rng.standard_normal((7, 50))]
    params = CalibrationParams(scale=3.3, bias=0.01, temperature=0.8, smoothing=0.03)
    target = TargetStats(0.5, 0.3, 0.6, 0.9)
    h, c = [], []
    for g in corpus:
        for row in g:
            z = (params.scale * row + params.bias) / params.temperature
            p = np.exp(z - z.max())
            p = (1 - params.smoothing) * p / p.sum() + params.smoothing / len(row)
            h.append(-sum(x * np.log(x) for x in p) / np.log(len(row)))
            c.append(p.max())
    pct = lambda v: sorted(v)[int(np.ceil(0.95 * len(v))) - 1]
    want = ((np.mean(h) - 0.5) ** 2 + 0.25 * (np.mean(c) - 0.3) ** 2
            + 0.25 * (pct(c) - 0.6) ** 2 + 0.35 * (pct(h) - 0.9) ** 2)
    assert calibration_objective(params, corpus, target) == pytest.approx(want, rel=1e-10)


def test_objective_empty():
    with pytest.raises(ValueError):
        calibration_objective(IDENTITY, [], TargetStats(0.5, 0.5, 0.5, 0.5))


def test_entropy_strictly_decreasing_in_scale(cosine_corpus):
    hs = [calibrated_stats(cosine_corpus, CalibrationParams(scale=a)).mean_entropy for a in (1, 5, 10, 30, 60)]
    assert all(b < a for a, b in zip(hs, hs[1:]))


def test_bisect_endpoint(cosine_corpus):
    h_lo = calibrated_stats(cosine_corpus, CalibrationParams(scale=1.0)).mean_entropy
    r = bisect_scale(cosine_corpus, h_lo, (1.0, 60.0))
    assert r.scale == 1.0 and r.iterations == 0 and r.bracketed


def test_bisect_hits_sharp_table_entropy():
    corpus = [synth_corpus("cosine", 64, 16384, seed=5)]
    r = bisect_scale(corpus, 0.4153)
    assert r.bracketed and r.converged
    assert abs(r.mean_entropy - 0.4153) <= 0.02
    assert r.iterations <= 60


def test_bisect_uniform_corpus_not_bracketed():
    r = bisect_scale([np.zeros((4, 10))], 0.5)
    assert not r.bracketed and r.scale == 60.0


def test_bisect_errors(cosine_corpus):
    with pytest.raises(ValueError):
        bisect_scale(cosine_corpus, 0.5, (10.0, 1.0))
    with pytest.raises(ValueError):
        bisect_scale([], 0.5)


def test_self_calibration(cosine_corpus):
    true = CalibrationParams(scale=25.0)
    target = calibrated_stats(cosine_corpus, true)
    res = calibrate_search(cosine_corpus, StatsConfig(), target)
    assert abs(res.final_stats.mean_entropy - target.mean_entropy) <= 0.02
    assert res.loss <= calibration_objective(true, cosine_corpus, target) + 1e-6
    losses = [s.loss for s in res.stages]
    assert [s.parameter for s in res.stages] == ["scale", "temperature", "smoothing", "bias"]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_identity_target(cosine_corpus):
    target = calibrated_stats(cosine_corpus, IDENTITY)
    res = calibrate_search(cosine_corpus, StatsConfig(), target)
    assert res.loss <= calibration_objective(IDENTITY, cosine_corpus, target)


def test_search_deterministic(cosine_corpus):
    target = TargetStats(0.5, 0.2, 0.4, 0.7)
    a = calibrate_search(cosine_corpus, StatsConfig(target_stats=target))
    b = calibrate_search([g.copy() for g in cosine_corpus], StatsConfig(target_stats=target))
    assert a.params == b.params and a.loss == b.loss


def test_search_requires_target(cosine_corpus):
    with pytest.raises(ValueError):
        calibrate_search(cosine_corpus, StatsConfig())


def test_sweep_grid_sizes(cosine_corpus):
    res = calibrate_search(cosine_corpus, StatsConfig(target_stats=TargetStats(0.5, 0.2, 0.4, 0.7)))
    assert [len(res.sweep_losses[n]) for n in ("temperature", "smoothing", "bias")] == [16, 11, 21]
    assert 0.5 <= res.params.temperature <= 2.0
    assert 0.0 <= res.params.smoothing <= 0.05
    assert -0.1 <= res.params.bias <= 0.1


def test_bias_stays_at_zero(cosine_corpus):
    # a constant shift cancels inside softmax, so no bias can beat the incumbent
    res = calibrate_search(cosine_corpus, StatsConfig(target_stats=TargetStats(0.5, 0.2, 0.4, 0.7)))
    assert res.params.bias == 0.0


def test_flat_calibrated_toward_sharp_matches_rank():
    sharp = [synth_corpus("sharp", 64, 16384, seed=1)]
    target = calibrated_stats(sharp, IDENTITY)
    target_rank = otsu_report_grid(softmax(sharp[0])).threshold_rank
    enc = [synth_corpus("cosine", 64, 16384, seed=s, d=16) for s in (2, 3)]
    res = calibrate_search(enc, StatsConfig(target_stats=target))
    ranks = [otsu_report_grid(apply_calibration(g, res.params)).threshold_rank for g in enc]
    assert round(float(np.mean(ranks))) == round(target_rank)


def test_params_roundtrip(tmp_path):
    p = CalibrationParams(29.0381, 0.0, 1.0, 0.01)
    write_params(tmp_path / "p.json", p, {"final_loss": 0.5})
    assert read_params(tmp_path / "p.json") == p
    doc = json.loads((tmp_path / "p.json").read_text())
    assert doc["diagnostics"]["final_loss"] == 0.5
    assert params_from_dict({"params": {"scale": 2}}) == CalibrationParams(scale=2.0)
