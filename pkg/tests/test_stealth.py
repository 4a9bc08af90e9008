import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ftdba import model as M
from ftdba.errors import DimensionMismatch, EmptyDataset, UntrainedModel
from ftdba.fedsim import FedConfig, TriggerKit, dataset_for, run_attack
from ftdba.fractal import koch_ifs
from ftdba.raster import EmbedConfig
from ftdba.stealth import (
    StealthAccumulator,
    gradient_deviation,
    kl_gradient_bound,
    kl_histogram,
    lipschitz_estimate,
    pinsker_check,
    psnr,
    ssim,
    trigger_strength,
)

EMB = EmbedConfig()


@pytest.fixture(scope="module")
def trained():
    cfg = FedConfig(rounds=20, malicious_ratio=0.0)
    res = run_attack(cfg)
    return res.params, dataset_for(cfg)


@pytest.fixture(scope="module")
def kits():
    return TriggerKit(koch_ifs(), EMB, 32, 32), TriggerKit(koch_ifs(), EMB, 32, 32, kind="block")


def applier(patch):
    return lambda x: EMB.apply(x, patch)


def ssim_oracle(a, b, w=8, c1=0.01**2, c2=0.03**2):
    # explicit loop over every fully contained window
    vals = []
    for r in range(a.shape[0] - w + 1):
        for c in range(a.shape[1] - w + 1):
            pa, pb = a[r:r + w, c:c + w], b[r:r + w, c:c + w]
            ma, mb = pa.mean(), pb.mean()
            va, vb = pa.var(), pb.var()
            cov = ((pa - ma) * (pb - mb)).mean()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_kl_identical_is_zero():
    x = np.random.default_rng(0).random((20, 16, 16))
    assert kl_histogram(x, x) == 0.0


def test_kl_offset_noise_is_large():
    u = np.random.default_rng(2).random((1000, 16, 16))
    kl = kl_histogram(u, np.clip(u + 0.5, 0, 1))
    assert kl > 0.5
    # frozen from the histogram computation above, in nats
    assert kl == pytest.approx(2.459003, abs=1e-5)


def test_kl_matches_scipy_entropy():
    from scipy.stats import entropy

    rng = np.random.default_rng(3)
    a, b = rng.random((50, 8, 8)), rng.random((50, 8, 8)) ** 2
    p = np.histogram(b, 64, (0, 1))[0] + 1e-10
    q = np.histogram(a, 64, (0, 1))[0] + 1e-10
    assert kl_histogram(a, b, bins=64) == pytest.approx(entropy(p, q), rel=1e-10)


def test_kl_anchor_region():
    x = np.zeros((4, 16, 16))
    y = x.copy()
    y[:, 0:4, 0:4] = 1.0
    assert kl_histogram(x, y, region=(8, 8, 4)) == 0.0
    assert kl_histogram(x, y, region=(0, 0, 4)) > kl_histogram(x, y)


def test_kl_errors():
    x = np.zeros((2, 8, 8))
    with pytest.raises(EmptyDataset):
        kl_histogram(x[:0], x)
    with pytest.raises(ValueError):
        kl_histogram(x, x, bins=8)


def test_kl_gradient_bound_examples():
    assert kl_gradient_bound(1.0, 0.05, 1) == pytest.approx((0.00125, 0.00125))
    assert kl_gradient_bound(1.0, 0.0, 1024) == (0.0, 0.0)
    assert kl_gradient_bound(1.0, 0.05, 20)[0] == pytest.approx(0.025)


def test_ssim_examples(trained):
    _, ds = trained
    x = ds.x_test[0]
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ssim(x, 1 - x) < 0.2
    kit = TriggerKit(koch_ifs(), EMB, 32, 32)
    poisoned = EMB.apply(ds.x_test[:20], kit.global_patch())
    assert min(ssim(a, b) for a, b in zip(ds.x_test[:20], poisoned)) >= 0.95


def test_ssim_matches_window_oracle():
    rng = np.random.default_rng(4)
    a = rng.random((12, 14))
    b = np.clip(a + rng.normal(0, 0.2, a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_oracle(a, b), rel=1e-9)


def test_ssim_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        ssim(np.zeros((8, 8)), np.zeros((8, 9)))
    with pytest.raises(DimensionMismatch):
        psnr(np.zeros((8, 8)), np.zeros((9, 8)))


def test_psnr_examples():
    x = np.random.default_rng(5).random((8, 8))
    assert psnr(x, x) == 100.0
    assert psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0
    assert psnr(x, x + 0.1) == pytest.approx(20.0)


def test_psnr_floor_under_constraint(trained):
    _, ds = trained
    kit = TriggerKit(koch_ifs(), EmbedConfig(alpha=1.0), 32, 32)
    poisoned = EmbedConfig(alpha=1.0).apply(ds.x_test[:50], kit.global_patch())
    assert min(psnr(a, b) for a, b in zip(ds.x_test[:50], poisoned)) >= -20 * math.log10(0.05)


def test_trigger_strength_needs_training():
    p = M.init_params(64, 3, hidden=4)
    with pytest.raises(UntrainedModel):
        trigger_strength(p, np.zeros((2, 8, 8)), lambda x: x)


def test_trigger_strength_orderings(trained, kits):
    params, ds = trained
    x = ds.x_test[:300]
    fractal, block = kits
    assert trigger_strength(params, x, lambda z: z) == 0.0
    glob = trigger_strength(params, x, applier(fractal.global_patch()))
    block_subs = [trigger_strength(params, x, applier(block.sub_patch(w))) for w in block.words]
    fractal_subs = [trigger_strength(params, x, applier(fractal.sub_patch(w))) for w in fractal.words]
    assert glob >= max(block_subs)
    assert np.mean(fractal_subs) > np.mean(block_subs)
    assert min(fractal_subs) > max(block_subs)


def test_gradient_deviation_zero_for_identical(trained):
    params, ds = trained
    x = ds.x_test[0]
    assert gradient_deviation(params, x, x, 3, 3) == 0.0


def test_gradient_deviation_within_estimated_lipschitz(trained, kits):
    params, ds = trained
    fractal, _ = kits

    def pairs(n, seed):
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(ds.x_test), n, replace=False)
        x, y = ds.x_test[idx], ds.y_test[idx]
        xp = np.empty_like(x)
        for i in range(n):
            d = float(np.clip(rng.normal(0, 0.4 * math.pi), -math.pi, math.pi))
            xp[i] = EMB.apply(x[i:i + 1], fractal.sub_patch(fractal.words[rng.integers(16)], d))[0]
        return x, y, xp

    x, y, xp = pairs(1000, 0)
    lip = lipschitz_estimate(params, x, xp, y, 0)
    hx, hy, hxp = pairs(100, 1)
    for a, t, b in zip(hx, hy, hxp):
        assert gradient_deviation(params, a, b, int(t), 0) <= lip * np.linalg.norm(b - a)


def test_pinsker_check_arithmetic():
    ok, rhs = pinsker_check(0.1, [0.5, 0.5])
    assert ok and rhs == pytest.approx(0.125)
    ok, rhs = pinsker_check(0.2, [0.5, 0.5])
    assert not ok


def test_accumulator_report_keys():
    acc = StealthAccumulator((2, 2, 4))
    x = np.random.default_rng(6).random((5, 8, 8))
    acc.add(x, np.clip(x + 0.03, 0, 1))
    rep = acc.report(grad_dev_mean=1.5, input_dim=64)
    import json

    keys = list(json.loads(rep.to_json()))
    assert keys == ["kl_global", "kl_anchor", "ssim_mean", "psnr_mean_db", "grad_dev_mean",
                    "kl_bound_d", "kl_bound_d1"]
    assert rep.kl_bound_d1 == pytest.approx(0.5 * 0.03**2, rel=1e-6)
    assert rep.kl_global == pytest.approx(kl_histogram(x, np.clip(x + 0.03, 0, 1)))


images = arrays(np.float64, (3, 10, 10), elements=st.floats(0, 1))


@settings(max_examples=40, deadline=None)
@given(images, images)
def test_kl_non_negative(a, b):
    assert kl_histogram(a, b) >= 0.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (10, 10), elements=st.floats(0, 1)),
       arrays(np.float64, (10, 10), elements=st.floats(0, 1)))
def test_ssim_symmetric_and_bounded(a, b):
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-12)
    assert -1.0 - 1e-9 <= s <= 1.0 + 1e-9
