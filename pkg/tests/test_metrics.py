import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffsketch.adapters import RandomConvPerceptual
from diffsketch.feature_store import Sketch
from diffsketch.metrics import (
    CSV_COLUMNS,
    VARIANT_NAMES,
    EvalRecord,
    ablation_variants,
    evaluate,
    gaussian_window,
    perceptual,
    records_to_csv,
    run_ablation,
    ssim,
)

from oracles import ssim_loop

ADAPTER = RandomConvPerceptual()


def rand_sketch(seed, size=32):
    return Sketch(np.random.default_rng(seed).uniform(size=(size, size, 1)))


def noisy(s, sigma, seed):
    rng = np.random.default_rng(seed)
    return Sketch(np.clip(s.pixels + rng.normal(0, sigma, s.pixels.shape), 0, 1))


def test_window_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11) and w.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(w, w.T)


@pytest.mark.parametrize("seed", range(5))
def test_ssim_matches_window_loop(seed):
    a = rand_sketch(seed)
    b = noisy(a, 0.2, seed + 50)
    assert ssim(a, b) == pytest.approx(ssim_loop(a.pixels, b.pixels), abs=1e-6)


def test_ssim_rgb_matches_loop():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(11, 24))
def test_ssim_identity_and_symmetry(seed, size):
    a, b = rand_sketch(seed, size), rand_sketch(seed + 1, size)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-12
    assert ssim(a, b) <= 1.0 + 1e-12


def test_ssim_errors():
    with pytest.raises(ValueError):
        ssim(rand_sketch(0, 16), rand_sketch(0, 17))
    with pytest.raises(ValueError):
        ssim(rand_sketch(0, 8), rand_sketch(1, 8))


def test_perceptual_identity_and_symmetry():
    for seed in range(5):
        a, b = rand_sketch(seed), rand_sketch(seed + 100)
        assert perceptual(a, a, ADAPTER) == 0.0
        assert perceptual(a, b, ADAPTER) == pytest.approx(perceptual(b, a, ADAPTER), abs=1e-12)


def test_perceptual_grows_with_noise():
    hits = 0
    for seed in range(20):
        base = Sketch(np.full((32, 32, 1), 0.5))
        d = [perceptual(base, noisy(base, s, seed), ADAPTER) for s in (0.05, 0.1, 0.2)]
        hits += d[0] < d[1] < d[2]
    assert hits == 20


def test_evaluate_order_invariant():
    preds = [rand_sketch(i) for i in range(8)]
    gts = [noisy(p, 0.1, 30 + i) for i, p in enumerate(preds)]
    a = evaluate(preds, gts, ADAPTER)
    perm = np.random.default_rng(0).permutation(8)
    b = evaluate([preds[i] for i in perm], [gts[i] for i in perm], ADAPTER)
    for x, y in zip(a, b):
        assert x.metric == y.metric and abs(x.value - y.value) <= 1e-12
    assert [r.metric for r in a] == ["lpips", "ssim"] and a[0].n_pairs == 8


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate([rand_sketch(0)], [], ADAPTER)
    with pytest.raises(ValueError):
        evaluate([], [], ADAPTER)
    with pytest.raises(ValueError):
        EvalRecord("s", "v", "ssim", float("nan"), 1)


def test_ablation_variants():
    vs = ablation_variants([1, 5, 9, 13], T=50, seed=0)
    assert tuple(v.name for v in vs) == VARIANT_NAMES and len(vs) == 7
    assert vs[3].timesteps == (0,)
    assert not vs[4].use_cdst and not vs[5].l1 and not vs[6].use_vae
    for v in vs[1:3]:
        assert len(v.timesteps) == 4 and list(v.timesteps) == sorted(set(v.timesteps))
    assert vs[1].timesteps != vs[2].timesteps
    assert ablation_variants([1, 5, 9, 13], T=50, seed=0) == vs


def test_run_ablation_is_repeatable_and_csv():
    pairs = [(i, rand_sketch(i)) for i in range(4)]

    def make(sigma):
        return lambda i: noisy(pairs[i][1], sigma, i)

    variants = [("Ours", make(0.05)), ("W/O L1", make(0.3))]
    a = run_ablation(variants, pairs, ADAPTER, style="toy")
    assert a == run_ablation(variants, pairs, ADAPTER, style="toy")
    rows = list(csv.DictReader(io.StringIO(records_to_csv(a))))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [r["variant"] for r in rows] == ["Ours", "W/O L1"]
    assert float(rows[0]["ssim"]) > float(rows[1]["ssim"])
    assert float(rows[0]["lpips"]) < float(rows[1]["lpips"])
