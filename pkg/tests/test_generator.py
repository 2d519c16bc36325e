import numpy as np
import pytest
import torch

from diffsketch import checkpoint
from diffsketch.adapters import RandomConvPerceptual, RandomProjectionEmbedder
from diffsketch.feature_store import FeatureMap, FeatureTrajectory
from diffsketch.generator import (
    Aggregator,
    AggregatorConfig,
    SketchGenerator,
    build_generator,
    forward_sketch,
    generate_sketch,
    generator_inputs,
    sketch_tensor,
)
from diffsketch.objectives import loss_rec

GATE = [0, 4, 8]


@pytest.fixture()
def gen(small_backend):
    return build_generator(small_backend, GATE, 8, seed=0).double()


@pytest.fixture()
def inputs(gen, small_triplet):
    t = small_triplet[0]
    return generator_inputs(gen, t.trajectory, t.pyramid, t.source)


def central_diff(f, tensor, idx, h=1e-6):
    with torch.no_grad():
        old = tensor[idx].item()
        tensor[idx] = old + h
        up = f().item()
        tensor[idx] = old - h
        down = f().item()
        tensor[idx] = old
    return (up - down) / (2 * h)


def test_config_invariants():
    with pytest.raises(ValueError):
        AggregatorConfig(L=12, l_md=12, selected_timesteps=[0])
    with pytest.raises(ValueError):
        AggregatorConfig(selected_timesteps=[])
    with pytest.raises(ValueError):
        AggregatorConfig(selected_timesteps=[0], mid_resolution=24)
    assert AggregatorConfig(selected_timesteps=[0]).l_md == 9


def test_upsampler_cannot_shrink(small_backend):
    cfg = AggregatorConfig(selected_timesteps=GATE, mid_resolution=1, top_resolution=4, bottleneck_channels=8)
    with pytest.raises(ValueError, match="exceeds"):
        Aggregator(cfg, small_backend.layer_shapes())


def test_first_level_shape(gen, inputs):
    cfg = gen.config
    f = gen.aggregator.aggregate_first(inputs[0])
    assert f.shape == (1, cfg.bottleneck_channels, cfg.mid_resolution, cfg.mid_resolution)


def test_dominant_logit_selects_single_term(gen, inputs):
    agg = gen.aggregator
    with torch.no_grad():
        agg.mix_first.fill_(0.0)
        agg.mix_first[2, 1] = 100.0
    f = agg.aggregate_first(inputs[0])
    expected = agg.bottlenecks["3"](agg._up(inputs[0][(3, 4)], gen.config.mid_resolution))
    assert torch.allclose(f, expected, atol=1e-5)


def test_first_level_gradient_wrt_logits(gen, inputs):
    agg = gen.aggregator
    with torch.no_grad():
        agg.mix_first.normal_(0, 0.5)

    def f():
        return (agg.aggregate_first(inputs[0]) ** 2).sum()

    agg.zero_grad()
    f().backward()
    grad = agg.mix_first.grad.clone()
    for idx in [(0, 0), (3, 2), (8, 1)]:
        fd = central_diff(f, agg.mix_first.data, idx, h=1e-5)
        assert abs(fd - grad[idx].item()) / max(abs(fd), 1e-8) < 1e-3


def test_final_level_shape_and_skip_only_path(gen, inputs):
    agg = gen.aggregator
    cfg = gen.config
    f_fst = agg.aggregate_first(inputs[0])
    f_fin = agg.aggregate_final(inputs[0], f_fst)
    assert f_fin.shape == (1, cfg.bottleneck_channels, cfg.top_resolution, cfg.top_resolution)
    masked = agg.aggregate_final(inputs[0], f_fst, upper_mask=torch.zeros_like(agg.mix_final))
    ws = torch.softmax(agg.mix_skip, 0)
    top = agg._up(f_fst, cfg.top_resolution)
    skip_only = sum(ws[i] * agg.skip_bottlenecks[str(l)](top) for i, l in enumerate(range(cfg.l_md + 1, cfg.L + 1)))
    assert torch.allclose(masked, skip_only, atol=1e-12)


def test_aggregation_linear_in_features(small_backend, small_triplet):
    g = build_generator(small_backend, GATE, 8, bottleneck_bias=False, seed=1).double()
    t = small_triplet[0]
    feats, _, _ = generator_inputs(g, t.trajectory, t.pyramid, t.source)
    agg = g.aggregator
    f_fst = agg.aggregate_first(feats)
    doubled = {k: 2 * v for k, v in feats.items()}
    assert torch.allclose(agg.aggregate_first(doubled), 2 * f_fst, atol=1e-10)
    assert torch.allclose(agg.aggregate_final(doubled, 2 * f_fst), 2 * agg.aggregate_final(feats, f_fst), atol=1e-10)


def test_ffd_step_doubles_resolution_and_empty_step(small_backend):
    g = build_generator(small_backend, GATE, 8, use_vae=False).double()
    ffd = g.ffd
    x = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    y = ffd.step(0, x, [])
    assert y.shape[-1] == 8
    expected = torch.nn.functional.interpolate(
        torch.nn.functional.leaky_relu(ffd.fusers[0](x), 0.2), scale_factor=2, mode="nearest"
    )
    assert torch.equal(y, expected)


def test_ffd_step_resolution_error_names_block(gen, inputs):
    vae = inputs[1]
    x = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    bad = [vae[0][0], vae[1][1]]
    with pytest.raises(ValueError, match=r"i=0, n=1"):
        gen.ffd.step(0, x, bad)


def test_ffd_gradient(gen, inputs):
    ffd = gen.ffd
    x = torch.randn(1, 8, 4, 4, dtype=torch.float64)
    vae0 = inputs[1][0]

    def f():
        return (ffd.step(0, x, vae0) ** 2).sum()

    ffd.zero_grad()
    f().backward()
    for p, idx in [(ffd.reducers[0][0].weight, (1, 2, 0, 0)), (ffd.convs[0][1].weight, (0, 3, 1, 2)), (ffd.fusers[0].bias, (2,))]:
        fd = central_diff(f, p.data, idx)
        assert abs(fd - p.grad[idx].item()) / max(abs(fd), abs(p.grad[idx].item()), 1e-8) < 1e-3


def test_sketch_contract(small_backend, small_triplet):
    t = small_triplet[0]
    for seed in range(5):
        g = build_generator(small_backend, GATE, 8, seed=seed)
        s = generate_sketch(g, t.trajectory, t.pyramid, t.source)
        assert s.pixels.shape == (32, 32, 1)
        assert np.all(np.isfinite(s.pixels)) and s.pixels.min() >= 0 and s.pixels.max() <= 1
        assert s.pixels.std() > 1e-4
        assert s == generate_sketch(g, t.trajectory, t.pyramid, t.source)


def test_no_dead_branches(gen, small_triplet):
    t = small_triplet[0]
    pred = forward_sketch(gen, t.trajectory, t.pyramid, t.source)
    total, _ = loss_rec(pred, sketch_tensor(t.sketch, torch.float64), RandomProjectionEmbedder(), RandomConvPerceptual())
    total.backward()
    dead = [n for n, p in gen.named_parameters() if p.grad is None or not torch.any(p.grad != 0)]
    assert dead == []


def test_gate_ignores_other_timesteps(gen, small_triplet):
    t = small_triplet[0]
    base = generate_sketch(gen, t.trajectory, t.pyramid, t.source)
    rng = np.random.default_rng(0)
    maps = {}
    for (l, ts), fm in t.trajectory.maps.items():
        data = fm.data if ts in GATE else fm.data + rng.normal(0, 5, fm.data.shape).astype(np.float32)
        maps[(l, ts)] = FeatureMap(data, l, ts)
    perturbed = FeatureTrajectory(maps, t.trajectory.L, t.trajectory.T)
    assert np.array_equal(generate_sketch(gen, perturbed, t.pyramid, t.source).pixels, base.pixels)


def test_checkpoint_roundtrip(gen, small_triplet, tmp_path):
    t = small_triplet[0]
    d1 = checkpoint.save_checkpoint(tmp_path / "a", gen, gen.describe())
    sd, _, meta = checkpoint.load_checkpoint(tmp_path / "a")
    g2 = SketchGenerator.from_description(meta).double()
    g2.load_state_dict(sd)
    assert generate_sketch(g2, t.trajectory, t.pyramid, t.source) == generate_sketch(gen, t.trajectory, t.pyramid, t.source)
    assert checkpoint.save_checkpoint(tmp_path / "b", g2, g2.describe()) == d1
