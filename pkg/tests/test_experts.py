import numpy as np
import pytest

from brainstack.diffcore import Context, backward, make_rng, ops
from brainstack.experts import (
    CNetConfig, ConfigError, CTNetConfig, Expert, cnet_forward, ctnet_forward, init_expert, patch_embed,
    transformer_encode,
)
from brainstack.harness.gradsuite import SMALL_CNET, SMALL_CTNET, run_gradcheck
from brainstack.objective import cross_entropy

SMALL_CT16 = CTNetConfig(in_channels=16, time_len=128, temporal_kernel=8, conv_filters=4, embed_dim=8, pool=8,
                         layers=1, heads=2, ff_dim=8, feature_dim=6, num_classes=4)


def _state(ps):
    return {k: v.copy() for k, v in ps.state().items()}


def test_init_deterministic_per_seed():
    cfg = CNetConfig(in_channels=2)
    a, b, c = _state(init_expert(cfg, 3)), _state(init_expert(cfg, 3)), _state(init_expert(cfg, 4))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a if k.endswith(".w"))


def test_norms_start_as_identity(rng):
    ps = init_expert(CNetConfig(in_channels=2), 0)
    np.testing.assert_array_equal(ps["bn1.gamma"].data, 1.0)
    np.testing.assert_array_equal(ps["bn1.beta"].data, 0.0)


def test_invalid_config_lists_violations():
    with pytest.raises(ConfigError) as err:
        init_expert(CNetConfig(in_channels=2, dropout=1.0, time_len=100), 0)
    assert len(err.value.violations) == 2
    with pytest.raises(ConfigError):
        init_expert(CTNetConfig(in_channels=4, embed_dim=30, heads=4), 0)


def test_cnet_shapes(rng):
    cfg = CNetConfig(in_channels=2, time_len=128, temporal_filters=8, depth_multiplier=2, pool1=4, pool2=8)
    assert cfg.flat_dim == 16 * 4  # 128 / (4 * 8) time steps after both pools
    out = cnet_forward(rng.standard_normal((2, 128)), init_expert(cfg, 0), "eval", cfg)
    assert out.feature.shape == (cfg.feature_dim,) and out.logits.shape == (cfg.num_classes,)
    batch = cnet_forward(rng.standard_normal((5, 2, 128)), init_expert(cfg, 0), "eval", cfg)
    assert batch.feature.shape == (5, cfg.feature_dim) and batch.logits.shape == (5, cfg.num_classes)


def test_cnet_zero_input_gives_head_biases():
    cfg = CNetConfig(in_channels=3)
    ps = init_expert(cfg, 0)
    out = cnet_forward(np.zeros((3, 256)), ps, "eval", cfg)
    np.testing.assert_allclose(out.feature.data, ps["feature.b"].data, atol=1e-15)
    # the class head reads the feature, so its effective bias is the feature bias mapped through it
    np.testing.assert_allclose(out.logits.data, ps["feature.b"].data @ ps["logits.w"].data + ps["logits.b"].data,
                               atol=1e-12)


def test_shape_mismatch_is_structured_error(rng):
    from brainstack.diffcore import ShapeError
    cfg = CNetConfig(in_channels=3)
    with pytest.raises(ShapeError):
        cnet_forward(rng.standard_normal((4, 256)), init_expert(cfg, 0), "eval", cfg)


def test_patch_embed_token_count(rng):
    ps = init_expert(SMALL_CT16, 0)
    z = patch_embed(rng.standard_normal((16, 128)), ps, "eval", SMALL_CT16)
    assert z.shape == (16, 8)
    cfg2 = CTNetConfig(**{**SMALL_CT16.__dict__, "time_len": 256})
    assert patch_embed(rng.standard_normal((16, 256)), init_expert(cfg2, 0), "eval", cfg2).shape == (32, 8)


def test_patch_embed_is_channel_order_sensitive(rng):
    ps = init_expert(SMALL_CT16, 0)
    x = rng.standard_normal((16, 128))
    swapped = x[[1, 0] + list(range(2, 16))]
    a = patch_embed(x, ps, "eval", SMALL_CT16).data
    b = patch_embed(swapped, ps, "eval", SMALL_CT16).data
    assert not np.allclose(a, b)


def test_too_short_input():
    with pytest.raises(ConfigError):
        init_expert(CTNetConfig(in_channels=2, time_len=4, pool=8), 0)


def test_empty_stack_is_final_layer_norm(rng):
    cfg = CTNetConfig(**{**SMALL_CT16.__dict__, "layers": 0})
    ps = init_expert(cfg, 0)
    z = rng.standard_normal((5, 8))
    expected = ops.layer_norm(z, ps["final_ln.gamma"], ps["final_ln.beta"]).data
    np.testing.assert_array_equal(transformer_encode(z, ps, "eval", cfg).data, expected)


def test_single_token_attention_is_one(rng):
    ps = init_expert(SMALL_CT16, 0)
    _, maps = transformer_encode(rng.standard_normal((1, 8)), ps, "eval", SMALL_CT16, return_attention=True)
    np.testing.assert_array_equal(maps[0], 1.0)


def test_attention_rows_sum_to_one(rng):
    ps = init_expert(SMALL_CT16, 0)
    _, maps = transformer_encode(rng.standard_normal((3, 7, 8)), ps, "eval", SMALL_CT16, return_attention=True)
    assert maps[0].shape == (3, 2, 7, 7)
    assert np.max(np.abs(maps[0].sum(-1) - 1.0)) < 1e-9


def test_ctnet_shapes_and_eval_determinism(rng):
    cfg = CTNetConfig(in_channels=16, time_len=128, embed_dim=32, pool=8)
    ps = init_expert(cfg, 0)
    x = rng.standard_normal((16, 128))
    a, b = ctnet_forward(x, ps, "eval", cfg), ctnet_forward(x, ps, "eval", cfg)
    assert a.feature.shape == (cfg.feature_dim,) and a.logits.shape == (cfg.num_classes,)
    assert a.logits.data.tobytes() == b.logits.data.tobytes()


def test_train_mode_deterministic_given_seed(rng):
    ps = init_expert(SMALL_CT16, 0)
    x = rng.standard_normal((2, 16, 128))
    a = ctnet_forward(x, ps, Context("train", seed=5), SMALL_CT16).logits.data
    b = ctnet_forward(x, ps, Context("train", seed=5), SMALL_CT16).logits.data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("cfg,forward", [(SMALL_CNET, cnet_forward), (SMALL_CTNET, ctnet_forward)])
@pytest.mark.parametrize("seed", range(5))
def test_no_dead_parameters(cfg, forward, seed):
    ps = init_expert(cfg, seed)
    r = make_rng(seed, "dead")
    x = r.standard_normal((4, cfg.in_channels, cfg.time_len))
    y = r.integers(0, cfg.num_classes, size=4)
    backward(cross_entropy(forward(x, ps, Context("train", seed=seed), cfg).logits, y))
    dead = [p.pid for p in ps if not np.any(p.grad != 0)]
    assert not dead


def test_gradcheck_experts():
    results = run_gradcheck("cnet", range(3)) + run_gradcheck("ctnet", range(3))
    assert all(r.passed for r in results), [(r.name, r.seed, r.max_rel_err) for r in results]


def test_cnet_much_smaller_than_ctnet(desk16):
    _, partition = desk16
    cnet = max(init_expert(CNetConfig(in_channels=len(partition[r])), 0).count() for r in partition.regions)
    ctnet = init_expert(CTNetConfig(in_channels=16), 0).count()
    assert cnet / ctnet < 0.25


def test_expert_selects_its_channels(rng):
    e = Expert(CNetConfig(in_channels=2), 0, channels=(14, 15))
    x = rng.standard_normal((3, 16, 256))
    direct = cnet_forward(x[:, 14:16], e.params, "eval", e.cfg).logits.data
    np.testing.assert_array_equal(e(x, Context("eval")).logits.data, direct)
