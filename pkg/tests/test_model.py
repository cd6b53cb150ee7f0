import numpy as np
import pytest

from qatforge import autodiff as ad
from qatforge import checkpoint
from qatforge import quant as Q
from qatforge.model import (
    ConfigError,
    ConformerBlockConfig,
    EncoderConfig,
    LayerQuantPlan,
    block_param_count,
    build_encoder,
    encoder_param_count,
    plan_exclude_first_last,
    plan_exclude_self_attention,
    plan_first_k,
    plan_per_pass,
    plan_uniform,
    toy_encoder,
)


def hand_block_params(d, e, heads_on=True, conv_k=None):
    ffn = (2 * d) + (d * e + e) + (e * d + d)  # layer norm, two dense layers
    mhsa = (2 * d) + 4 * (d * d + d) if heads_on else 0
    conv = (2 * d) + conv_k * d + d if conv_k else 0
    return 2 * ffn + mhsa + conv + 2 * d


def test_param_count_closed_form():
    cfg = toy_encoder(model_dim=16, num_heads=2, blocks=2, ffn_expansion=4, vocab_size=16, num_classes=4)
    model = build_encoder(cfg)
    per_block = hand_block_params(16, 64)
    assert per_block == block_param_count(cfg.passes[0][0]) == 5472
    expected = 16 * 16 + 2 * per_block + (16 * 4 + 4)
    assert encoder_param_count(cfg) == model.param_count() == expected
    assert sum(p.value.size for p in model.parameters) == expected


def test_param_count_with_conv_and_two_passes():
    cfg = toy_encoder(model_dim=8, num_heads=2, blocks=(2, 1), ffn_expansion=2, conv_kernel=3)
    model = build_encoder(cfg)
    assert model.param_count() == encoder_param_count(cfg)
    assert block_param_count(cfg.passes[0][0]) == hand_block_params(8, 16, conv_k=3)


def test_config_validation():
    with pytest.raises(ConfigError):
        ConformerBlockConfig(model_dim=10, num_heads=3)
    blk = ConformerBlockConfig(8, 2, causal=True)
    with pytest.raises(ConfigError):
        EncoderConfig(passes=((blk,), (blk,)))  # second pass must be non-causal
    with pytest.raises(ConfigError):
        EncoderConfig(passes=())
    cfg = toy_encoder(blocks=(2, 2))
    assert cfg.passes[0][0].causal and not cfg.passes[1][0].causal
    assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


def test_same_seed_same_weights():
    cfg = toy_encoder(model_dim=8, num_heads=2, blocks=1)
    a, b = build_encoder(cfg, 5), build_encoder(cfg, 5)
    for p, q in zip(a.parameters, b.parameters):
        assert p.name == q.name and p.value.tobytes() == q.value.tobytes()
    c = build_encoder(cfg, 6)
    assert any(p.value.tobytes() != q.value.tobytes() for p, q in zip(a.parameters, c.parameters))


def frames(model, tokens):
    return model.encode(tokens)[0].value


@pytest.mark.parametrize("plan_spec", [
    Q.FLOAT,
    Q.I8W,
    Q.I4W,
    Q.QuantSpec(weight_bits=8, activation_bits=8, path="native", activation_granularity="row"),
])
def test_causal_pass_ignores_future(plan_spec):
    cfg = toy_encoder(model_dim=8, num_heads=2, blocks=(2, 1), ffn_expansion=2, conv_kernel=3, vocab_size=10)
    model = build_encoder(cfg, seed=1)
    model.apply_plan(plan_uniform(model, plan_spec))
    rng = np.random.default_rng(2)
    tokens = rng.integers(0, 10, (3, 9))
    base = frames(model, tokens)
    for t in range(9):
        noisy = tokens.copy()
        noisy[:, t + 1:] = rng.integers(0, 10, (3, 8 - t))
        out = frames(model, noisy)
        assert out[:, : t + 1].tobytes() == base[:, : t + 1].tobytes()


def test_per_tensor_activation_scales_leak_future_information():
    # documents why the causality probe uses per-row activation scales
    cfg = toy_encoder(model_dim=8, num_heads=2, blocks=(1, 1), ffn_expansion=2, vocab_size=10)
    model = build_encoder(cfg, seed=1)
    model.apply_plan(plan_uniform(model, Q.I8WA))
    tokens = np.random.default_rng(3).integers(0, 10, (2, 8))
    changed = tokens.copy()
    changed[:, -1] = (changed[:, -1] + 1) % 10
    assert not np.array_equal(frames(model, tokens)[:, 0], frames(model, changed)[:, 0])


def test_non_causal_pass_sees_future():
    cfg = toy_encoder(model_dim=8, num_heads=2, blocks=(1, 1), ffn_expansion=2, vocab_size=10)
    model = build_encoder(cfg, seed=1)
    tokens = np.random.default_rng(3).integers(0, 10, (2, 8))
    changed = tokens.copy()
    changed[:, -1] = (changed[:, -1] + 1) % 10
    assert not np.array_equal(model.encode(tokens)[1].value[:, 0], model.encode(changed)[1].value[:, 0])


@pytest.mark.parametrize("name", list(Q.CONFIGS))
def test_forward_finite_under_every_config(name):
    cfg = toy_encoder(model_dim=8, num_heads=2, blocks=(1, 1), ffn_expansion=2, conv_kernel=3)
    model = build_encoder(cfg, seed=0)
    model.apply_plan(plan_uniform(model, Q.CONFIGS[name]))
    tokens = np.random.default_rng(0).integers(0, 16, (4, 10))
    logits = model.forward(tokens)
    assert len(logits) == 2 and all(np.all(np.isfinite(z.value)) for z in logits)
    with ad.Tape() as tape:
        loss = model.loss(tokens, np.zeros(4, int))
    tape.backward(loss)
    assert all(np.all(np.isfinite(p.grad)) for p in model.parameters)


def block_of(name):
    p, b = name.split(".")[:2]
    return int(p[1:]), int(b[1:])


def int4_layers(model, plan):
    return {n for n, s in plan.resolved(model).items() if s.weight_bits == 4}


def test_plan_uniform_lists_all_matmul_weights():
    model = build_encoder(toy_encoder(model_dim=8, num_heads=2, blocks=2, conv_kernel=3))
    plan = plan_uniform(model, Q.I4W)
    names = [n for n, _ in plan.items()]
    assert len(names) == 2 * 8
    assert all(n.rsplit(".", 1)[1] in {"w1", "w2", "wq", "wk", "wv", "wo"} for n in names)
    assert not any("conv" in n for n in names)
    assert all(s == Q.FLOAT for _, s in plan_uniform(model, Q.FLOAT).items())
    assert all(s.weight_bits == 8 and s.activation_bits == 8 for _, s in plan_uniform(model, Q.I8WA).items())


def test_plan_first_k():
    model = build_encoder(toy_encoder(model_dim=8, num_heads=2, blocks=(7, 6)))
    assert plan_first_k(model, 0) == plan_uniform(model, Q.I8W)
    assert plan_first_k(model, 7) == plan_uniform(model, Q.I4W)
    chosen = int4_layers(model, plan_first_k(model, 3))
    assert {block_of(n) for n in chosen} == {(p, b) for p in (1, 2) for b in (1, 2, 3)}
    assert len(chosen) == 6 * 8
    with pytest.raises(ConfigError):
        plan_first_k(model, 8)


def test_plan_exclude_first_last():
    model = build_encoder(toy_encoder(model_dim=8, num_heads=2, blocks=3))
    assert {block_of(n) for n in int4_layers(model, plan_exclude_first_last(model))} == {(1, 2)}
    model = build_encoder(toy_encoder(model_dim=8, num_heads=2, blocks=(7, 3)))
    blocks = {block_of(n) for n in int4_layers(model, plan_exclude_first_last(model))}
    assert blocks == {(1, b) for b in range(2, 7)} | {(2, 2)}
    with pytest.raises(ConfigError):
        plan_exclude_first_last(build_encoder(toy_encoder(model_dim=8, num_heads=2, blocks=2)))


def test_plan_exclude_self_attention():
    model = build_encoder(toy_encoder(model_dim=8, num_heads=2, blocks=1))
    plan = plan_exclude_self_attention(model)
    assert sorted(n.split(".", 2)[2] for n in int4_layers(model, plan)) == sorted(
        ["ffn1.w1", "ffn1.w2", "ffn2.w1", "ffn2.w2"])
    assert all(plan.spec_for(f"p1.b1.mhsa.w{x}") == Q.I8W for x in "qkvo")
    blk = ConformerBlockConfig(8, 2, self_attention=False)
    ffn_only = build_encoder(EncoderConfig(passes=((blk, blk),)))
    assert plan_exclude_self_attention(ffn_only) == plan_uniform(ffn_only, Q.I4W)


def test_plan_per_pass():
    model = build_encoder(toy_encoder(model_dim=8, num_heads=2, blocks=(2, 3)))
    assert {block_of(n)[0] for n in int4_layers(model, plan_per_pass(model, 1))} == {1}
    assert {block_of(n)[0] for n in int4_layers(model, plan_per_pass(model, 2))} == {2}
    with pytest.raises(ConfigError):
        plan_per_pass(build_encoder(toy_encoder(model_dim=8, num_heads=2, blocks=2)), 1)


def payload(model, plan):
    return checkpoint.model_size_report(model, plan).payload_bytes


def test_mixed_plans_sit_between_uniform_sizes():
    model = build_encoder(toy_encoder(model_dim=16, num_heads=2, blocks=(4, 3)))
    lo, hi = payload(model, plan_uniform(model, Q.I4W)), payload(model, plan_uniform(model, Q.I8W))
    for plan in (plan_exclude_first_last(model), plan_exclude_self_attention(model), plan_first_k(model, 2)):
        assert lo < payload(model, plan) < hi
    # pass 1 (4 blocks) holds more parameters than pass 2 (3 blocks) here, so
    # quantizing pass 1 to int4 gives the smaller model
    assert payload(model, plan_per_pass(model, 1)) < payload(model, plan_per_pass(model, 2))
    small_first = build_encoder(toy_encoder(model_dim=16, num_heads=2, blocks=(2, 5)))
    assert payload(small_first, plan_per_pass(small_first, 1)) > payload(small_first, plan_per_pass(small_first, 2))


def test_plan_rejects_unknown_or_non_quantizable_layers():
    model = build_encoder(toy_encoder(model_dim=8, num_heads=2, blocks=1, conv_kernel=3))
    with pytest.raises(ConfigError):
        model.apply_plan(LayerQuantPlan({"p9.b1.ffn1.w1": Q.I8W}))
    with pytest.raises(ConfigError):
        model.apply_plan(LayerQuantPlan({"p1.b1.conv.kernel": Q.I4W}))


def test_sequence_longer_than_max_len():
    model = build_encoder(toy_encoder(model_dim=8, num_heads=2, blocks=1, max_len=4))
    with pytest.raises(ConfigError):
        model.forward(np.zeros((1, 5), int))
