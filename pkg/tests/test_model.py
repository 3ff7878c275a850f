import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from renderflow.errors import InvalidArgumentError
from renderflow.model import (PARAM_GROUPS, ConditionBundle, NetConfig, RenderNet, count_parameters,
                              envmap_modulate, patchify, rope_apply, unpatchify)

from conftest import TINY_NET


def make_inputs(b=1, f=3, res=(16, 16), env_res=(8, 16), k=0, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    rand = lambda *s: torch.rand(*s, generator=g, dtype=dtype)
    zt = rand(b, f, *res, 3)
    cond = ConditionBundle(attributes=rand(b, f, *res, 8), env_ldr=rand(b, f, *env_res, 3),
                           frame_positions=torch.arange(f, dtype=dtype).expand(b, f).clone())
    if k:
        cond.keyframes = rand(b, k, *res, 3)
        cond.key_positions = torch.arange(k, dtype=dtype).expand(b, k).clone() * 2
    return zt, cond


def randomize(net, scale=0.2, seed=1):
    """Perturb every parameter so zero-initialised gates are open."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return net


@pytest.fixture
def net():
    torch.manual_seed(0)
    return RenderNet(NetConfig(**TINY_NET))


def test_patchify_token_count():
    assert patchify(torch.zeros(1, 5, 64, 64, 3), 8).shape == (1, 320, 192)


@given(st.integers(1, 3), st.sampled_from([2, 4]), st.integers(1, 4))
def test_unpatchify_inverts_patchify(f, patch, c):
    x = torch.randn(2, f, 8, 12, c)
    assert torch.equal(unpatchify(patchify(x, patch), f, 8, 12, c, patch), x)


def test_patchify_locality():
    x = torch.randn(1, 1, 8, 8, 3)
    y = x.clone()
    y[:, :, 0:4, 0:4], y[:, :, 4:8, 4:8] = x[:, :, 4:8, 4:8], x[:, :, 0:4, 0:4]
    tx, ty = patchify(x, 4), patchify(y, 4)
    assert torch.equal(tx[0, 0], ty[0, 3]) and torch.equal(tx[0, 3], ty[0, 0])
    assert torch.equal(tx[0, 1], ty[0, 1])


def test_patchify_divisibility():
    with pytest.raises(InvalidArgumentError):
        patchify(torch.zeros(1, 1, 10, 8, 3), 4)


@pytest.mark.parametrize("kwargs", [dict(dim=30, heads=4), dict(dim=12, heads=4), dict(patch=5),
                                    dict(keyframe_variant="shared"), dict(depth=0), dict(env_patch=3)])
def test_net_config_invariants(kwargs):
    with pytest.raises(InvalidArgumentError):
        NetConfig(**{**TINY_NET, **kwargs})


def test_output_shape_and_determinism(net):
    zt, cond = make_inputs()
    a = net(zt, torch.tensor([0.25]), cond)
    b = net(zt, torch.tensor([0.25]), cond)
    assert a.shape == zt.shape
    assert torch.equal(a, b)


def test_zero_attribute_embedder_leaves_tokens_unchanged(net):
    zt, cond = make_inputs()
    x = net.input_tokens(zt, torch.tensor([0.5]), cond)
    cond.attributes = torch.rand_like(cond.attributes)
    assert torch.equal(x, net.input_tokens(zt, torch.tensor([0.5]), cond))


def test_attribute_tokens_respond_to_normals(net):
    randomize(net)
    zt, cond = make_inputs()
    a = net.embed_attributes(cond.attributes)
    other = cond.attributes.clone()
    other[..., 0:3] = 1 - other[..., 0:3]
    assert not torch.allclose(a, net.embed_attributes(other))
    assert a.shape == (1, 3 * 16, 16)


def test_attribute_misalignment(net):
    zt, cond = make_inputs()
    cond.attributes = cond.attributes[:, :, :8]
    with pytest.raises(InvalidArgumentError):
        net(zt, torch.tensor([0.0]), cond)


def test_envmap_modulate_algebra():
    f = torch.randn(2, 5, 8)
    assert torch.equal(envmap_modulate(f, torch.zeros(2, 5, 16)), f)
    minus = torch.cat([-torch.ones(2, 5, 8), torch.zeros(2, 5, 8)], dim=-1)
    assert torch.equal(envmap_modulate(f, minus), torch.zeros_like(f))


def test_envmap_single_texel_changes_modulation(net):
    randomize(net)
    _, cond = make_inputs()
    env = cond.env_ldr
    other = env.clone()
    other[0, 0, 3, 5] += 0.5
    block = net.blocks[0]
    a = block.env_proj(net.env_embed(env))
    b = block.env_proj(net.env_embed(other))
    assert not torch.allclose(a[0, 0], b[0, 0])


def test_rope_properties():
    torch.manual_seed(0)
    q, k = torch.randn(3, 8, dtype=torch.float64), torch.randn(3, 8, dtype=torch.float64)
    p = torch.tensor([0.0, 4.0, 11.0], dtype=torch.float64)
    assert torch.allclose((rope_apply(q, p) * rope_apply(k, p)).sum(-1), (q * k).sum(-1), atol=1e-12)
    assert torch.equal(rope_apply(q, torch.zeros(3, dtype=torch.float64)), q)
    pq, pk = torch.tensor([2.0, 7.0, 1.0]), torch.tensor([5.0, 3.0, 9.0])
    base = (rope_apply(q, pq) * rope_apply(k, pk)).sum(-1)
    shifted = (rope_apply(q, pq + 13) * rope_apply(k, pk + 13)).sum(-1)
    assert torch.allclose(base, shifted, atol=1e-5)
    with pytest.raises(InvalidArgumentError):
        rope_apply(torch.randn(2, 5), torch.zeros(2))


def test_fresh_keyframe_adapter_is_inert(net):
    zt, cond = make_inputs(k=2)
    t = torch.tensor([0.25])
    assert torch.equal(net(zt, t, cond, use_keyframes=False), net(zt, t, cond, use_keyframes=True))


def test_no_keyframes_means_no_residual(net):
    randomize(net)
    zt, cond = make_inputs(k=0)
    t = torch.tensor([0.25])
    assert torch.equal(net(zt, t, cond, use_keyframes=True), net(zt, t, cond, use_keyframes=False))


@pytest.mark.parametrize("variant", ["reused_query", "dedicated_query"])
def test_duplicate_keyframe_matches_single(variant):
    torch.manual_seed(0)
    net = randomize(RenderNet(NetConfig(**{**TINY_NET, "keyframe_variant": variant})), seed=2)
    zt, cond = make_inputs(k=1, dtype=torch.float32)
    net, zt = net.double(), zt.double()
    cond = ConditionBundle(**{k: (v.double() if v is not None else None) for k, v in cond.__dict__.items()})
    t = torch.tensor([0.5], dtype=torch.float64)
    single = net(zt, t, cond, use_keyframes=True)
    cond.keyframes = cond.keyframes.repeat(1, 2, 1, 1, 1)
    cond.key_positions = cond.key_positions.repeat(1, 2)
    double = net(zt, t, cond, use_keyframes=True)
    assert torch.allclose(single, double, atol=1e-10)
    assert not torch.allclose(single, net(zt, t, cond, use_keyframes=False))


def test_keyframe_variants_differ_in_parameters():
    reused = RenderNet(NetConfig(**{**TINY_NET, "keyframe_variant": "reused_query", "keyframe_ffn_lora": False}))
    dedicated = RenderNet(NetConfig(**{**TINY_NET, "keyframe_variant": "dedicated_query"}))
    names_r = {n for n, _ in reused.named_parameters()}
    names_d = {n for n, _ in dedicated.named_parameters()}
    assert "blocks.0.kf.q.weight" in names_d and "blocks.0.kf.q.weight" not in names_r
    assert any("ffn_lora" in n for n in names_d) and not any("ffn_lora" in n for n in names_r)


def test_parameter_groups_partition(net):
    groups = net.parameter_groups()
    assert set(groups) == set(PARAM_GROUPS)
    total = sum(p.numel() for g in groups.values() for p in g.values())
    assert total == count_parameters(net)
    assert groups["inverse_adapter"] == {}
    assert all("kf" in n or n.startswith("key_embed") for n in groups["keyframe_adapter"])
    assert all("env" in n for n in groups["envmap_adapter"])


def test_set_trainable(net):
    net.set_trainable(("keyframe_adapter",))
    for name, p in net.named_parameters():
        assert p.requires_grad == (RenderNet.group_of(name) == "keyframe_adapter")


def test_frame_positions_are_relative_inside_the_clip(net):
    # shifting absolute frame indices only matters to the keyframe branch
    randomize(net)
    zt, cond = make_inputs()
    t = torch.tensor([0.25])
    a = net(zt, t, cond)
    cond.frame_positions = cond.frame_positions + 40
    assert torch.allclose(a, net(zt, t, cond), atol=1e-6)


def test_batch_items_are_independent(net):
    randomize(net)
    zt, cond = make_inputs(b=2)
    t = torch.tensor([0.25, 0.5])
    both = net(zt, t, cond)
    one = ConditionBundle(attributes=cond.attributes[1:], env_ldr=cond.env_ldr[1:],
                          frame_positions=cond.frame_positions[1:])
    assert torch.allclose(both[1:], net(zt[1:], t[1:], one), atol=1e-5)
