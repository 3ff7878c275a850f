"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion NN [PASS|FAIL]`` line (collected again
in the terminal summary) before asserting, so a failing criterion is still
reported with its measured numbers.
"""
import math
import time

import numpy as np
import pytest
import torch

from renderflow.bridge import BridgeState, interpolate, recover_endpoint, sde_step, velocity_target
from renderflow.data import sequence_arrays
from renderflow.evaluate import AblationBudget, SUITES, ablation_row_names, albedo_baseline, evaluate_model, \
    run_ablation
from renderflow.infer import (InferConfig, NetVelocity, OracleVelocity, render_clip, render_progressive,
                              render_with_keyframes)
from renderflow.inverse import InverseConfig, build_inverse, evaluate_inverse, train_inverse
from renderflow.losses import loss_total
from renderflow.metrics import PROXY_NOTE, psnr, ssim, variance_over_runs
from renderflow.model import ConditionBundle, NetConfig, RenderNet, count_parameters
from renderflow.scene.envmap import texel_solid_angles
from renderflow.scene.render import RAY_EPS, _Geometry, brdf, render_radiance
from renderflow.scene.scene import CameraPose, gen_scene, orbit_poses
from renderflow.scene.sequence import SequenceConfig, load_dataset, write_dataset
from renderflow.train import TrainConfig, train_stage1, train_stage2

from conftest import TINY_NET, record_acceptance
from oracles import brute_ssim, lambert_scene, ray_sphere_normal, scalar_occluded, single_texel_env

SIGMA = 0.005


# ----------------------------------------------------------------------------
# shared heavy fixtures: the 64x64 learning-signal dataset and its stage-1 model

@pytest.fixture(scope="module")
def learning_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("learning_data")
    write_dataset(out, seed=0, n_sequences=50, config=SequenceConfig(frames=5, res=(64, 64)),
                  val_frac=0.1, test_frac=0.1)
    return out


@pytest.fixture(scope="module")
def learning_ckpt(learning_data):
    train = load_dataset(learning_data, "train")
    net = NetConfig(dim=64, depth=4, patch=8, image_res=(64, 64), env_res=(16, 32))
    start = time.perf_counter()
    ck = train_stage1(train, TrainConfig(steps=500, lr=3e-4), net)
    ck.extra["train_seconds"] = time.perf_counter() - start
    return ck


# ----------------------------------------------------------------------------
# 1. bridge math

def test_criterion_01_bridge_math():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    z0, z1 = rng.uniform(size=64), rng.uniform(size=64)
    eps = rng.standard_normal(64)
    endpoints = (np.array_equal(interpolate(z0, z1, 0.0, SIGMA, eps), z0)
                 and np.allclose(interpolate(z0, z1, 1.0, 0.0, eps), z1, atol=1e-15))
    inverse_err = 0.0
    for t in (0.0, 0.25, 0.5, 0.75):
        zt = interpolate(z0, z1, t, SIGMA, eps)
        inverse_err = max(inverse_err, float(np.abs(recover_endpoint(zt, velocity_target(z1, zt, t), t) - z1).max()))
    rel = {}
    n = 1_000_000
    a, b = np.full(n, 0.2), np.full(n, 0.7)
    for t in (0.25, 0.5, 0.75):
        zt = interpolate(a, b, t, SIGMA, rng.standard_normal(n))
        rel[t] = abs(np.var(zt) / (SIGMA ** 2 * t * (1 - t)) - 1)
    step = sde_step(np.full(n, 0.3), np.full(n, 0.4), 0.25, 0.5, SIGMA, rng)
    rel["sde_step"] = abs(np.var(step) / (SIGMA ** 2 * 0.25) - 1)
    seconds = time.perf_counter() - start
    ok = endpoints and inverse_err <= 1e-12 and max(rel.values()) < 0.05 and seconds < 60
    record_acceptance(1, "bridge math", ok,
                      f"inverse max err {inverse_err:.1e}, worst variance rel err {max(rel.values()):.4f}, "
                      f"{seconds:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 2. oracle inference equivalence

def test_criterion_02_oracle_inference(tiny_train):
    start = time.perf_counter()
    arrays = sequence_arrays(tiny_train[0])
    # a 13-frame clip exercises three overlapping chunks
    long = arrays
    while len(long) < 13:
        long = _concat(long, arrays)
    oracle = OracleVelocity(long.reference)
    errs = {}
    clip = long.slice(0, 5)
    for name, cfg in (("1-step", InferConfig(steps=1)), ("4-step ODE", InferConfig(steps=4)),
                      ("4-step SDE sigma=0", InferConfig(steps=4, mode="sde", sde_sigma=0.0))):
        errs[name] = np.abs(render_clip(oracle, clip, cfg, dtype=torch.float64).raw - clip.reference).max()
    prog = render_progressive(oracle, long.slice(0, 13), InferConfig(steps=4), dtype=torch.float64)
    errs["progressive"] = np.abs(prog.raw - long.reference[:13]).max()
    keys = np.array([0, 8])
    kf = render_with_keyframes(oracle, long.slice(0, 13), long.reference[keys], keys, InferConfig(steps=1),
                               dtype=torch.float64)
    errs["keyframes"] = np.abs(kf.raw - long.reference[:13]).max()
    seconds = time.perf_counter() - start
    worst = float(max(errs.values()))
    ok = worst <= 1e-5 and seconds < 60
    record_acceptance(2, "oracle inference equivalence", ok,
                      ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {seconds:.1f}s")
    assert ok


def _concat(a, b):
    from renderflow.data import ClipArrays
    offset = a.frame_indices[-1] + 1
    return ClipArrays(albedo=np.concatenate([a.albedo, b.albedo]),
                      attributes=np.concatenate([a.attributes, b.attributes]),
                      env_ldr=np.concatenate([a.env_ldr, b.env_ldr]),
                      frame_indices=np.concatenate([a.frame_indices, b.frame_indices + offset]),
                      reference=np.concatenate([a.reference, b.reference]))


# ----------------------------------------------------------------------------
# 3. gradient correctness

def test_criterion_03_gradient_check():
    start = time.perf_counter()
    torch.manual_seed(0)
    cfg = NetConfig(dim=8, depth=1, heads=2, patch=4, lora_rank=2, env_patch=4, image_res=(8, 8), env_res=(4, 8))
    net = RenderNet(cfg).double()
    n_params = count_parameters(net)
    gen = torch.Generator().manual_seed(1)
    with torch.no_grad():
        # open the zero-initialised gates so every parameter group carries gradient
        for p in net.parameters():
            p.add_(0.3 * torch.randn(p.shape, generator=gen, dtype=p.dtype))
    rand = lambda *s: torch.rand(*s, generator=gen, dtype=torch.float64)
    z0, z1 = rand(2, 2, 8, 8, 3), rand(2, 2, 8, 8, 3)
    t = torch.tensor([0.25, 0.5], dtype=torch.float64)
    t_b = t.reshape(-1, 1, 1, 1, 1)
    eps = torch.randn(z0.shape, generator=gen, dtype=torch.float64)
    state = BridgeState(z0, z1, t_b, eps, interpolate(z0, z1, t_b, SIGMA, eps))
    cond = ConditionBundle(attributes=rand(2, 2, 8, 8, 8), env_ldr=rand(2, 2, 4, 8, 3),
                           frame_positions=torch.arange(2, dtype=torch.float64).expand(2, 2).clone(),
                           keyframes=rand(2, 2, 8, 8, 3),
                           key_positions=torch.tensor([[0.0, 6.0], [2.0, 9.0]], dtype=torch.float64))

    def objective():
        return loss_total(net(state.zt, t, cond, use_keyframes=True), state)[0]

    net.zero_grad()
    objective().backward()
    named = list(net.named_parameters())
    sizes = np.array([p.numel() for _, p in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = np.random.default_rng(0).choice(int(sizes.sum()), 200, replace=False)
    h, worst, worst_name = 1e-6, 0.0, ""
    for k in picks:
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        j = int(k - offsets[i])
        name, p = named[i]
        analytic = p.grad.reshape(-1)[j].item()
        with torch.no_grad():
            flat = p.data.view(-1)
            orig = flat[j].item()
            flat[j] = orig + h
            up = objective().item()
            flat[j] = orig - h
            down = objective().item()
            flat[j] = orig
        numeric = (up - down) / (2 * h)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        if rel > worst:
            worst, worst_name = rel, name
    seconds = time.perf_counter() - start
    ok = n_params <= 5000 and worst < 1e-4 and seconds < 300
    record_acceptance(3, "gradient correctness", ok,
                      f"{n_params} params, worst rel err {worst:.2e} ({worst_name}), {seconds:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 4. determinism

@pytest.mark.slow
def test_criterion_04_determinism(learning_ckpt, learning_data):
    model = NetVelocity.from_checkpoint(learning_ckpt)
    seq = load_dataset(learning_data, "val")[0]
    arrays = sequence_arrays(seq)
    stats = variance_over_runs(
        lambda i: render_progressive(model, arrays, InferConfig(steps=4, mode="ode", rng_seed=i)).images,
        10, arrays.reference)
    ok = stats["max_pixel_deviation"] == 0.0 and stats["max_psnr_variance"] == 0.0 \
        and stats["max_ssim_variance"] == 0.0
    record_acceptance(4, "determinism", ok,
                      f"10 runs: max pixel dev {stats['max_pixel_deviation']}, psnr var "
                      f"{stats['max_psnr_variance']}, ssim var {stats['max_ssim_variance']}")
    assert ok


# ----------------------------------------------------------------------------
# 5. renderer correctness

def _texel_direction(row, col, res):
    theta = math.pi * (row + 0.5) / res[0]
    phi = 2 * math.pi * (col + 0.5) / res[1]
    return np.array([math.sin(theta) * math.cos(phi), math.cos(theta), math.sin(theta) * math.sin(phi)])


def _lambert_check():
    albedo = np.array([0.8, 0.6, 0.4])
    scene = lambert_scene(tuple(albedo))
    env_res, row, col, radiance = (8, 16), 2, 3, 10.0
    env = single_texel_env(env_res, row, col, radiance)
    light = _texel_direction(row, col, env_res)
    d_omega = math.sin(math.pi * (row + 0.5) / env_res[0]) * (math.pi / env_res[0]) * (2 * math.pi / env_res[1])
    pose = CameraPose(position=(0.0, 1.5, 4.0), look_at=(0.0, 1.0, 0.0), fov_deg=45.0)
    img, _ = render_radiance(scene, env, pose, (32, 32))
    dirs = pose.primary_rays((32, 32))
    worst, count = 0.0, 0
    for i in range(32):
        for j in range(32):
            normal = ray_sphere_normal((0.0, 1.0, 0.0), 1.0, pose.position, dirs[i, j])
            if normal is None:
                continue
            cos = max(0.0, float(normal @ light))
            expected = albedo / math.pi * cos * radiance * d_omega
            if cos > 1e-3:
                worst = max(worst, float(np.max(np.abs(img[i, j] - expected) / expected)))
                count += 1
            else:
                worst = max(worst, float(np.max(np.abs(img[i, j] - expected))))
    return worst, count


def _shadow_check(n_scenes=5, res=(24, 24)):
    env_res = (8, 16)
    rng = np.random.default_rng(7)
    agree = disagree = shadowed = skipped = 0
    for seed in range(n_scenes):
        scene = gen_scene(seed, 3)
        pose = orbit_poses(1, radius=4.0, height=2.5, start_deg=float(rng.uniform(0, 360)))[0]
        geo = _Geometry(scene)
        dirs = pose.primary_rays(res).reshape(-1, 3)
        origin = np.broadcast_to(np.asarray(pose.position, float), dirs.shape)
        hit, idx, _, points, normals = geo.closest_hit(origin, dirs)
        hit = hit.reshape(-1)
        texels = [(int(rng.integers(1, 4)), int(rng.integers(0, env_res[1]))) for _ in range(3)]
        for row, col in texels:
            env = single_texel_env(env_res, row, col, 5.0)
            mask = np.zeros(env_res, dtype=bool)
            mask[row, col] = True
            img, _ = render_radiance(scene, env, pose, res, light_mask=mask)
            img = img.reshape(-1, 3)
            light = _texel_direction(row, col, env_res)
            weight = 5.0 * texel_solid_angles(env_res)[row, col]
            for k in np.nonzero(hit)[0]:
                p, n = points.reshape(-1, 3)[k], normals.reshape(-1, 3)[k]
                cos = float(n @ light)
                if cos <= 0:
                    continue
                blocked, ambiguous = scalar_occluded(scene, p + n * RAY_EPS, light, RAY_EPS)
                if ambiguous:
                    skipped += 1
                    continue
                obj = int(idx.reshape(-1)[k])
                f = brdf(n, light, -dirs[k], geo.albedo[obj], geo.material[obj, 0:1], geo.material[obj, 1:2],
                         geo.material[obj, 2:3])
                expected = np.zeros(3) if blocked else f * cos * weight
                shadowed += bool(blocked)
                if np.allclose(img[k], expected, rtol=1e-9, atol=1e-12):
                    agree += 1
                else:
                    disagree += 1
    return agree, disagree, shadowed, skipped


def test_criterion_05_renderer():
    start = time.perf_counter()
    lambert_err, lambert_pixels = _lambert_check()
    agree, disagree, shadowed, skipped = _shadow_check()
    seconds = time.perf_counter() - start
    ok = (lambert_err < 1e-3 and lambert_pixels > 50 and disagree == 0 and shadowed > 0 and seconds < 120)
    record_acceptance(5, "renderer correctness", ok,
                      f"lambert worst rel err {lambert_err:.1e} over {lambert_pixels} px; shadow oracle "
                      f"{agree} agree / {disagree} disagree ({shadowed} shadowed, {skipped} grazing skipped), "
                      f"{seconds:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 6. learning signal

@pytest.mark.slow
def test_criterion_06_learning_signal(learning_ckpt, learning_data):
    held_out = load_dataset(learning_data, "val") + load_dataset(learning_data, "test")
    model_psnr = evaluate_model(NetVelocity.from_checkpoint(learning_ckpt), held_out).aggregate["psnr"]
    base_psnr = albedo_baseline(held_out).aggregate["psnr"]
    ok = model_psnr >= base_psnr + 3.0
    record_acceptance(6, "learning signal", ok,
                      f"held-out PSNR {model_psnr:.2f} dB vs albedo passthrough {base_psnr:.2f} dB "
                      f"(margin {model_psnr - base_psnr:+.2f}, need +3); 500 steps in "
                      f"{learning_ckpt.extra['train_seconds']:.0f}s")
    assert ok


# ----------------------------------------------------------------------------
# 7. keyframe trend

@pytest.mark.slow
def test_criterion_07_keyframe_trend(tmp_path_factory):
    out = tmp_path_factory.mktemp("long_data")
    cfg = SequenceConfig(frames=40, res=(32, 32), orbit_arc_deg=160)
    write_dataset(out, seed=1, n_sequences=20, config=cfg, val_frac=0.1, test_frac=0.1)
    train = load_dataset(out, "train")
    held_out = load_dataset(out, "val") + load_dataset(out, "test")
    net = NetConfig(dim=64, depth=4, patch=4, image_res=(32, 32), env_res=(16, 32))
    base = train_stage1(train, TrainConfig(steps=800, lr=3e-4), net)
    stage2 = train_stage2(train, base, TrainConfig(stage="keyframe", steps=400, lr=3e-4, keyframe_gap=8))
    model = NetVelocity.from_checkpoint(stage2)
    none = evaluate_model(model, held_out).aggregate["psnr"]
    gap8 = evaluate_model(model, held_out, keyframe_gap=8).aggregate["psnr_non_keyframe"]
    gap32 = evaluate_model(model, held_out, keyframe_gap=32).aggregate["psnr_non_keyframe"]
    base_model = NetVelocity.from_checkpoint(base)
    bitwise = all(
        np.array_equal(render_progressive(base_model, sequence_arrays(s)).images,
                       render_progressive(model, sequence_arrays(s)).images) for s in held_out)
    ok = gap8 >= none and gap8 >= gap32 and bitwise
    record_acceptance(7, "keyframe trend", ok,
                      f"non-keyframe PSNR gap8 {gap8:.3f}, gap32 {gap32:.3f}, no keyframes {none:.3f}; "
                      f"keyframes-off output bitwise equal to stage 1: {bitwise}")
    assert ok


# ----------------------------------------------------------------------------
# 8. ablation structure

def test_criterion_08_ablation_structure(tiny_train, tiny_val):
    budget = AblationBudget(steps=3, stage2_steps=2, batch=2, lr=1e-3, warmup_steps=1, seed=11, keyframe_gap=3,
                            net=NetConfig(**TINY_NET))
    problems = []
    for suite in SUITES:
        table = run_ablation(suite, tiny_train, tiny_val, budget)
        names = [r["name"] for r in table.rows]
        if names != ablation_row_names(suite, budget):
            problems.append(f"{suite}: rows {names}")
        if table.meta.get("seed") != 11 or table.meta.get("proxy_note") != PROXY_NOTE:
            problems.append(f"{suite}: meta {table.meta.get('seed')}")
        if PROXY_NOTE not in table.to_text():
            problems.append(f"{suite}: proxy note missing from text report")
        columns = {k for r in table.rows for k in r if k != "name"}
        if any("lpips" in c.lower() for c in columns):
            problems.append(f"{suite}: lpips column {columns}")
    ok = not problems
    record_acceptance(8, "ablation structure", ok,
                      f"{len(SUITES)} suites checked" + (f"; {problems}" if problems else ""))
    assert ok


# ----------------------------------------------------------------------------
# 9. inverse adapter

@pytest.mark.slow
def test_criterion_09_inverse_adapter(learning_ckpt, learning_data):
    train = load_dataset(learning_data, "train")
    val = load_dataset(learning_data, "val")
    inv = train_inverse(train, learning_ckpt, InverseConfig(steps=400))
    frozen = max(h["frozen_grad_norm"] for h in inv.history)
    model = build_inverse(inv, learning_ckpt)
    trunk_same = all(np.array_equal(p.detach().numpy(), learning_ckpt.params[n])
                     for n, p in model.trunk.named_parameters())
    rep = evaluate_inverse(model, val, ("albedo", "normal"))
    normal_ok = rep["normal"]["model"] < rep["normal"]["baseline"]
    albedo_ok = rep["albedo"]["model"] > rep["albedo"]["baseline"]
    ok = frozen == 0.0 and trunk_same and normal_ok and albedo_ok
    record_acceptance(9, "inverse adapter", ok,
                      f"max frozen grad norm {frozen}, trunk unchanged {trunk_same}; normal "
                      f"{rep['normal']['model']:.1f} deg vs constant {rep['normal']['baseline']:.1f}; albedo "
                      f"{rep['albedo']['model']:.2f} dB vs input copy {rep['albedo']['baseline']:.2f}")
    assert ok


# ----------------------------------------------------------------------------
# 10. metrics oracle

def test_criterion_10_metrics_oracle():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(10):
        a = rng.uniform(size=(32, 32, 3))
        b = np.clip(a + rng.normal(0, rng.uniform(0.01, 0.3), size=a.shape), 0, 1)
        worst = max(worst, abs(ssim(a, b) - brute_ssim(a, b)))
    img = rng.uniform(size=(8, 8, 3)) * 0.5
    exact = (psnr(img, img) == math.inf and psnr(np.zeros((4, 4)), np.ones((4, 4))) == 0.0
             and psnr(np.zeros((4, 4)), np.full((4, 4), 0.25)) == 10 * math.log10(16))
    ok = worst <= 1e-4 and exact
    record_acceptance(10, "metrics oracle", ok, f"ssim worst abs diff {worst:.1e}; psnr closed forms exact {exact}")
    assert ok
