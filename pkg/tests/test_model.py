import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tco import autodiff as ad
from tco.model import CKPT_MAGIC, ModelConfig, ToyMVT, global_shift, init_lora, load_checkpoint
from tco.scenes import synth_scene
from tco.training import pretrain_on_scene_family, scene_family

import gradcases

SMALL = ModelConfig(image_size=16, patch=4, dim=16, heads=2, blocks=2)
KEYS = ("depth", "confidence", "R", "t", "fx", "fy")


def _images(seed, n=4, size=16):
    return np.random.default_rng(seed).random((n, size, size, 3))


def _with_random_lora(model, seed=1, scale=0.5):
    rng = np.random.default_rng(seed)
    for k in model.lora_names():
        model.params[k] = model.params[k] + scale * rng.normal(size=model.params[k].shape)
    return model


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(lora_rank=0)
    with pytest.raises(ValueError):
        ModelConfig(dim=10, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(image_size=30, patch=4)


def test_forward_rejects_bad_shapes():
    m = ToyMVT(SMALL)
    with pytest.raises(ValueError, match="shape"):
        m.forward(np.zeros((3, 8, 8, 3)))
    with pytest.raises(ValueError, match="views"):
        m.forward(np.zeros((1, 16, 16, 3)))
    with pytest.raises(ValueError, match="views"):
        m.forward(np.zeros((SMALL.max_views + 1, 16, 16, 3)))


def test_zero_lora_is_bitwise_base():
    m = ToyMVT(SMALL, seed=3)
    assert all(not m.params[k].any() for k in m.lora_names() if k.endswith(".B"))
    adapted = m.forward(_images(0))
    base = ToyMVT(SMALL, {k: v for k, v in m.params.items() if not k.startswith("lora.")}).forward(_images(0))
    for k in KEYS:
        assert np.array_equal(getattr(adapted, k).value, getattr(base, k).value)


def test_lora_changes_output_with_scale_one_over_rank():
    m = _with_random_lora(ToyMVT(SMALL, seed=3))
    out = m.forward(_images(0))
    base = ToyMVT(SMALL, {k: v for k, v in m.params.items() if not k.startswith("lora.")}).forward(_images(0))
    assert not np.array_equal(out.depth.value, base.depth.value)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_permuting_non_reference_views_permutes_outputs(seed):
    rng = np.random.default_rng(seed)
    m = _with_random_lora(ToyMVT(SMALL, seed=seed % 7), seed=seed % 5)
    imgs = rng.random((5, 16, 16, 3))
    perm = np.concatenate([[0], 1 + rng.permutation(4)])
    a, b = m.forward(imgs), m.forward(imgs[perm])
    for k in KEYS:
        assert np.max(np.abs(getattr(a, k).value[perm] - getattr(b, k).value)) < 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 3.0))
def test_activation_contracts(seed, lora_scale):
    rng = np.random.default_rng(seed)
    m = _with_random_lora(ToyMVT(SMALL, seed=seed % 11), seed=seed % 13, scale=lora_scale)
    out = m.forward(rng.random((int(rng.integers(2, 6)), 16, 16, 3)) * rng.uniform(0.1, 3))
    assert np.all(out.confidence.value > 1) and np.all(out.depth.value > 0)
    R = out.R.value
    assert np.max(np.abs(np.einsum("nji,njk->nik", R, R) - np.eye(3))) < 1e-6
    assert np.array_equal(R[0], np.eye(3)) and np.array_equal(out.t.value[0], np.zeros(3))
    assert np.all(out.fx.value > 0) and np.all(out.fy.value > 0)


def test_forward_deterministic():
    m = _with_random_lora(ToyMVT(SMALL, seed=2))
    a, b = m.forward(_images(4)), ToyMVT(SMALL, m.params).forward(_images(4))
    for k in KEYS:
        assert np.array_equal(getattr(a, k).value, getattr(b, k).value)


def test_trainable_tensor_count_is_two_per_adapted_layer():
    cfg = ModelConfig(blocks=3)
    m = ToyMVT(cfg)
    L = cfg.blocks * 4  # intra qkv, cross qkv, ffn w1, ffn w2
    names = m.trainable_names()
    assert len(names) == 2 * L
    assert all(n.startswith("lora.decoder.") and n[-2:] in (".A", ".B") for n in names)
    assert len(ToyMVT(ModelConfig(lora_targets=("qkv",))).trainable_names()) == 2 * 2 * 2
    assert all(m.params[n].shape[1 if n.endswith(".A") else 0] == cfg.lora_rank for n in names)


def test_head_ablation_flags_add_head_tensors():
    m = ToyMVT(SMALL)
    base = set(m.trainable_names())
    cam = set(m.trainable_names(("camera",)))
    dep = set(m.trainable_names(("depth",)))
    assert base < cam and base < dep
    assert all(n.startswith("head.") for n in (cam - base) | (dep - base))
    assert {n for n in dep - base} == {"head.depth.w", "head.depth.b"}
    with pytest.raises(ValueError):
        m.trainable_names(("encoder",))


def test_frozen_tensors_get_zero_gradient_and_lora_nonzero():
    m = _with_random_lora(ToyMVT(SMALL, seed=5), scale=0.1)
    sc = synth_scene("box", seed=2, n_views=3, resolution=16)
    tape = ad.Tape()
    names = sorted(m.params)
    leaves = [tape.var(m.params[k]) for k in names]
    lora = set(m.lora_names())
    # frozen tensors enter as constants: the tape never records them
    bound = {k: v for k, v in zip(names, leaves) if k in lora}
    pred = m.forward(sc.images, bound)
    loss = ad.mean(ad.abs(pred.depth - sc.depths))
    grads = dict(zip(names, tape.gradient(loss, leaves)))
    assert all(not np.any(grads[k]) for k in names if k not in lora)
    assert any(np.any(grads[k]) for k in lora)


def test_reset_lora_and_frozen_hash():
    m = _with_random_lora(ToyMVT(SMALL))
    h = m.frozen_hash()
    m.reset_lora(0)
    assert m.frozen_hash() == h
    assert all(np.array_equal(m.params[k], v) for k, v in init_lora(SMALL, 0).items())
    m.params["head.depth.b"][0] += 1e-12
    assert m.frozen_hash() != h


def test_checkpoint_round_trip(tmp_path):
    m = _with_random_lora(ToyMVT(SMALL, seed=9))
    p = m.save(tmp_path / "m.ckpt", extra={"note": "x"})
    assert p.read_bytes()[:8] == CKPT_MAGIC
    cfg, params, extra = load_checkpoint(p)
    assert cfg == SMALL and extra == {"note": "x"}
    back = ToyMVT.load(p)
    a, b = m.forward(_images(1)), back.forward(_images(1))
    for k in KEYS:
        assert np.array_equal(getattr(a, k).value, getattr(b, k).value)
    m.save(tmp_path / "m2.ckpt", extra={"note": "x"})
    assert (tmp_path / "m2.ckpt").read_bytes() == p.read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    with pytest.raises(ValueError, match="magic"):
        load_checkpoint(bad)


def test_zero_step_pretraining_keeps_contracts():
    gen = scene_family(seed=5, resolution=16, n_views=3)
    m = pretrain_on_scene_family(gen, 0, model=ToyMVT(SMALL, seed=1))
    out = m.forward(gen(0).images)
    assert np.all(out.confidence.value > 1) and np.all(out.depth.value > 0)


def test_short_pretraining_reduces_depth_error():
    gen = scene_family(seed=5, resolution=16, n_views=3)
    held = [scene_family(seed=6, resolution=16, n_views=3)(i) for i in range(3)]
    m0 = ToyMVT(SMALL, seed=1)

    def err(m):
        return np.mean([np.mean(np.abs(m.forward(s.images).depth.value - s.depths) / s.depths) for s in held])

    m1 = pretrain_on_scene_family(gen, 60, model=m0.copy(), lr=3e-3)
    assert err(m1) < err(m0)
    assert m1.lora_names() == m0.lora_names()
    assert all(np.array_equal(m1.params[k], m0.params[k]) for k in m0.lora_names())


def test_model_gradients_through_lora():
    assert max(gradcases.run_case("model_forward_lora", s) for s in range(3)) < gradcases.TOL


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(-6, 6), st.integers(-6, 6))
def test_global_shift_recovers_integer_crops(seed, dx, dy):
    big = np.random.default_rng(seed).random((48, 48, 3))
    imgs = np.stack([big[8:40, 8:40], big[8 + dy:40 + dy, 8 + dx:40 + dx], big[8:40, 8:40]])
    s = global_shift(imgs)
    assert np.array_equal(s[0], [0.0, 0.0])
    assert np.max(np.abs(s[1] - [-dx, -dy])) < 1e-2
    assert np.max(np.abs(s[2])) < 1e-9


def test_global_shift_tracks_lateral_camera_motion():
    # for parallel cameras, shift * depth / focal follows the x offset of the camera
    sc = synth_scene("two-walls", seed=3, n_views=6, resolution=32, convergence=0.0)
    s = global_shift(sc.images)
    est = s[1:, 0] * sc.depths[1:].mean(axis=(1, 2)) / sc.intrinsics[0].fx
    tx = np.array([p.t[0] for p in sc.poses[1:]])
    assert np.corrcoef(est, tx)[0, 1] < -0.9
