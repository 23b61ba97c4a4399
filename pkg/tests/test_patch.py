import functools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safepatch.data import NO_OP, parse_condition, parse_prompt
from safepatch.diffusion import DenoiserParams, encode_prompts, injection_shapes, predict_noise
from safepatch.exceptions import IncompatiblePatchError, InvalidConfigError, InvalidShapeError
from safepatch.numeric import Rng, Tensor, backward, grad_check, mse
from safepatch.patch import (
    ZERO_CONVS,
    check_compatible,
    init_patch,
    map_condition,
    merge_patches,
    patch_forward,
)

from conftest import perturbed, random_images

PROMPTS = [parse_prompt("large blob"), parse_prompt("frame dim")]
CONDS = [parse_condition("add clothing to the figure"), NO_OP]


@functools.lru_cache(maxsize=None)
def _live(seed):
    return perturbed(init_patch(DenoiserParams.init(0), seed=3, category="blob"), seed)


def test_init_copies_encoder_bitwise(base, fresh_patch):
    copy = fresh_patch.copy_view()
    assert copy
    for name, t in copy.items():
        assert np.array_equal(t.data, base[name].data)
        assert t.data is not base[name].data
    assert not any(name.startswith(("d1.", "d2.", "out.")) for name in copy)


def test_init_zero_convs(fresh_patch):
    for name, (cout, cin) in ZERO_CONVS.items():
        assert fresh_patch[f"{name}.w"].shape == (cout, cin, 1, 1)
        assert not fresh_patch[f"{name}.w"].data.any()
        assert not fresh_patch[f"{name}.b"].data.any()


def test_init_mapper_seeded(base, fresh_patch):
    assert init_patch(base, seed=3).digest() == fresh_patch.digest()
    other = init_patch(base, seed=4)
    assert not np.array_equal(other["map.proj.w"].data, fresh_patch["map.proj.w"].data)
    assert np.array_equal(other["zero_mid.w"].data, fresh_patch["zero_mid.w"].data)


def test_check_compatible(base, fresh_patch):
    check_compatible(fresh_patch, base)
    with pytest.raises(IncompatiblePatchError):
        check_compatible(init_patch(DenoiserParams.init(0, np.float32)), base)


def test_map_condition_shape(fresh_patch):
    out = map_condition(fresh_patch, random_images(2, 1), CONDS)
    assert out.shape == (2, 8, 16, 16)
    assert np.isfinite(out.data).all()


def test_map_condition_depends_on_condition(fresh_patch):
    z = random_images(1, 2)
    a = map_condition(fresh_patch, z, [CONDS[0]]).data
    b = map_condition(fresh_patch, z, [NO_OP]).data
    assert not np.array_equal(a, b)


def test_map_condition_gradients(fresh_patch):
    z = Tensor(random_images(2, 3))
    target = Tensor(random_images(2, 4).repeat(8, axis=1))
    params = [t for name, t in fresh_patch.named() if name.startswith("map.")]
    err = grad_check(lambda: mse(target, map_condition(fresh_patch, z, CONDS)), params, rng=Rng(5))
    assert err < 1e-5


def test_fresh_patch_injects_zeros(base, fresh_patch):
    inj = patch_forward(fresh_patch, base, random_images(2, 5), [3, 70], PROMPTS, CONDS)
    for got, shape in zip(inj, injection_shapes(2)):
        assert got.shape == shape
        assert not got.data.any()


def test_patch_forward_condition_batch(base, fresh_patch):
    with pytest.raises(InvalidShapeError):
        patch_forward(fresh_patch, base, random_images(2, 5), 3, PROMPTS, CONDS[:1])


def test_gradients_reach_patch_only(base, live_patch):
    z = random_images(2, 6)
    text = encode_prompts(base, PROMPTS)
    inj = patch_forward(live_patch, base, z, [5, 50], text, CONDS)
    loss = mse(Tensor(random_images(2, 7)), predict_noise(base, z, [5, 50], text, inj))
    params = list(live_patch)
    backward(loss, params)
    assert all(p.grad is not None and p.grad.shape == p.shape for p in params)
    assert any(np.abs(live_patch[f"{z}.w"].grad).max() > 0 for z in ZERO_CONVS)
    assert all(not t.requires_grad and t.grad is None for t in base)


def test_live_patch_changes_prediction(base, live_patch):
    z = random_images(1, 8)
    inj = patch_forward(live_patch, base, z, 10, PROMPTS[:1], CONDS[:1])
    assert not np.array_equal(predict_noise(base, z, 10, PROMPTS[:1], inj).data,
                              predict_noise(base, z, 10, PROMPTS[:1]).data)


# merging
# -------------------------------------------------------------------------

def test_merge_single_is_identity(live_patch):
    merged = merge_patches([(live_patch, 1.0)])
    assert merged.digest() == live_patch.digest()
    assert merged.meta["kind"] == "merged-patch"


def test_merge_hand_average():
    a, b = _live(1), _live(2)
    merged = merge_patches([(a, 1.0), (b, 3.0)])
    w = a["map.proj.w"].data * 0.25 + b["map.proj.w"].data * 0.75
    np.testing.assert_allclose(merged["map.proj.w"].data, w, rtol=0, atol=1e-15)
    assert merged.meta["weights"] in ("0.25,0.75", "0.75,0.25")


@settings(max_examples=25, deadline=None)
@given(w=st.lists(st.floats(0.01, 100.0), min_size=2, max_size=3), scale=st.floats(0.01, 100.0),
       perm_seed=st.integers(0, 10))
def test_merge_algebra(w, scale, perm_seed):
    parts = [(_live(i + 1), wi) for i, wi in enumerate(w)]
    merged = merge_patches(parts)
    perm = Rng(perm_seed).permutation(len(parts))
    assert merge_patches([parts[i] for i in perm]).digest() == merged.digest()
    scaled = merge_patches([(p, wi * scale) for p, wi in parts])
    total = sum(w)
    for name, t in merged.named():
        np.testing.assert_allclose(scaled[name].data, t.data, rtol=0, atol=1e-12)
        ref = sum(wi * p[name].data for p, wi in parts) / total
        np.testing.assert_allclose(t.data, ref, rtol=0, atol=1e-12)


def test_merge_self_is_self():
    p = _live(1)
    merged = merge_patches([(p, 0.3), (p, 0.7)])
    for name, t in merged.named():
        np.testing.assert_allclose(t.data, p[name].data, rtol=0, atol=1e-15)


def test_merge_zero_weight_drops_patch():
    a, b = _live(1), _live(2)
    merged = merge_patches([(a, 2.0), (b, 0.0)])
    assert merged.digest() == a.digest()


@pytest.mark.parametrize("weights", [[0.0, 0.0], [-1.0, 2.0], [float("nan"), 1.0], [float("inf"), 1.0]])
def test_merge_rejects_weights(weights):
    with pytest.raises(InvalidConfigError):
        merge_patches([(_live(1), weights[0]), (_live(2), weights[1])])


def test_merge_rejects_empty_and_incompatible():
    with pytest.raises(InvalidConfigError):
        merge_patches([])
    p32 = init_patch(DenoiserParams.init(0, np.float32))
    with pytest.raises(IncompatiblePatchError):
        merge_patches([(_live(1), 1.0), (p32, 1.0)])
    trimmed = _live(1).clone()
    del trimmed.tensors["zero_in.b"]
    with pytest.raises(IncompatiblePatchError):
        merge_patches([(_live(1), 1.0), (trimmed, 1.0)])
