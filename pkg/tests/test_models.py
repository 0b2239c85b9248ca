import struct

import numpy as np
import pytest

from cass import numkernel as nk
from cass.models import (
    ArmSpec,
    CheckpointError,
    GeometryError,
    KindError,
    attention_weights,
    build_arm,
    checkpoint_load,
    checkpoint_save,
    feature_map,
    recompute_bn_stats,
    swap_head,
)
from cass.pretrain import cass_loss

from _gradcases import TINY_CNN, TINY_VIT, end_to_end_errors
from _oracles import naive_conv2d


@pytest.fixture
def batch():
    return np.random.default_rng(0).random((3, 3, 32, 32)).astype(np.float32)


def vit(**kw):
    return ArmSpec(kind="transformer", **kw)


def test_transformer_token_count():
    arm = build_arm(vit(image_size=32, patch_size=4), seed=0)
    assert arm.spec.num_patches == 64
    assert arm.params["pos_embed"].shape == (1, 65, 32)


def test_indivisible_patch_geometry():
    with pytest.raises(GeometryError):
        build_arm(vit(image_size=30, patch_size=4))


def test_build_is_deterministic():
    for kind in ("cnn", "transformer"):
        a = build_arm(ArmSpec(kind=kind), seed=7)
        b = build_arm(ArmSpec(kind=kind), seed=7)
        assert list(a.params) == list(b.params)
        for name in a.params:
            assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


def test_small_cnn_parameter_count():
    # stem 3->8 conv3x3 + bn; stage0 8->8 two conv3x3 + two bn;
    # stage1 8->16 two conv3x3 + two bn + 1x1 projection + bn; head 16->64.
    c, p = 3, 64
    stem = c * 8 * 9 + 2 * 8
    stage0 = 2 * (8 * 8 * 9 + 2 * 8)
    stage1 = (8 * 16 * 9 + 2 * 16) + (16 * 16 * 9 + 2 * 16) + (8 * 16 + 2 * 16)
    head = 16 * p + p
    assert build_arm(ArmSpec(kind="cnn", depth="small")).num_parameters() == stem + stage0 + stage1 + head


def test_small_transformer_parameter_count():
    d, hidden, patches, p = 32, 64, 64, 64
    block = 2 * 2 * d + 4 * (d * d + d) + (d * hidden + hidden) + (hidden * d + d)
    expected = (48 * d + d) + d + (patches + 1) * d + 2 * block + 2 * d + (d * p + p)
    assert build_arm(vit()).num_parameters() == expected


@pytest.mark.parametrize("kind", ["cnn", "transformer"])
def test_forward_shape(kind, batch):
    arm = build_arm(ArmSpec(kind=kind, head_dim_out=10))
    assert arm.forward(batch[:1], "train").shape == (1, 10)
    assert arm.forward(batch, "eval").shape == (3, 10)


@pytest.mark.parametrize("kind", ["cnn", "transformer"])
def test_softmax_head_rows_sum_to_one(kind, batch):
    arm = build_arm(ArmSpec(kind=kind, head_activation="softmax"))
    np.testing.assert_allclose(arm.forward(batch, "eval").data.sum(axis=1), 1.0, atol=1e-5)


def test_sigmoid_head_in_unit_interval(batch):
    out = build_arm(ArmSpec(head_activation="sigmoid")).forward(batch, "eval").data
    assert np.all((out > 0) & (out < 1))


def test_geometry_mismatch(batch):
    with pytest.raises(GeometryError):
        build_arm(ArmSpec()).forward(batch[:, :, :16, :16])


@pytest.mark.parametrize("kind", ["cnn", "transformer"])
def test_eval_forward_is_per_sample(kind, batch):
    arm = build_arm(ArmSpec(kind=kind), seed=1)
    arm.forward(batch, "train")  # move running stats off their init
    together = arm.forward(batch, "eval").data
    alone = arm.forward(batch[1:2], "eval").data
    np.testing.assert_allclose(alone[0], together[1], atol=1e-6)


def test_train_mode_updates_running_stats(batch):
    arm = build_arm(ArmSpec(kind="cnn"))
    before = arm.buffers["stem.bn.running_mean"].copy()
    arm.forward(batch, "eval")
    np.testing.assert_array_equal(arm.buffers["stem.bn.running_mean"], before)
    arm.forward(batch, "train")
    assert not np.array_equal(arm.buffers["stem.bn.running_mean"], before)


@pytest.mark.parametrize("kind", ["cnn", "transformer"])
def test_swap_head(kind, batch):
    arm = build_arm(ArmSpec(kind=kind), seed=2)
    taps_before = {}
    arm.forward(batch, "eval", taps=taps_before)
    new = swap_head(arm, 5, seed=3)
    assert new.forward(batch, "eval").shape == (3, 5)
    for name, p in arm.params.items():
        if not name.startswith("head."):
            assert p.data.tobytes() == new.params[name].data.tobytes()
    taps_after = {}
    new.forward(batch, "eval", taps=taps_after)
    np.testing.assert_array_equal(taps_before["pooled"], taps_after["pooled"])
    assert new.spec.head_activation == "none"


def test_swap_head_rejects_single_class():
    with pytest.raises(ValueError):
        swap_head(build_arm(ArmSpec()), 1)


class TestAttention:
    def test_rows_and_shape(self, batch):
        arm = build_arm(vit(num_blocks=3), seed=0)
        maps = attention_weights(arm, batch)
        assert len(maps) == 3
        for a in maps:
            assert a.shape == (3, 2, 65, 65)
            np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-6)

    def test_recompute_from_queries_and_keys(self, batch):
        arm = build_arm(vit(), seed=0)
        taps = {}
        arm.forward(batch, "eval", taps=taps)
        for q, k, a in zip(taps["queries"], taps["keys"], taps["attention"]):
            s = q.astype(np.float64) @ np.swapaxes(k, -1, -2) / np.sqrt(q.shape[-1])
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            np.testing.assert_allclose(a, e / e.sum(axis=-1, keepdims=True), atol=1e-6)

    def test_cnn_has_no_attention(self, batch):
        with pytest.raises(KindError):
            attention_weights(build_arm(ArmSpec()), batch)


class TestFeatureMap:
    def test_first_conv_shape_and_determinism(self, batch):
        arm = build_arm(ArmSpec(), seed=0)
        a = feature_map(arm, batch, "first_conv")
        assert a.shape == (3, 8, 32, 32)
        np.testing.assert_array_equal(a, feature_map(arm, batch, "first_conv"))

    def test_first_conv_matches_direct_convolution(self, batch):
        arm = build_arm(ArmSpec(image_size=8), seed=0)
        x = batch[:1, :, :8, :8]
        expected = naive_conv2d(x.astype(np.float64), arm.params["stem.conv.weight"].data.astype(np.float64), 1, 1)
        np.testing.assert_allclose(feature_map(arm, x, "first_conv"), expected, atol=1e-6)

    def test_stage_taps(self, batch):
        arm = build_arm(ArmSpec(depth="base"))
        assert feature_map(arm, batch, "stage_2").shape == (3, 32, 8, 8)

    def test_unknown_tap(self, batch):
        with pytest.raises(KeyError):
            feature_map(build_arm(ArmSpec()), batch, "stage_9")

    def test_transformer_has_no_feature_map(self, batch):
        with pytest.raises(KindError):
            feature_map(build_arm(vit()), batch)


class TestCheckpoint:
    @pytest.mark.parametrize("kind", ["cnn", "transformer"])
    def test_round_trip(self, kind, batch, tmp_path):
        arm = build_arm(ArmSpec(kind=kind, depth="small"), seed=4)
        arm.forward(batch, "train")
        path = checkpoint_save(arm, tmp_path / "a.ckpt")
        back = checkpoint_load(path)
        assert back.spec == arm.spec
        for name, arr in arm.state_arrays().items():
            assert arr.tobytes() == back.state_arrays()[name].tobytes()
        assert arm.forward(batch, "eval").data.tobytes() == back.forward(batch, "eval").data.tobytes()

    def test_file_size_arithmetic(self, tmp_path):
        arm = build_arm(ArmSpec(), seed=0)
        path = checkpoint_save(arm, tmp_path / "a.ckpt")
        raw = path.read_bytes()
        magic, version, index_len = struct.unpack_from("<4sII", raw)
        assert magic == b"CASS" and version == 1
        elements = sum(a.size for a in arm.state_arrays().values())
        assert len(raw) == 12 + index_len + 4 * elements

    def test_missing_name_is_reported(self, tmp_path):
        arm = build_arm(ArmSpec(), seed=0)
        del arm.params["stage1.proj.weight"]
        path = checkpoint_save(arm, tmp_path / "bad.ckpt")
        with pytest.raises(CheckpointError, match="stage1.proj.weight"):
            checkpoint_load(path)

    def test_truncated_and_version(self, tmp_path):
        path = checkpoint_save(build_arm(ArmSpec()), tmp_path / "a.ckpt")
        raw = path.read_bytes()
        (tmp_path / "t.ckpt").write_bytes(raw[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            checkpoint_load(tmp_path / "t.ckpt")
        (tmp_path / "v.ckpt").write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
        with pytest.raises(CheckpointError, match="version"):
            checkpoint_load(tmp_path / "v.ckpt")

    def test_build_from_checkpoint(self, tmp_path):
        arm = build_arm(ArmSpec(), seed=3)
        path = checkpoint_save(arm, tmp_path / "a.ckpt")
        again = build_arm(ArmSpec(), init="checkpoint", checkpoint=path)
        assert again.params["head.weight"].data.tobytes() == arm.params["head.weight"].data.tobytes()


def test_recompute_bn_stats_is_cumulative_mean(batch):
    arm = build_arm(ArmSpec(), seed=0)
    recompute_bn_stats(arm, batch, batch_size=3)
    conv = feature_map(arm, batch, "first_conv")
    np.testing.assert_allclose(arm.buffers["stem.bn.running_mean"], conv.mean(axis=(0, 2, 3)), rtol=1e-5)


LADDER = [("cnn", d) for d in ("small", "base", "large")] + [("transformer", d) for d in ("small", "base", "large")]


@pytest.mark.parametrize("kind,depth", LADDER)
def test_ladder_forward_backward_is_finite(kind, depth, batch):
    arm = build_arm(ArmSpec(kind=kind, depth=depth), seed=0)
    other = build_arm(ArmSpec(kind="transformer" if kind == "cnn" else "cnn"), seed=1)
    loss = cass_loss(arm.forward(batch[:2]), other.forward(batch[:2]))
    nk.backward(loss)
    assert np.isfinite(loss.data)
    assert all(np.all(np.isfinite(p.grad)) for p in arm.params.values())


def test_end_to_end_gradients_vit():
    errors = end_to_end_errors(TINY_VIT, TINY_CNN)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, f"{worst}: {errors[worst]:.2e}"


def test_end_to_end_gradients_cnn():
    errors = end_to_end_errors(TINY_CNN, TINY_VIT)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-4, f"{worst}: {errors[worst]:.2e}"
