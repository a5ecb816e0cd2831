"""Feature extractors: shapes, time-distributed exactness, freeze contracts."""
import numpy as np
import pytest

from stressseq.backbone import (
    FeatureExtractor,
    InvertedResidual,
    Sequential,
    build_backbone,
    build_mobilenet_v2,
    build_tiny_cnn,
)
from stressseq.layers import Adam, Conv2d, ReLU

from helpers import central_difference, max_rel_err


def tiny(seed=0, side=None, dtype=np.float32):
    return build_tiny_cnn(np.random.default_rng(seed), input_side=side, dtype=dtype)


class TestExtract:
    def test_tiny_cnn_feature_shape(self):
        bb = tiny()
        x = np.random.default_rng(1).random((4, 16, 16, 3)).astype(np.float32)
        assert bb.extract(x).shape == (4, 32)

    def test_identical_frames_identical_features(self):
        bb = tiny()
        frame = np.random.default_rng(2).random((1, 16, 16, 3)).astype(np.float32)
        batch = np.concatenate([frame, frame])
        feats = bb.extract(batch)
        assert np.array_equal(feats[0], feats[1])

    def test_zero_weights_give_zero_features(self):
        bb = tiny()
        for stage in bb.stages:
            for layer in stage.layers():
                for p in layer.params.values():
                    p[...] = 0.0
        x = np.random.default_rng(3).random((2, 16, 16, 3)).astype(np.float32)
        assert np.all(bb.extract(x) == 0.0)

    def test_mobilenet_feature_shape(self):
        bb = build_mobilenet_v2(np.random.default_rng(0), input_side=64)
        x = np.random.default_rng(4).random((2, 64, 64, 3)).astype(np.float32)
        assert bb.extract(x).shape == (2, 1280)

    def test_input_side_enforced(self):
        bb = tiny(side=16)
        with pytest.raises(ValueError, match="16x16"):
            bb.extract(np.zeros((1, 8, 8, 3), dtype=np.float32))
        with pytest.raises(ValueError, match="B, H, W, C"):
            bb.extract(np.zeros((8, 8, 3), dtype=np.float32))

    def test_unknown_backbone_name(self):
        with pytest.raises(ValueError, match="unknown backbone"):
            build_backbone("resnet", np.random.default_rng(0))


class TestTimeDistributed:
    def test_matches_per_frame_loop_exactly(self):
        bb = tiny()
        rng = np.random.default_rng(5)
        clips = rng.random((3, 4, 16, 16, 3)).astype(np.float32)
        td = bb.extract_timedistributed(clips)
        for t in range(4):
            assert np.array_equal(td[:, t], bb.extract(clips[:, t]))

    def test_duplicate_frames_duplicate_rows(self):
        bb = tiny()
        rng = np.random.default_rng(6)
        clips = rng.random((2, 5, 16, 16, 3)).astype(np.float32)
        clips[:, 3] = clips[:, 0]
        td = bb.extract_timedistributed(clips)
        assert np.array_equal(td[:, 3], td[:, 0])

    def test_single_frame_equals_extract(self):
        bb = tiny()
        clips = np.random.default_rng(7).random((2, 1, 16, 16, 3)).astype(np.float32)
        td = bb.extract_timedistributed(clips)
        assert np.array_equal(td[:, 0], bb.extract(clips[:, 0]))

    def test_mobilenet_td_exact(self):
        bb = build_mobilenet_v2(np.random.default_rng(1), input_side=32)
        clips = np.random.default_rng(8).random((2, 3, 32, 32, 3)).astype(np.float32)
        td = bb.extract_timedistributed(clips)
        assert td.shape == (2, 3, 1280)
        for t in range(3):
            assert np.array_equal(td[:, t], bb.extract(clips[:, t]))

    def test_rejects_4d_input(self):
        with pytest.raises(ValueError, match="B, T, H, W, C"):
            tiny().extract_timedistributed(np.zeros((2, 16, 16, 3), dtype=np.float32))


class TestFreeze:
    def test_census_and_boundaries(self):
        bb = build_mobilenet_v2(np.random.default_rng(0), input_side=32)
        assert bb.num_stages == 19
        assert [s["stage"] for s in bb.freeze_census()][:2] == ["stem", "block01"]
        bb.set_freeze(18)
        census = bb.freeze_census()
        assert all(s["frozen"] for s in census[:18])
        assert census[18] == {"stage": "head", "frozen": False}
        assert not bb.frozen
        bb.set_freeze(19)
        assert bb.frozen

    def test_out_of_range_freeze(self):
        bb = tiny()
        with pytest.raises(ValueError):
            bb.set_freeze(-1)
        with pytest.raises(ValueError):
            bb.set_freeze(4)

    def test_frozen_params_survive_training_steps(self):
        bb = tiny(seed=3)
        bb.set_freeze(2)
        frozen_before = {k: v.copy() for k, v in bb.state_dict().items()
                         if k.startswith(("tinycnn/conv1", "tinycnn/conv2"))}
        opt = Adam()
        rng = np.random.default_rng(9)
        for _ in range(3):
            x = rng.random((2, 16, 16, 3)).astype(np.float32)
            feats = bb.forward(x, training=True)
            bb.backward(np.ones_like(feats))
            opt.step(bb.trainable_items(), bb.grad_items(), lr=0.05)
        after = bb.state_dict()
        for key, val in frozen_before.items():
            assert np.array_equal(after[key], val), key
        assert not np.array_equal(after["tinycnn/conv3/conv/W"],
                                  np.zeros_like(after["tinycnn/conv3/conv/W"]))

    def test_trainable_items_track_boundary(self):
        bb = build_mobilenet_v2(np.random.default_rng(0), input_side=32)
        bb.set_freeze(18)
        names = [k for k, _ in bb.trainable_items()]
        assert names and all(n.startswith("mobilenetv2/head/") for n in names)
        bb.set_freeze(0)
        assert len(bb.trainable_items()) > len(names)


class TestCompositeBackward:
    def test_inverted_residual_gradcheck(self):
        # The residual add and stage chaining are the composition logic the
        # per-layer gradient tests cannot see.
        rng = np.random.default_rng(11)
        block = InvertedResidual(rng, 4, 4, stride=1, expand=2, name="blk",
                                 dtype=np.float64)
        assert block.residual
        bb = FeatureExtractor("mini", [block], feature_dim=4)
        x = rng.standard_normal((2, 6, 6, 4))
        v = rng.standard_normal((2, 4))

        def loss_at(inp):
            return float((bb.forward(inp, training=True) * v).sum())

        feats = bb.forward(x, training=True)
        dx = bb.backward(v * np.ones_like(feats) / np.ones_like(feats))
        numeric = central_difference(loss_at, x.copy())
        assert max_rel_err(dx, numeric) < 1e-5

        analytic = dict(bb.grad_items())
        for key, param in bb.trainable_items():
            def loss_at_param(p, key=key, param=param):
                saved = param.copy()
                param[...] = p
                out = float((bb.forward(x, training=True) * v).sum())
                param[...] = saved
                return out

            numeric = central_difference(loss_at_param, param.copy())
            # floor=1e-4: biases feeding BatchNorm have exactly-zero gradients,
            # where central differences leave ~1e-11 noise.
            assert max_rel_err(analytic[key], numeric, floor=1e-4) < 1e-5, key

    def test_stride_two_block_shapes(self):
        rng = np.random.default_rng(12)
        block = InvertedResidual(rng, 4, 8, stride=2, expand=6, name="blk")
        assert not block.residual
        y = block.forward(np.random.default_rng(0).random((2, 8, 8, 4)).astype(np.float32))
        assert y.shape == (2, 4, 4, 8)


class TestStateDict:
    def test_npz_roundtrip_reproduces_outputs(self, tmp_path):
        bb = tiny(seed=21)
        x = np.random.default_rng(22).random((2, 16, 16, 3)).astype(np.float32)
        want = bb.extract(x)
        bb.save_npz(tmp_path / "w.npz")
        other = tiny(seed=99)
        assert not np.array_equal(other.extract(x), want)
        other.load_npz(tmp_path / "w.npz")
        assert np.array_equal(other.extract(x), want)

    def test_key_mismatch_rejected(self):
        bb = tiny()
        state = bb.state_dict()
        state.pop(sorted(state)[0])
        with pytest.raises(ValueError, match="missing"):
            bb.load_state_dict(state)
        state = bb.state_dict()
        state["extra/key"] = np.zeros(1)
        with pytest.raises(ValueError, match="unexpected"):
            bb.load_state_dict(state)

    def test_shape_mismatch_rejected(self):
        bb = tiny()
        state = bb.state_dict()
        key = sorted(state)[0]
        state[key] = np.zeros((1, 1))
        with pytest.raises(ValueError, match="shape"):
            bb.load_state_dict(state)

    def test_mobilenet_state_includes_bn_buffers(self):
        bb = build_mobilenet_v2(np.random.default_rng(0), input_side=32)
        keys = bb.state_dict()
        assert "mobilenetv2/stem/bn/running_mean" in keys
        assert "mobilenetv2/block01/dw_bn/running_var" in keys
        assert "mobilenetv2/head/conv/W" in keys
