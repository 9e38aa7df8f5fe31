import json
import logging

import numpy as np
import pytest
import torch

from llhanet.blocks import ConfigurationError
from llhanet.geometry import CorrespondenceSet, GeometryError, essential_from_pose, pose_error
from llhanet.network import (
    PRESETS,
    CheckpointError,
    NetworkConfig,
    build_model,
    declared_parameter_count,
    load_checkpoint,
    logits_to_weights,
    predict,
    predict_from_logits,
    save_checkpoint,
)
from llhanet.scenes import SceneConfig, generate_scene

from conftest import project_points, random_pose

TINY = PRESETS["tiny"]


def coords_batch(b, n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, n, 4, generator=g, dtype=torch.float64) * 2 - 1


def randomize_bn(model, seed=0):
    g = torch.Generator().manual_seed(seed)
    for m in model.modules():
        if isinstance(m, torch.nn.BatchNorm1d):
            m.running_mean.copy_(torch.randn(m.num_features, generator=g, dtype=m.running_mean.dtype) * 0.1)
            m.running_var.copy_(torch.rand(m.num_features, generator=g, dtype=m.running_var.dtype) + 0.5)
    return model


def activate(model, bias=1.0):
    """Shift logit heads so an untrained model keeps most weights active (non-degenerate solve)."""
    with torch.no_grad():
        for st in model.stages:
            st.head.bias.fill_(bias)
        if model.integration is not None:
            model.integration.head.bias.fill_(bias)
    return model


class TestConfig:
    @pytest.mark.parametrize("kw", [
        dict(channels=12), dict(channels=4), dict(piha_per_extraction=0), dict(extraction_stages=0),
        dict(block="mlp"), dict(pool="sum"), dict(clusters=1), dict(llf_ratio=3),
    ])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            NetworkConfig(**kw).validate()

    def test_hash_and_round_trip(self):
        cfg = PRESETS["desk"]
        assert NetworkConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        assert cfg.hash() != PRESETS["full"].hash()
        assert cfg.hash() == NetworkConfig(channels=64, clusters=16).hash()


class TestLogitsToWeights:
    def test_examples(self):
        w, p = logits_to_weights(torch.tensor([0.0, -3.0, 1e4, 1e9, 0.5], dtype=torch.float64))
        assert w[0] == 0 and w[1] == 0
        assert w[2] < 1 and w[3] < 1
        assert float(w[4]) == pytest.approx(np.tanh(0.5))
        assert torch.equal(w, p)

    def test_float32_strictly_below_one(self):
        w, _ = logits_to_weights(torch.tensor([50.0]))
        assert float(w[0]) < 1.0

    def test_numpy_input(self):
        w, _ = logits_to_weights(np.array([-1.0, 2.0]))
        np.testing.assert_allclose(w, [0.0, np.tanh(2.0)])


class TestForward:
    def test_shapes_full_width(self):
        cfg = NetworkConfig(channels=128, clusters=32, piha_per_extraction=1, integration_piha=1)
        model = build_model(cfg).eval()
        with torch.no_grad():
            out = model(coords_batch(1, 512).float())
        assert len(out.stage_features) == 3
        assert all(f.shape == (1, 128, 512) for f in out.stage_features)
        assert out.logits.shape == (1, 512) and out.essential.shape == (1, 3, 3)
        assert len(out.stage_logits) == 4

    def test_permutation(self):
        model = activate(randomize_bn(build_model(TINY, dtype=torch.float64))).eval()
        rng = np.random.default_rng(0)
        with torch.no_grad():
            for trial in range(50):
                x = coords_batch(1, 40, seed=trial)
                perm = torch.from_numpy(rng.permutation(40))
                a, b = model(x), model(x[:, perm])
                assert not a.degenerate.any()
                np.testing.assert_allclose(b.logits.numpy(), a.logits[:, perm].numpy(), atol=1e-6)
                np.testing.assert_allclose(b.essential.numpy(), a.essential.numpy(), atol=1e-9)

    def test_duplicated_correspondences(self):
        model = randomize_bn(build_model(TINY, dtype=torch.float64)).eval()
        x = coords_batch(1, 30)
        with torch.no_grad():
            out = model(torch.cat([x, x], dim=1)).logits[0]
        np.testing.assert_allclose(out[:30].numpy(), out[30:].numpy(), atol=1e-6)

    def test_too_few(self):
        with pytest.raises(GeometryError):
            build_model(TINY).eval()(coords_batch(1, 7).float())

    def test_stage_context_on_error(self):
        cfg = NetworkConfig(channels=8, piha_per_extraction=1, clusters=16, integration_piha=1)
        with pytest.raises(Exception, match="extraction stage 1"):
            build_model(cfg).eval()(coords_batch(1, 10).float())

    def test_stage_input_residual(self):
        model = build_model(TINY, dtype=torch.float64)
        c = coords_batch(1, 20).transpose(1, 2)
        a = model.stage_input(c, torch.rand(1, 20, dtype=torch.float64))
        b = model.stage_input(c, torch.zeros(1, 20, dtype=torch.float64))
        assert a.shape == (1, 5, 20)
        np.testing.assert_array_equal(a[:, :4].numpy(), b[:, :4].numpy())
        assert (b[:, 4] == 0).all() and not torch.equal(a[:, 4], b[:, 4])

    def test_essential_is_weighted_eight_point(self):
        from llhanet.geometry import weighted_eight_point_batch

        model = build_model(TINY, dtype=torch.float64).eval()
        x = coords_batch(1, 40)
        with torch.no_grad():
            out = model(x)
            E, _ = weighted_eight_point_batch(x, out.weights)
        np.testing.assert_array_equal(out.essential.numpy(), E.numpy())

    def test_every_parameter_receives_gradient(self):
        from llhanet.training import TrainConfig, hybrid_loss

        sc = [generate_scene(SceneConfig(n_correspondences=64, outlier_ratio=0.5, seed=s)) for s in range(2)]
        x = torch.tensor(np.stack([s.corr.coords for s in sc]))
        y = torch.tensor(np.stack([s.corr.labels for s in sc]))
        model = activate(build_model(TINY, dtype=torch.float64)).train()
        with torch.no_grad():
            for st in model.stages:
                st.head.weight.mul_(100.0)  # make stage weights depend on the features
        out = model(x)
        rep = hybrid_loss(out, x, y, iteration=10_000, cfg=TrainConfig())
        rep.total.backward()
        dead = [n for n, p in model.named_parameters()
                if p.grad is None or not torch.isfinite(p.grad).all() or float(p.grad.abs().max()) == 0]
        # conv biases feeding context norm have an exactly zero gradient by construction
        assert all(n.endswith("conv.bias") for n in dead), dead
        assert not any(n.endswith("att1") or n.endswith("att2") for n in dead)


class TestParameterCount:
    @pytest.mark.parametrize("name", ["desk", "tiny", "full"])
    def test_declared_matches_built(self, name):
        cfg = PRESETS[name]
        assert build_model(cfg).parameter_count() == declared_parameter_count(cfg)

    @pytest.mark.parametrize("block,pool,stages", [("pointcn", False, 1), ("llf", True, 3), ("ha", True, 2)])
    def test_ablation_variants(self, block, pool, stages):
        cfg = NetworkConfig(channels=32, clusters=8, block=block, use_pool=pool, extraction_stages=stages)
        assert build_model(cfg).parameter_count() == declared_parameter_count(cfg)

    def test_frozen_counts(self):
        # regression values for the channel plan
        assert declared_parameter_count(PRESETS["desk"]) == 783_908
        assert declared_parameter_count(PRESETS["full"]) == 4_169_520

    def test_end_module_ordering(self):
        base = PRESETS["full"]
        counts = {ends: declared_parameter_count(NetworkConfig(**{**base.to_dict(), "ha_ends": ends}))
                  for ends in [("pointcn", "pointcn"), ("llf", "pointcn"), ("pointcn", "llf"), ("llf", "llf")]}
        pp, lp, pl, ll = counts.values()
        assert pp < lp == pl < ll


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = build_model(TINY, seed=3)
        save_checkpoint(model, tmp_path / "m.ckpt")
        back = load_checkpoint(tmp_path / "m.ckpt", expected=TINY)
        for (n, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
            assert torch.equal(a, b), n

    def test_deterministic_bytes(self, tmp_path):
        save_checkpoint(build_model(TINY, seed=3), tmp_path / "a.ckpt")
        save_checkpoint(build_model(TINY, seed=3), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_hash_mismatch_refused(self, tmp_path):
        save_checkpoint(build_model(TINY), tmp_path / "m.ckpt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ckpt", expected=PRESETS["desk"])

    def test_tampered_sidecar_refused(self, tmp_path):
        save_checkpoint(build_model(TINY), tmp_path / "m.ckpt")
        side = json.loads((tmp_path / "m.json").read_text())
        side["config"]["clusters"] = 5
        (tmp_path / "m.json").write_text(json.dumps(side))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m.ckpt")

    def test_build_model_restores_rng(self):
        torch.manual_seed(11)
        a = torch.rand(3)
        torch.manual_seed(11)
        build_model(TINY, seed=5)
        assert torch.equal(torch.rand(3), a)


class TestPredict:
    def _scene(self, rng, n_in=40, n_out=40):
        pose = random_pose(rng)
        inl = project_points(pose, n_in, rng)
        coords = np.concatenate([inl, rng.uniform(-1, 1, size=(n_out, 4))])
        labels = np.r_[np.ones(n_in), np.zeros(n_out)]
        return CorrespondenceSet(coords, labels, pose, essential_from_pose(pose))

    def test_oracle_weights_exact_pose(self, rng):
        corr = self._scene(rng)
        pred = predict_from_logits(corr, np.where(corr.labels > 0, 20.0, -20.0))
        rot, trans = pose_error(pred.pose, corr.pose)
        assert np.radians(rot) < 1e-6 and np.radians(trans) < 1e-6
        assert not pred.low_confidence

    def test_ransac_on_clean_prediction(self, rng):
        corr = self._scene(rng)
        logits = np.where(corr.labels > 0, 20.0, -20.0)
        a = pose_error(predict_from_logits(corr, logits).pose, corr.pose)
        b = pose_error(predict_from_logits(corr, logits, with_ransac=True, seed=1).pose, corr.pose)
        assert abs(a[0] - b[0]) < 0.5 and abs(a[1] - b[1]) < 0.5

    def test_all_negative_falls_back(self, rng, caplog):
        corr = self._scene(rng)
        with caplog.at_level(logging.WARNING):
            pred = predict_from_logits(corr, -np.arange(80, dtype=float) - 1)
        assert pred.low_confidence
        assert np.count_nonzero(pred.weights) == 8
        assert "top-8" in caplog.text
        assert not pred.decisions.any()

    def test_predict_with_model(self, rng):
        corr = self._scene(rng)
        pred = predict(corr, build_model(TINY))
        assert pred.decisions.shape == (80,)
