import json

import numpy as np
import pytest
import torch

from spatial_reasoning import patching, training
from spatial_reasoning.aggregation import RepresentationBatch, aggregate
from spatial_reasoning.datasets import load_split
from spatial_reasoning.errors import ConfigurationError, TrainingAborted
from spatial_reasoning.model import EncoderConfig, build_model, load_checkpoint, loss, save_checkpoint, state_hash
from spatial_reasoning.training import RunConfig, build_training_batch, pretrain, representation_count


@pytest.fixture(scope="module")
def data():
    return load_split("synthetic", split="train").subset(np.arange(48))


def _config(tmp_path, **kw):
    base = dict(dataset="synthetic", M=8, K=2, N=2, patch_size_px=13, epochs=1, seed=0, output_dir=str(tmp_path))
    base.update(kw)
    return RunConfig(**base)


class TestRunConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.M, cfg.K, cfg.N, cfg.epochs, cfg.lr, cfg.optimizer) == (64, 4, 2, 200, 1e-3, "adam")
        assert cfg.resolved_architecture == "resnet32_cifar"
        assert RunConfig(dataset="stl10", patch_size_px=36).resolved_architecture == "resnet34"

    @pytest.mark.parametrize("kw", [dict(K=1), dict(M=1), dict(N=-1), dict(epochs=0), dict(optimizer="rmsprop"),
                                    dict(patch_mode="bogus"), dict(dataset="imagenet")])
    def test_invalid(self, kw):
        with pytest.raises((ConfigurationError, ValueError)):
            RunConfig(**kw)

    def test_infeasible_patch_names_max(self):
        with pytest.raises(ConfigurationError, match="16px"):
            RunConfig(patch_size_px=20, N=2)

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigurationError, match="learning_rate"):
            RunConfig.from_dict({"learning_rate": 0.1})

    def test_hash_ignores_operational_keys(self):
        a = RunConfig(output_dir="a", device="cpu")
        assert a.hash() == RunConfig(output_dir="b").hash()
        assert a.hash() != RunConfig(seed=1).hash()

    def test_yaml_round_trip(self, tmp_path):
        import yaml

        cfg = RunConfig(N=3, patch_size_px=10)
        (tmp_path / "c.yaml").write_text(yaml.safe_dump(cfg.to_dict()))
        assert RunConfig.from_file(tmp_path / "c.yaml") == cfg


class TestBatchAssembly:
    def test_view_counts_and_patch_share(self, data):
        rng = np.random.default_rng(0)
        imgs = [data.pixels(i) for i in range(4)]
        for N, share in [(2, 1 / 3), (3, 3 / 7)]:
            cfg = RunConfig(dataset="synthetic", M=4, K=4, N=N)
            batch = build_training_batch(imgs, cfg, rng)
            assert len(batch) == representation_count(4, 4, N)
            assert (len(batch) - 16) / len(batch) == pytest.approx(share)
        assert representation_count(64, 4, 2) == 384

    def test_n0_never_samples_patches(self, data, monkeypatch):
        def forbidden(*a, **k):
            raise AssertionError("patch sampler called with N=0")

        monkeypatch.setattr(patching, "sample_patch_positions", forbidden)
        cfg = RunConfig(dataset="synthetic", M=4, K=3, N=0)
        batch = build_training_batch([data.pixels(i) for i in range(4)], cfg, np.random.default_rng(0))
        assert len(batch) == 12
        assert len(aggregate(RepresentationBatch(None, batch.provenance), 4, 3, 0)) == 4 * 6

    def test_same_generator_same_batch(self, data):
        cfg = RunConfig(dataset="synthetic", M=4, K=2, N=2)
        imgs = [data.pixels(i) for i in range(4)]
        a = build_training_batch(imgs, cfg, np.random.default_rng([0, 0, 0]))
        b = build_training_batch(imgs, cfg, np.random.default_rng([0, 0, 0]))
        assert torch.equal(a.views, b.views) and a.provenance == b.provenance


class TestPretrain:
    def test_outputs_and_log(self, tmp_path, data):
        res = pretrain(_config(tmp_path), data=data)
        assert res.checkpoint_path.exists()
        lines = (tmp_path / "train_log.jsonl").read_text().splitlines()
        assert len(lines) == 48 // 8
        rec = json.loads(lines[0])
        assert rec["n_pairs"] == 8 * 2 + 8 * 1
        assert set(rec) >= {"l_bce", "l_mse_x", "l_mse_y", "l_total", "pairs", "wall_clock"}
        ckpt = load_checkpoint(res.checkpoint_path)
        assert ckpt.config_hash == _config(tmp_path).hash()
        assert ckpt.epoch == 1 and ckpt.step == 6

    def test_identical_seeds_identical_losses(self, tmp_path, data):
        a = pretrain(_config(tmp_path / "a"), data=data)
        b = pretrain(_config(tmp_path / "b"), data=data)
        assert a.losses() == b.losses()
        assert state_hash(load_checkpoint(a.checkpoint_path).build_model()) == \
            state_hash(load_checkpoint(b.checkpoint_path).build_model())

    def test_resume_matches_uninterrupted(self, tmp_path, data):
        full = pretrain(_config(tmp_path / "full", epochs=2), data=data)
        part_cfg = _config(tmp_path / "part", epochs=2)
        # run the first epoch only by stopping after the first checkpoint
        first = pretrain(part_cfg.replace(epochs=1), data=data)
        ckpt = load_checkpoint(first.checkpoint_path)
        ckpt.config_hash = part_cfg.hash()  # the 1-epoch run stands in for an interrupted 2-epoch run
        save_checkpoint(first.checkpoint_path, ckpt)
        resumed = pretrain(part_cfg.replace(resume_from=str(first.checkpoint_path)), data=data)
        assert resumed.losses() == full.losses()
        assert state_hash(load_checkpoint(resumed.checkpoint_path).build_model()) == \
            state_hash(load_checkpoint(full.checkpoint_path).build_model())

    def test_resume_rejects_other_config(self, tmp_path, data):
        first = pretrain(_config(tmp_path / "a"), data=data)
        with pytest.raises(ConfigurationError, match="hash"):
            pretrain(_config(tmp_path / "b", lr=0.5, resume_from=str(first.checkpoint_path)), data=data)

    def test_nan_loss_aborts_with_diagnostics(self, tmp_path, data, monkeypatch):
        def nan_loss(outputs, targets):
            lb = loss(outputs, targets)
            lb.l_total = lb.l_total * float("nan")
            return lb

        monkeypatch.setattr(training, "loss", nan_loss)
        with pytest.raises(TrainingAborted) as info:
            pretrain(_config(tmp_path), data=data)
        assert info.value.diagnostics["step"] == 0
        assert len(info.value.diagnostics["image_ids"]) == 8

    def test_too_few_images(self, tmp_path, data):
        with pytest.raises(ConfigurationError):
            pretrain(_config(tmp_path, M=64), data=data)

    def test_overfits_one_batch(self, data):
        cfg = RunConfig(dataset="synthetic", M=4, K=2, N=3, jitter_p=0.0, grayscale_p=0.0)
        batch = build_training_batch([data.pixels(i) for i in range(4)], cfg, np.random.default_rng(0))
        model = build_model(EncoderConfig(), (0.5,) * 3, (0.25,) * 3, seed=0, hidden=64)
        opt = torch.optim.Adam(model.parameters(), lr=1e-3)
        history = []
        for _ in range(50):
            reps = model.encode(batch.views, batch.provenance)
            pairs = aggregate(reps, 4, 2, 3)
            lb = loss(model.relate_pairs(reps, pairs), pairs)
            opt.zero_grad()
            lb.l_total.backward()
            opt.step()
            history.append(lb.l_total.item())
        assert history[-1] < 0.2 * history[0]
