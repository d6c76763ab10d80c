import dataclasses
import json

import numpy as np
import pytest

from semisupcon.augment import default_chain
from semisupcon.errors import ConfigError, NonFiniteError
from semisupcon.model import EncoderConfig
from semisupcon.nn import Adam
from semisupcon.sampler import SamplerConfig, sample_batch
from semisupcon.synthetic import SyntheticDatasetSpec, generate_synthetic_dataset
from semisupcon.targets import build_self_supervised_targets
from semisupcon.train import Checkpoint, TrainConfig, checkpoint_of, pretrain, train_step

SR = 4000
TINY = SyntheticDatasetSpec(n_clips=40, clip_seconds=0.5, sample_rate=SR,
                            fundamentals=(110.0, 220.0, 330.0, 440.0), noise_floor=0.01,
                            labeled_fraction=0.5, name="tiny")


def tiny_config(steps=10, **kw):
    base = dict(
        steps=steps, learning_rate=1e-3, tau=0.1,
        sampler=SamplerConfig(p_s=1.0, b_s=0.5, origins_per_batch=4, views_per_origin=2,
                              segment_seconds=0.1, sample_rate=SR),
        chain=default_chain(),
        encoder=EncoderConfig("frames", d_embed=8, d_proj=4, hidden=8, frame_length=64, hop=32),
        seed=3,
    )
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic_dataset(TINY)


class TestConfig:
    def test_round_trip(self):
        cfg = tiny_config(target_mode="weighted", criterion=2)
        again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg and again.digest() == cfg.digest()

    def test_rejects_unknown_fields(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"stepz": 3})
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"sampler": {"bs": 0.5}})

    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            TrainConfig(tau=0)
        with pytest.raises(ConfigError):
            TrainConfig(target_mode="soft")

    def test_sampler_follows_seed(self):
        assert tiny_config(seed=9).sampler.seed == 9


class TestCheckpoint:
    def test_round_trip_is_bit_identical(self, data, tmp_path):
        ckpt = pretrain(tiny_config(5), *data)
        ckpt.save(tmp_path / "c.bin")
        back = Checkpoint.load(tmp_path / "c.bin")
        assert back.digest() == ckpt.digest()
        assert back.step == 5 and back.adam_t == 5
        for name in ckpt.params:
            assert np.array_equal(back.params[name], ckpt.params[name])

    def test_file_layout(self, data, tmp_path):
        ckpt = pretrain(tiny_config(0), *data)
        ckpt.save(tmp_path / "c.bin")
        raw = (tmp_path / "c.bin").read_bytes()
        assert raw[:8] == b"SSCKPT\0\0"
        assert raw[12:44].hex() == tiny_config(0).digest()

    def test_corruption_detected(self, data, tmp_path):
        ckpt = pretrain(tiny_config(0), *data)
        ckpt.save(tmp_path / "c.bin")
        raw = bytearray((tmp_path / "c.bin").read_bytes())
        raw[12] ^= 0xFF
        (tmp_path / "bad.bin").write_bytes(bytes(raw))
        with pytest.raises(ConfigError, match="digest"):
            Checkpoint.load(tmp_path / "bad.bin")
        (tmp_path / "junk.bin").write_bytes(b"not a checkpoint")
        with pytest.raises(ConfigError):
            Checkpoint.load(tmp_path / "junk.bin")

    def test_zero_steps_is_initialisation(self, data):
        a, b = pretrain(tiny_config(0), *data), pretrain(tiny_config(0), *data)
        assert a.step == 0 and a.adam_t == 0 and a.digest() == b.digest()


class TestPretrain:
    def test_deterministic(self, data):
        assert pretrain(tiny_config(8), *data).digest() == pretrain(tiny_config(8), *data).digest()

    def test_seed_matters(self, data):
        assert pretrain(tiny_config(3), *data).digest() != pretrain(tiny_config(3, seed=4), *data).digest()

    def test_resume_matches_uninterrupted(self, data, tmp_path):
        full = pretrain(tiny_config(100), *data)
        pretrain(tiny_config(50), *data, out_dir=tmp_path)
        resumed = pretrain(tiny_config(100), *data, out_dir=tmp_path,
                           resume=Checkpoint.load(tmp_path / "final.bin"))
        assert resumed.step == 100
        for name in full.params:
            assert np.array_equal(resumed.params[name], full.params[name])
        steps = [json.loads(l)["step"] for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert steps == list(range(100))

    def test_log_and_periodic_checkpoints(self, data, tmp_path):
        pretrain(tiny_config(6, checkpoint_every=3), *data, out_dir=tmp_path)
        records = [json.loads(l) for l in (tmp_path / "train_log.jsonl").read_text().splitlines()]
        assert [r["step"] for r in records] == list(range(6))
        assert set(records[0]) == {"step", "loss", "s_sl", "s_smssl"}
        assert (tmp_path / "ckpt_0000003.bin").exists() and (tmp_path / "ckpt_0000006.bin").exists()
        assert Checkpoint.load(tmp_path / "ckpt_0000006.bin").digest() == \
            Checkpoint.load(tmp_path / "final.bin").digest()

    def test_unsupervised_run_sees_only_sibling_targets(self, data):
        cfg = tiny_config(5, sampler=dataclasses.replace(tiny_config().sampler, p_s=0.0, b_s=0.0))
        seen = []

        def check(step, batch, target, result):
            assert np.array_equal(target.entries, build_self_supervised_targets(batch.layout).entries)
            assert result.s_sl is None
            seen.append(step)

        pretrain(cfg, *data, on_step=check)
        assert seen == list(range(5))

    def test_labeled_share_without_labels_is_rejected(self, data):
        cfg = tiny_config(1, sampler=dataclasses.replace(tiny_config().sampler, p_s=0.0, b_s=0.5))
        with pytest.raises(ConfigError):
            pretrain(cfg, *data)


class TestStep:
    def test_repeated_batch_loss_decreases(self, data):
        cfg = tiny_config(learning_rate=1e-3, augment=False)
        ckpt = pretrain(dataclasses.replace(cfg, steps=0), *data)
        model, opt = ckpt.model(), Adam(lr=1e-3)
        labeled, unlabeled = data
        batch = sample_batch(labeled, unlabeled, cfg.sampler, np.random.default_rng(0))
        losses = [train_step(model, opt, batch, cfg).loss for _ in range(200)]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])
        assert losses[-1] < losses[0]

    def test_zero_learning_rate(self, data):
        cfg = tiny_config(augment=False)
        ckpt = pretrain(dataclasses.replace(cfg, steps=0), *data)
        model = ckpt.model()
        before = model.digest()
        batch = sample_batch(*data, cfg.sampler, np.random.default_rng(0))
        result = train_step(model, Adam(lr=0.0), batch, cfg)
        assert np.isfinite(result.loss) and model.digest() == before

    def test_non_finite_gradient_is_reported(self, data, monkeypatch):
        import semisupcon.train as train_module
        real = train_module.semi_supervised_loss

        def poisoned(z, target, tau):
            res = real(z, target, tau)
            res.gradient[0, 0] = np.nan
            return res

        monkeypatch.setattr(train_module, "semi_supervised_loss", poisoned)
        cfg = tiny_config(augment=False)
        model = pretrain(dataclasses.replace(cfg, steps=0), *data).model()
        opt = Adam(lr=1e-3)
        batch = sample_batch(*data, cfg.sampler, np.random.default_rng(0))
        before = checkpoint_of(model, opt, cfg, 0).digest()
        with pytest.raises(NonFiniteError, match=batch.origin_clip_ids[0]):
            train_step(model, opt, batch, cfg)
        assert checkpoint_of(model, opt, cfg, 0).digest() == before

    def test_overflowing_activations_are_reported(self, data):
        cfg = tiny_config(augment=False)
        model = pretrain(dataclasses.replace(cfg, steps=0), *data).model()
        model.params["projector.fc2.W"][:] = np.inf
        batch = sample_batch(*data, cfg.sampler, np.random.default_rng(0))
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(NonFiniteError, match="layer"):
                train_step(model, Adam(lr=1e-3), batch, cfg)
