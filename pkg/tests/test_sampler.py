import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from semisupcon.errors import ConfigError
from semisupcon.sampler import (
    Clip,
    DatasetHandle,
    SamplerConfig,
    read_manifest,
    read_wav,
    sample_batch,
    select_labeled_subset,
    write_manifest,
    write_wav,
)

SR = 1000


def ramp_clip(idx, seconds=3.0, labels=None):
    # sample k of clip idx holds idx * 1e5 + k so views can be traced back
    return Clip(f"c{idx}", seconds, labels,
                synth=lambda sr, idx=idx, seconds=seconds: idx * 1e5 + np.arange(int(seconds * sr), dtype=float))


def pools(n_labeled=200, n_unlabeled=200, seconds=3.0):
    vocab = [f"p{k}" for k in range(12)]
    labeled = DatasetHandle([ramp_clip(i, seconds, frozenset({vocab[i % 12]})) for i in range(n_labeled)],
                            "labeled", vocab)
    unlabeled = DatasetHandle([ramp_clip(10_000 + i, seconds) for i in range(n_unlabeled)], "unlabeled")
    return labeled, unlabeled


def config(**kw):
    base = dict(origins_per_batch=96, views_per_origin=2, segment_seconds=0.1, sample_rate=SR)
    base.update(kw)
    return SamplerConfig(**base)


class TestSubset:
    def test_five_percent_of_thousand(self):
        labeled, _ = pools(1000, 0)
        sub = select_labeled_subset(labeled, 0.05, seed=3)
        assert len(sub) == 50
        assert sub == select_labeled_subset(labeled, 0.05, seed=3)
        assert sub != select_labeled_subset(labeled, 0.05, seed=4)

    def test_full_and_empty(self):
        labeled, _ = pools(40, 0)
        assert len(select_labeled_subset(labeled, 1.0, 0)) == 40
        assert len(select_labeled_subset(labeled, 0.0, 0)) == 0

    def test_too_small_a_share(self):
        labeled, _ = pools(10, 0)
        with pytest.raises(ConfigError):
            select_labeled_subset(labeled, 0.01, 0)


class TestBatch:
    @pytest.mark.parametrize("b_s,n_lab", [(0.5, 48), (0.0, 0), (1.0, 96), (0.25, 24)])
    def test_labeled_share(self, b_s, n_lab):
        labeled, unlabeled = pools()
        batch = sample_batch(labeled, unlabeled, config(b_s=b_s), np.random.default_rng(0))
        mask = batch.layout.labeled_mask
        assert sum(mask) == n_lab
        assert list(mask) == [True] * n_lab + [False] * (96 - n_lab)
        assert batch.layout.total_views == 192

    def test_views_are_consecutive_segments(self):
        labeled, unlabeled = pools()
        cfg = config(origins_per_batch=24, views_per_origin=8, segment_seconds=0.25)
        batch = sample_batch(labeled, unlabeled, cfg, np.random.default_rng(1))
        seg = cfg.segment_samples
        assert batch.audio.shape == (192, seg)
        for o in range(24):
            views = batch.audio[o * 8:(o + 1) * 8]
            # each view is a contiguous chunk and the next one starts where it ended
            assert np.all(np.diff(views, axis=1) == 1)
            assert np.all(views[1:, 0] == views[:-1, -1] + 1)
            assert len({int(v[0] // 1e5) for v in views}) == 1

    def test_distinct_origins(self):
        labeled, unlabeled = pools()
        batch = sample_batch(labeled, unlabeled, config(), np.random.default_rng(2))
        assert len(set(batch.origin_clip_ids)) == 96

    def test_replay_is_identical(self):
        labeled, unlabeled = pools()
        a = sample_batch(labeled, unlabeled, config(), np.random.default_rng(5))
        b = sample_batch(labeled, unlabeled, config(), np.random.default_rng(5))
        assert a.origin_clip_ids == b.origin_clip_ids
        assert np.array_equal(a.audio, b.audio)

    def test_labeled_origins_come_from_subset(self):
        labeled, unlabeled = pools(1000, 200)
        sub = select_labeled_subset(labeled, 0.05, seed=0)
        ids = {c.clip_id for c in sub.clips}
        for step in range(10):
            batch = sample_batch(sub, unlabeled, config(), np.random.default_rng(step))
            assert set(batch.origin_clip_ids[:48]) <= ids

    def test_short_clips_skipped(self, caplog):
        labeled, unlabeled = pools(20, 20)
        short = DatasetHandle(list(unlabeled.clips) + [ramp_clip(99_999, 0.05)], "unlabeled")
        cfg = config(origins_per_batch=20, b_s=0.0)
        with caplog.at_level(logging.WARNING):
            batch = sample_batch(labeled, short, cfg, np.random.default_rng(0))
        assert "c99999" not in batch.origin_clip_ids
        assert any("c99999" in r.message for r in caplog.records)

    def test_empty_pool(self):
        labeled, _ = pools(10, 0)
        empty = DatasetHandle([], "unlabeled")
        with pytest.raises(ConfigError):
            sample_batch(labeled, empty, config(b_s=0.5, origins_per_batch=4), np.random.default_rng(0))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.floats(0, 1), st.integers(2, 4), st.integers(0, 2**31))
def test_layout_invariants(n, b_s, m, seed):
    labeled, unlabeled = pools(64, 64, seconds=1.0)
    cfg = config(origins_per_batch=n, b_s=b_s, views_per_origin=m, segment_seconds=0.1)
    batch = sample_batch(labeled, unlabeled, cfg, np.random.default_rng(seed))
    lay = batch.layout
    assert lay.total_views == n * m
    assert sum(lay.labeled_mask) == cfg.n_labeled
    assert abs(cfg.n_labeled - b_s * n) < 1
    for o in range(n):
        assert list(lay.origin_of[o * m:(o + 1) * m]) == [o] * m


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ConfigError):
            SamplerConfig(b_s=1.5)
        with pytest.raises(ConfigError):
            SamplerConfig(views_per_origin=1)
        with pytest.raises(ConfigError):
            SamplerConfig(p_s=-0.1)

    def test_dataset_label_checks(self):
        with pytest.raises(ConfigError):
            DatasetHandle([Clip("a", 1.0, frozenset({"x"}))], "labeled", {"y"})
        with pytest.raises(ConfigError):
            DatasetHandle([Clip("a", 1.0, frozenset({"x"}))], "unlabeled")
        with pytest.raises(ConfigError):
            DatasetHandle([Clip("a", 1.0)], "labeled", {"x"})


class TestFiles:
    def test_wav_round_trip(self, tmp_path):
        x = 0.5 * np.sin(np.linspace(0, 40, 8000))
        write_wav(tmp_path / "a.wav", x, 8000)
        np.testing.assert_allclose(read_wav(tmp_path / "a.wav", 8000), x, atol=1e-6)
        assert read_wav(tmp_path / "a.wav", 16000).size == 16000

    def test_int16_and_stereo(self, tmp_path):
        from scipy.io import wavfile
        data = np.zeros((100, 2), dtype=np.int16)
        data[:, 0] = 16384
        wavfile.write(tmp_path / "s.wav", 1000, data)
        np.testing.assert_allclose(read_wav(tmp_path / "s.wav", 1000), 0.25, atol=1e-4)

    def test_manifest_round_trip(self, tmp_path):
        for name in ("a", "b"):
            write_wav(tmp_path / f"{name}.wav", np.zeros(2000), 1000)
        clips = [Clip("a", 2.0, frozenset({"rock"}), str(tmp_path / "a.wav")),
                 Clip("b", 2.0, None, str(tmp_path / "b.wav"))]
        write_manifest(tmp_path / "m.jsonl", clips, {"rock", "jazz"})
        lines = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
        assert lines[1]["path"] == "a.wav"
        labeled, unlabeled = read_manifest(tmp_path / "m.jsonl")
        assert [c.clip_id for c in labeled.clips] == ["a"]
        assert [c.clip_id for c in unlabeled.clips] == ["b"]
        assert labeled.vocabulary == {"rock", "jazz"}
        assert labeled.clips[0].path == str(tmp_path / "a.wav")

    def test_manifest_errors(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text(json.dumps({"path": "a.wav", "duration_seconds": 1, "labels": ["x"]}) + "\n")
        with pytest.raises(ConfigError, match="vocabulary"):
            read_manifest(p)
        p.write_text(json.dumps({"vocabulary": ["y"]}) + "\n"
                     + json.dumps({"path": "a.wav", "duration_seconds": 1, "labels": ["x"]}) + "\n")
        with pytest.raises(ConfigError, match="unknown labels"):
            read_manifest(p)
        p.write_text(json.dumps({"path": "a.wav"}) + "\n")
        with pytest.raises(ConfigError, match="missing field"):
            read_manifest(p)
