import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from headcount import datasynth as DS


def tiny_cfg(tmp_path, **overrides):
    base = dict(out_dir=str(tmp_path / "data"), seed=77, sample_rate=8000,
                segment_seconds=1.0, train_per_class=3, val_per_class=2,
                test_per_class=2, train_speakers=8, test_speakers=7)
    base.update(overrides)
    return DS.DatasetConfig(**base)


class TestVoice:
    def test_f0_range_enforced(self):
        with pytest.raises(ValueError, match="85"):
            DS.VoiceSpec(f0_hz=60.0)
        with pytest.raises(ValueError, match="85"):
            DS.VoiceSpec(f0_hz=300.0)

    def test_deterministic_under_seed(self):
        spec = DS.VoiceSpec(f0_hz=120.0)
        a = DS.synth_speaker_signal(spec, 1.0, 8000, np.random.default_rng(5))
        b = DS.synth_speaker_signal(spec, 1.0, 8000, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_full_pause_density_is_silence(self):
        spec = DS.VoiceSpec(f0_hz=120.0, pause_density=1.0)
        y = DS.synth_speaker_signal(spec, 1.0, 8000, np.random.default_rng(0))
        assert np.array_equal(y, np.zeros_like(y))

    def test_bounded_and_active(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            spec = DS.sample_voice(rng)
            y = DS.synth_speaker_signal(spec, 1.0, 8000, rng)
            assert np.max(np.abs(y)) <= 1.0
            assert DS.activity_fraction(y, 8000) >= 0.5

    def test_spectral_peak_at_f0(self):
        rng = np.random.default_rng(9)
        for f0 in (90.0, 147.0, 233.0):
            spec = DS.VoiceSpec(f0_hz=f0, rolloff=0.7, mod_depth=0.0,
                                pause_density=0.0, jitter=0.0)
            y = DS.synth_speaker_signal(spec, 2.0, 8000, rng)
            mags = np.abs(np.fft.rfft(y.astype(np.float64)))
            freqs = np.fft.rfftfreq(len(y), 1 / 8000)
            assert abs(freqs[int(np.argmax(mags))] - f0) <= 3.0


class TestMixture:
    def make_sources(self, k, n=12000):
        rng = np.random.default_rng(1)
        return [DS.synth_speaker_signal(DS.sample_voice(rng), n / 8000, 8000, rng)
                for _ in range(k)]

    def test_three_speakers_label_three(self):
        ex = DS.make_mixture(self.make_sources(3), None, 3,
                             np.random.default_rng(0), 8000, 8000)
        assert ex.label == 3
        assert ex.true_speaker_count == 3

    def test_seven_speakers_label_five(self):
        ex = DS.make_mixture(self.make_sources(7), None, 7,
                             np.random.default_rng(0), 8000, 8000)
        assert ex.label == 5
        assert ex.true_speaker_count == 7

    def test_zero_speakers_needs_noise(self):
        rng = np.random.default_rng(2)
        noise = DS.synth_noise(1.5, 8000, rng)
        ex = DS.make_mixture([], noise, 0, rng, 8000, 8000)
        assert ex.label == 0
        with pytest.raises(ValueError, match="noise"):
            DS.make_mixture([], None, 0, rng, 8000, 8000)

    def test_peak_normalized(self):
        ex = DS.make_mixture(self.make_sources(2), None, 2,
                             np.random.default_rng(4), 8000, 8000)
        assert np.max(np.abs(ex.samples)) == pytest.approx(DS.PEAK_LEVEL, abs=1e-6)

    def test_short_source_rejected(self):
        with pytest.raises(ValueError, match="shorter than the segment"):
            DS.make_mixture([np.zeros(100, dtype=np.float32)], None, 1,
                            np.random.default_rng(0), 8000, 8000)


class TestWavIO:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        samples = (rng.uniform(-0.9, 0.9, 4000)).astype(np.float32)
        path = tmp_path / "x.wav"
        DS.write_wav(path, samples, 8000)
        back, rate = DS.read_wav(path)
        assert rate == 8000
        assert np.max(np.abs(back - samples)) < 1.0 / 32000


class TestBuildDataset:
    def test_properties(self, tmp_path):
        cfg = tiny_cfg(tmp_path)
        manifests = DS.build_dataset(cfg)
        assert set(manifests) == {"train", "val", "test"}
        root = Path(cfg.out_dir)

        meta = json.loads((root / "dataset_meta.json").read_text())
        assert not set(meta["speakers"]["train"]) & set(meta["speakers"]["test"])

        for split, per_class in cfg.counts().items():
            m = manifests[split]
            counts = {}
            for e in m.entries:
                counts[e.label] = counts.get(e.label, 0) + 1
                assert e.label == min(e.speakers, 5)
                samples, rate = DS.read_wav(root / e.path)
                assert rate == cfg.sample_rate
                assert len(samples) == 8000
                assert np.max(np.abs(samples)) <= DS.PEAK_LEVEL + 1e-9
            assert set(counts) == set(range(6))
            assert max(counts.values()) - min(counts.values()) <= 1

    def test_byte_identical_rebuild(self, tmp_path):
        cfg_a = tiny_cfg(tmp_path / "a", train_per_class=2, val_per_class=0,
                         test_per_class=1)
        cfg_b = tiny_cfg(tmp_path / "b", train_per_class=2, val_per_class=0,
                         test_per_class=1)
        DS.build_dataset(cfg_a)
        DS.build_dataset(cfg_b)

        def digest(root):
            out = {}
            for p in sorted(Path(root).rglob("*")):
                if p.is_file():
                    out[str(p.relative_to(root))] = hashlib.sha256(
                        p.read_bytes()).hexdigest()
            return out

        assert digest(cfg_a.out_dir) == digest(cfg_b.out_dir)

    def test_load_split(self, tmp_path):
        cfg = tiny_cfg(tmp_path, train_per_class=2, val_per_class=0, test_per_class=1)
        DS.build_dataset(cfg)
        x, y = DS.load_split(cfg.out_dir, "train")
        assert x.shape == (12, 8000)
        assert x.dtype == np.float32
        assert sorted(set(y)) == list(range(6))

    def test_insufficient_speakers(self, tmp_path):
        cfg = tiny_cfg(tmp_path, test_speakers=4)
        with pytest.raises(ValueError, match="insufficient distinct sources"):
            DS.build_dataset(cfg)

    def test_wav_pool_ingestion(self, tmp_path):
        pool_dir = tmp_path / "pool"
        pool_dir.mkdir()
        rng = np.random.default_rng(8)
        for i in range(15):
            f0 = 100 + 10 * i
            t = np.arange(16000) / 8000
            DS.write_wav(pool_dir / f"spk{i:02d}.wav",
                         0.5 * np.sin(2 * np.pi * f0 * t) * rng.uniform(0.5, 1.0),
                         8000)
        cfg = tiny_cfg(tmp_path, source_dir=str(pool_dir), train_per_class=2,
                       val_per_class=0, test_per_class=1, train_speakers=8,
                       test_speakers=7)
        manifests = DS.build_dataset(cfg)
        assert len(manifests["train"].entries) == 12
        meta = json.loads((Path(cfg.out_dir) / "dataset_meta.json").read_text())
        assert meta["speakers"]["train"] == [f"spk{i:02d}" for i in range(8)]
        assert not set(meta["speakers"]["train"]) & set(meta["speakers"]["test"])

    def test_wav_pool_insufficient_files(self, tmp_path):
        pool_dir = tmp_path / "pool"
        pool_dir.mkdir()
        DS.write_wav(pool_dir / "only.wav", np.zeros(16000), 8000)
        cfg = tiny_cfg(tmp_path, source_dir=str(pool_dir))
        with pytest.raises(ValueError, match="insufficient distinct sources"):
            DS.build_dataset(cfg)

    def test_manifest_roundtrip(self, tmp_path):
        cfg = tiny_cfg(tmp_path, train_per_class=1, val_per_class=0, test_per_class=1)
        manifests = DS.build_dataset(cfg)
        back = DS.read_manifest(Path(cfg.out_dir) / "manifest_train.csv", "train")
        assert back.entries == manifests["train"].entries
