import numpy as np
import pytest
from scipy.io import wavfile

from asdkit.corpus import (
    AudioClip,
    CorpusManifest,
    SyntheticSpec,
    attribute_f0,
    format_filename,
    generate_synthetic,
    load_corpus,
    parse_filename,
    write_corpus,
)
from asdkit.errors import CorpusIOError, EmptyCorpus, MalformedName, UsageError


def test_parse_attribute_tokens():
    c = parse_filename("fan/section_00_source_train_normal_0001_vel_6.wav")
    assert (c.machine, c.domain, c.split, c.condition) == ("fan", "source", "train", "normal")
    assert c.attribute == "vel_6"
    assert c.index == 1 and c.section == "00"


def test_parse_without_attribute():
    c = parse_filename("valve/section_00_target_test_anomaly_0042.wav")
    assert (c.domain, c.split, c.condition, c.attribute) == ("target", "test", "anomaly", None)


@pytest.mark.parametrize("name", [
    "fan/section_00_middle_train_normal_0001.wav",
    "fan/section_00_source_dev_normal_0001.wav",
    "fan/section_00_source_test_broken_0001.wav",
    "fan/section_00_source_train_normal.wav",
    "fan/section_xx_source_train_normal_0001.wav",
    "fan/section_00_source_train_normal_0001.flac",
    "section_00_source_train_normal_0001.wav",
])
def test_parse_rejects(name):
    with pytest.raises(MalformedName):
        parse_filename(name)


def test_parse_skips_split_directory():
    c = parse_filename("data/ToyCar/train/section_00_source_train_normal_0003_car_A1.wav")
    assert c.machine == "ToyCar" and c.attribute == "car_A1"


def test_train_clip_must_be_normal():
    with pytest.raises(MalformedName):
        AudioClip("x", "fan", "00", "source", "train", "anomaly")


def test_format_parse_round_trip():
    rng = np.random.default_rng(0)
    for _ in range(200):
        split = rng.choice(["train", "test"])
        cond = "normal" if split == "train" else rng.choice(["normal", "anomaly", "unknown"])
        attr = rng.choice([None, "vel_6", "a", "noise_1_speed_3"])
        clip = AudioClip("", f"m{rng.integers(5)}", f"{rng.integers(100):02d}", rng.choice(["source", "target"]),
                         split, cond, int(rng.integers(10000)), attr)
        back = parse_filename(format_filename(clip))
        for f in ("machine", "section", "domain", "split", "condition", "index", "attribute"):
            assert getattr(back, f) == getattr(clip, f)


def test_manifest_rejects_duplicates():
    c = parse_filename("fan/section_00_source_train_normal_0001.wav")
    with pytest.raises(UsageError):
        CorpusManifest([c, c.descriptor()])


def test_synthetic_counts():
    man = generate_synthetic(SyntheticSpec(machines=2, attributes_per_machine=3, clips_per_attribute=20, seed=7))
    assert len(man.select(split="train")) == 120
    assert man.machines == ["machine00", "machine01"]
    assert {c.attribute for c in man} == {"attr_0", "attr_1", "attr_2"}


def test_synthetic_deterministic():
    spec = SyntheticSpec(machines=2, attributes_per_machine=3, clips_per_attribute=20, seed=7)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert [c.clip_id for c in a] == [c.clip_id for c in b]
    assert all(x.samples.tobytes() == y.samples.tobytes() for x, y in zip(a, b))
    c = generate_synthetic(SyntheticSpec(machines=2, attributes_per_machine=3, clips_per_attribute=20, seed=8))
    assert any(x.samples.tobytes() != y.samples.tobytes() for x, y in zip(a, c))


def test_synthetic_layout():
    spec = SyntheticSpec(machines=1, clips_per_attribute=2, target_train_clips=3, test_normal_per_domain=4,
                         test_anomaly_per_machine=6)
    man = generate_synthetic(spec)
    counts = man.counts()
    assert counts[("machine00", "source", "train")] == 6
    assert counts[("machine00", "target", "train")] == 3
    assert counts[("machine00", "source", "test")] == 4 + 3
    assert counts[("machine00", "target", "test")] == 4 + 3
    assert {c.attribute for c in man.select(domain="target")} == {"attr_3"}


def _peak_hz(x):
    # Hann window plus 8x zero padding keeps scalloping far below the harmonic level differences
    n = 8 * len(x)
    mag = np.abs(np.fft.rfft(x * np.hanning(len(x)), n))
    return np.argmax(mag) * 16000 / n


@pytest.mark.parametrize("shift", [1.12, 1.3])
def test_pitch_shift_moves_spectral_peak(shift):
    spec = SyntheticSpec(machines=1, clips_per_attribute=1, test_normal_per_domain=3, test_anomaly_per_machine=6,
                         anomaly_shift=shift, f0_jitter=0.0, timbre_jitter=0.0, noise_level_db=-40, duration_s=2.0)
    man = generate_synthetic(spec)
    for attr in ("attr_0", "attr_1", "attr_2"):
        normal = man.select(split="test", condition="normal", domain="source", attribute=attr)[0]
        anomaly = man.select(split="test", condition="anomaly", domain="source", attribute=attr)[0]
        ratio = _peak_hz(anomaly.samples) / _peak_hz(normal.samples)
        assert ratio == pytest.approx(shift, rel=0.01)
        f0 = attribute_f0(spec, 0, int(attr[-1]))
        assert _peak_hz(normal.samples) / f0 == pytest.approx(round(_peak_hz(normal.samples) / f0), abs=0.01)


def test_transient_bursts_raise_peak_level():
    spec = SyntheticSpec(machines=1, clips_per_attribute=1, test_normal_per_domain=2, test_anomaly_per_machine=2,
                         anomaly_kind="transient_burst")
    man = generate_synthetic(spec)
    normal = man.select(split="test", condition="normal")[0].samples
    anomaly = man.select(split="test", condition="anomaly")[0].samples
    assert np.abs(anomaly).max() > 1.5 * np.abs(normal).max()


def test_invalid_spec():
    with pytest.raises(UsageError):
        SyntheticSpec(attributes_per_machine=0)
    with pytest.raises(UsageError):
        SyntheticSpec(anomaly_kind="hum")


def test_load_three_files(tmp_path):
    x = (0.1 * np.sin(np.arange(16000) / 10)).astype(np.float32)
    for i in range(3):
        (tmp_path / "fan").mkdir(exist_ok=True)
        wavfile.write(tmp_path / "fan" / f"section_00_source_train_normal_{i:04d}_vel_{i}.wav", 16000, x)
    man = load_corpus(tmp_path)
    assert len(man) == 3
    assert [c.clip_id for c in man] == sorted(c.clip_id for c in man)
    assert man.clips[0].samples.dtype == np.float32


def test_load_int16(tmp_path):
    (tmp_path / "pump").mkdir()
    wavfile.write(tmp_path / "pump" / "section_01_target_test_unknown_0000.wav", 16000,
                  np.full(16000, 16384, dtype=np.int16))
    clip = load_corpus(tmp_path).clips[0]
    assert clip.samples[0] == pytest.approx(0.5)
    assert clip.condition == "unknown"


def test_load_empty(tmp_path):
    with pytest.raises(EmptyCorpus):
        load_corpus(tmp_path)


def test_load_reports_corrupt_file(tmp_path):
    (tmp_path / "fan").mkdir()
    for i in range(9):
        wavfile.write(tmp_path / "fan" / f"section_00_source_train_normal_{i:04d}.wav", 16000,
                      np.zeros(16000, dtype=np.float32))
    bad = tmp_path / "fan" / "section_00_source_train_normal_0009.wav"
    bad.write_bytes(b"RIFF\x00\x00garbage")
    with pytest.raises(CorpusIOError, match="normal_0009"):
        load_corpus(tmp_path)


def test_load_rejects_wrong_rate(tmp_path):
    (tmp_path / "fan").mkdir()
    wavfile.write(tmp_path / "fan" / "section_00_source_train_normal_0000.wav", 44100, np.zeros(100, np.float32))
    with pytest.raises(CorpusIOError, match="44100"):
        load_corpus(tmp_path)


def test_write_load_round_trip(tmp_path):
    man = generate_synthetic(SyntheticSpec(machines=2, attributes_per_machine=2, clips_per_attribute=2,
                                           test_normal_per_domain=1, test_anomaly_per_machine=2))
    write_corpus(man, tmp_path)
    back = load_corpus(tmp_path)
    assert [c.clip_id for c in back] == [c.clip_id for c in man]
    for a, b in zip(man, back):
        assert a.attribute == b.attribute and a.condition == b.condition
        np.testing.assert_array_equal(a.samples, b.samples)


def test_manifest_csv(tmp_path):
    man = generate_synthetic(SyntheticSpec(machines=1, attributes_per_machine=1, clips_per_attribute=2))
    man.to_csv(tmp_path / "m.csv", {"config_hash": "abc"})
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "clip_id,machine,section,domain,split,condition,attribute,config_hash"
    assert len(lines) == 3 and lines[1].endswith(",abc")
