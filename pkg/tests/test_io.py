import json
import struct
import wave

import numpy as np
import pytest

from galr.checkpoint import MAGIC, VERSION, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from galr.config import SCHEMA, DataSettings, RunConfig, TrainSettings, dumps, load_config, loads, save_config
from galr.errors import (
    BadMagicError,
    ConfigError,
    CorruptHeaderError,
    DirectoryMismatchError,
    PayloadLengthError,
    UnsupportedVersionError,
    WavFormatError,
)
from galr.frontend import Waveform
from galr.separator import TOY, HyperParams, SeparatorModel, count_param_tensors
from galr.wav import wav_read, wav_write

# ---------------------------------------------------------------- WAV


def test_wav_round_trip_within_one_lsb(tmp_path, rng):
    x = rng.uniform(-1, 1, 4000)
    wav_write(tmp_path / "a.wav", Waveform(x))
    back = wav_read(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    assert len(back) == 4000
    assert np.max(np.abs(back.samples - x)) <= 1 / 32768


def test_sine_has_8000_samples_and_its_peak(tmp_path):
    t = np.arange(8000) / 8000
    wav_write(tmp_path / "s.wav", 0.5 * np.sin(2 * np.pi * 440 * t))
    back = wav_read(tmp_path / "s.wav").samples
    assert len(back) == 8000
    assert np.max(np.abs(back)) == pytest.approx(0.5, abs=2e-3)


def test_write_clips_out_of_range(tmp_path):
    wav_write(tmp_path / "c.wav", np.array([2.0, -2.0, 0.0]))
    assert wav_read(tmp_path / "c.wav").samples.tolist() == [32767 / 32768, -1.0, 0.0]


def _raw_wav(path, channels=1, width=2, rate=8000, frames=10):
    with wave.open(str(path), "wb") as f:
        f.setnchannels(channels)
        f.setsampwidth(width)
        f.setframerate(rate)
        f.writeframes(b"\0" * frames * channels * width)


@pytest.mark.parametrize("kw,needle", [
    ({"channels": 2}, "channels=2"),
    ({"width": 1}, "sample_width=8bit"),
    ({"rate": 16000}, "sample_rate=16000"),
])
def test_unsupported_formats_are_named(tmp_path, kw, needle):
    _raw_wav(tmp_path / "x.wav", **kw)
    with pytest.raises(WavFormatError, match=needle):
        wav_read(tmp_path / "x.wav")


def test_garbage_is_a_format_error(tmp_path):
    (tmp_path / "g.wav").write_bytes(b"not a riff file at all")
    with pytest.raises(WavFormatError):
        wav_read(tmp_path / "g.wav")


def test_write_refuses_other_rates_and_stereo(tmp_path):
    with pytest.raises(WavFormatError):
        wav_write(tmp_path / "r.wav", Waveform(np.zeros(10), 16000))
    with pytest.raises(WavFormatError):
        wav_write(tmp_path / "r.wav", np.zeros((2, 10)))


# ---------------------------------------------------------------- checkpoints

SMALL = TOY.replace(N=1)


@pytest.fixture
def model():
    return SeparatorModel(SMALL, seed=3)


def test_save_load_separate_is_bit_identical(tmp_path, model, rng):
    x = rng.uniform(-0.5, 0.5, 8000)
    before = model.separate(x)
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.hp == model.hp
    for a, b in zip(before, loaded.separate(x)):
        assert a.tobytes() == b.tobytes()
    for (name, p), (_, q) in zip(model.params.items(), loaded.params.items()):
        assert p.data.tobytes() == q.data.tobytes(), name


def test_save_load_save_is_byte_identical(model):
    blob = to_bytes(model)
    assert to_bytes(from_bytes(blob)) == blob


def test_f64_models_round_trip(rng):
    m = SeparatorModel(SMALL, seed=1, dtype="f64")
    back = from_bytes(to_bytes(m))
    assert back.dtype == np.float64
    x = rng.uniform(-0.5, 0.5, 400)
    assert np.array_equal(np.stack(m.separate(x)), np.stack(back.separate(x)))


def _split(blob):
    _, _, hlen = struct.unpack_from("<4sIQ", blob)
    start = struct.calcsize("<4sIQ")
    return json.loads(blob[start : start + hlen]), blob[start + hlen :]


def _join(header, payload, version=VERSION):
    text = json.dumps(header).encode()
    return struct.pack("<4sIQ", MAGIC, version, len(text)) + text + payload


@pytest.mark.parametrize("hp", [SMALL, TOY, TOY.replace(global_model="recurrent", Q=0),
                                TOY.replace(local_model="attentive", Q=0)])
def test_directory_count_matches_closed_form(hp):
    header, _ = _split(to_bytes(SeparatorModel(hp)))
    assert len(header["tensors"]) == count_param_tensors(hp)


def test_offsets_are_contiguous_and_little_endian(model):
    header, payload = _split(to_bytes(model))
    offset = 0
    for entry in header["tensors"]:
        assert entry["offset"] == offset
        offset += entry["length"]
    assert offset == len(payload)
    first = header["tensors"][0]
    stored = np.frombuffer(payload[: first["length"]], dtype="<f4")
    assert np.array_equal(stored, model.params[first["name"]].data.ravel())


def test_bad_magic(model):
    blob = to_bytes(model)
    with pytest.raises(BadMagicError) as info:
        from_bytes(b"RIFF" + blob[4:])
    assert info.value.kind == "checkpoint-magic"


def test_unknown_version(model):
    header, payload = _split(to_bytes(model))
    with pytest.raises(UnsupportedVersionError):
        from_bytes(_join(header, payload, version=VERSION + 1))


def test_truncated_payload(model):
    blob = to_bytes(model)
    with pytest.raises(PayloadLengthError, match="payload length mismatch"):
        from_bytes(blob[:-4])
    with pytest.raises(PayloadLengthError, match="payload length mismatch"):
        from_bytes(blob + b"\0\0\0\0")


@pytest.mark.parametrize("cut", [6, 20])
def test_truncated_header(model, cut):
    with pytest.raises(CorruptHeaderError):
        from_bytes(to_bytes(model)[:cut])


def test_header_garbage(model):
    _, payload = _split(to_bytes(model))
    text = b"{not json"
    with pytest.raises(CorruptHeaderError):
        from_bytes(struct.pack("<4sIQ", MAGIC, VERSION, len(text)) + text + payload)
    with pytest.raises(CorruptHeaderError):
        from_bytes(_join({"dtype": "f32"}, payload))


def test_invalid_stored_hyperparams(model):
    header, payload = _split(to_bytes(model))
    header["hyperparams"]["K"] = 7
    with pytest.raises(CorruptHeaderError):
        from_bytes(_join(header, payload))


@pytest.mark.parametrize("edit", ["drop", "rename", "shape", "offset", "dtype"])
def test_directory_mismatch(model, edit):
    header, payload = _split(to_bytes(model))
    entries = header["tensors"]
    if edit == "drop":
        entries.pop()
    elif edit == "rename":
        entries[0]["name"] = "encoder.bias"
    elif edit == "shape":
        entries[0]["shape"] = entries[0]["shape"][::-1]
    elif edit == "offset":
        entries[1]["offset"] += 4
    else:
        entries[0]["dtype"] = "f64"
    with pytest.raises(DirectoryMismatchError) as info:
        from_bytes(_join(header, payload))
    assert info.value.kind == "checkpoint-directory"


def test_error_kinds_are_distinct():
    kinds = {e.kind for e in (BadMagicError, UnsupportedVersionError, CorruptHeaderError,
                              DirectoryMismatchError, PayloadLengthError)}
    assert len(kinds) == 5


# ---------------------------------------------------------------- config


def test_defaults_are_the_lightest_galr_row():
    hp = RunConfig().hyperparams
    assert (hp.D, hp.M, hp.K, hp.Q, hp.H, hp.J, hp.N, hp.C) == (64, 16, 100, 32, 128, 8, 6, 2)


def test_parse_serialize_parse_is_idempotent(tmp_path):
    cfg = RunConfig(TOY, TrainSettings(epochs=3, lr=5e-4, max_seconds=60.0), DataSettings(train_count=8))
    text = dumps(cfg)
    assert loads(text) == cfg
    assert dumps(loads(text)) == text
    save_config(cfg, tmp_path / "c.json")
    assert load_config(tmp_path / "c.json") == cfg


def test_partial_config_fills_defaults():
    cfg = loads('{"training": {"epochs": 2}}')
    assert cfg.training.epochs == 2
    assert cfg.hyperparams == HyperParams()


@pytest.mark.parametrize("text,needle", [
    ('{"training": {"epochs": 0}}', "training/epochs"),
    ('{"hyperparams": {"D": "64"}}', "hyperparams/D"),
    ('{"data": {"kind": "speech"}}', "data/kind"),
    ('{"extra": 1}', "<root>"),
    ('{"hyperparams": {"K": 7}}', "K=7"),
    ('{"data": {"snr_low": 5, "snr_high": 0}}', "snr_low"),
    ("[1, 2", "not valid JSON"),
])
def test_invalid_configs_are_rejected(text, needle):
    with pytest.raises(ConfigError, match=needle):
        loads(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "absent.json")


def test_schema_covers_every_setting():
    props = SCHEMA["properties"]
    assert set(props["training"]["properties"]) == set(TrainSettings.__dataclass_fields__)
    assert set(props["data"]["properties"]) == set(DataSettings.__dataclass_fields__)
    assert set(props["hyperparams"]["properties"]) == set(HyperParams.__dataclass_fields__)
