"""8 kHz mono PCM16 WAV codec on top of the stdlib ``wave`` module."""

from __future__ import annotations

import wave

import numpy as np

from .errors import WavFormatError
from .frontend import SAMPLE_RATE, Waveform

SCALE = 32768.0


def wav_read(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, count = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            comp = f.getcomptype()
            raw = f.readframes(count)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: not a PCM RIFF/WAVE file ({exc})") from None
    problems = []
    if comp != "NONE":
        problems.append(f"compression={comp}")
    if channels != 1:
        problems.append(f"channels={channels}")
    if width != 2:
        problems.append(f"sample_width={8 * width}bit")
    if rate != SAMPLE_RATE:
        problems.append(f"sample_rate={rate}")
    if problems:
        raise WavFormatError(f"{path}: unsupported {', '.join(problems)}; need mono 16-bit PCM at {SAMPLE_RATE} Hz")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / SCALE
    return Waveform(samples, rate)


def wav_write(path, waveform) -> None:
    """Quantize to PCM16 (round to nearest, clip to the representable range)."""
    samples = np.asarray(getattr(waveform, "samples", waveform), dtype=np.float64)
    rate = getattr(waveform, "sample_rate", SAMPLE_RATE)
    if samples.ndim != 1:
        raise WavFormatError(f"only mono audio is written, got shape {samples.shape}")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"sample_rate={rate}; only {SAMPLE_RATE} Hz is supported")
    if not np.all(np.isfinite(samples)):
        raise WavFormatError("waveform contains non-finite samples")
    pcm = np.clip(np.round(samples * SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(rate)
        f.writeframes(pcm.tobytes())
