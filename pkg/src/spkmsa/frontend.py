"""Acoustic frontend: log-Mel features, sliding mean normalization, energy VAD.

Frames are 25 ms with a 10 ms shift by default, Hamming-windowed, and pushed
through a 64-filter triangular Mel bank spanning 20 Hz to Nyquist. Energies
are floored before the log so digital silence maps to a fixed constant.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, replace

import numpy as np

N_MELS = 64
FRAME_LENGTH_MS = 25.0
LMFB_MAGIC = b"LMFB"
LMFB_VERSION = 1


class AudioError(ValueError):
    """Waveform or feature input violates the frontend contract."""


@dataclass
class AcousticFeatures:
    """Log-Mel matrix of shape [64, T] with frame metadata."""

    mels: np.ndarray
    frame_shift_ms: float
    frame_length_ms: float = FRAME_LENGTH_MS
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if self.mels.ndim != 2 or self.mels.shape[0] != N_MELS:
            raise AudioError(f"features must be [{N_MELS}, T], got {self.mels.shape}")
        if self.mels.shape[1] < 1:
            raise AudioError("features must contain at least one frame")
        if not np.all(np.isfinite(self.mels)):
            raise AudioError("features contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.mels.shape[1]

    @property
    def frames_per_second(self) -> float:
        return 1000.0 / self.frame_shift_ms


@dataclass
class VadMask:
    """Per-frame speech flags aligned with feature columns."""

    flags: np.ndarray

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=bool)
        if self.flags.ndim != 1:
            raise AudioError("VAD mask must be one-dimensional")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, fmin_hz: float, fmax_hz: float) -> np.ndarray:
    """Center frequency of each triangular filter, in Hz."""
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int,
                   fmin_hz: float = 20.0, fmax_hz: float | None = None) -> np.ndarray:
    """Triangular filters over FFT bins, peak-normalized to 1."""
    if fmax_hz is None:
        fmax_hz = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin_hz), hz_to_mel(fmax_hz), n_mels + 2))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    bank = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / max(center - lo, 1e-12)
        falling = (hi - freqs) / max(hi - center, 1e-12)
        bank[m] = np.clip(np.minimum(rising, falling), 0.0, None)
    return bank


def compute_logmel(pcm: np.ndarray, sample_rate: int, frame_shift_ms: float = 10.0,
                   n_fft: int = 512, fmin_hz: float = 20.0,
                   log_floor: float = 1e-10) -> AcousticFeatures:
    """64-dim log-Mel features from a mono waveform.

    T = 1 + floor((len - frame_length)/frame_shift); raises AudioError for
    waveforms shorter than one frame or sample rates below 8 kHz. The FFT
    grows to the next power of two when a frame exceeds ``n_fft`` samples.
    """
    if sample_rate < 8000:
        raise AudioError(f"sample rate {sample_rate} below 8 kHz")
    pcm = np.asarray(pcm, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(pcm)):
        raise AudioError("waveform contains non-finite samples")
    frame_len = int(round(FRAME_LENGTH_MS * sample_rate / 1000.0))
    shift = int(round(frame_shift_ms * sample_rate / 1000.0))
    if pcm.size < frame_len:
        raise AudioError(f"waveform of {pcm.size} samples shorter than one {frame_len}-sample frame")
    while n_fft < frame_len:
        n_fft *= 2

    num_frames = 1 + (pcm.size - frame_len) // shift
    idx = np.arange(frame_len)[None, :] + shift * np.arange(num_frames)[:, None]
    frames = pcm[idx] * np.hamming(frame_len)[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    bank = mel_filterbank(N_MELS, n_fft, sample_rate, fmin_hz)
    energies = power @ bank.T
    mels = np.log(np.maximum(energies, log_floor)).T
    return AcousticFeatures(mels=mels, frame_shift_ms=frame_shift_ms,
                            sample_rate_hz=sample_rate)


def mean_normalize_sliding(feats: AcousticFeatures, window_s: float = 3.0) -> AcousticFeatures:
    """Subtract the per-bin mean of a centered window of up to ``window_s``.

    The window is clipped at the utterance edges, so short utterances reduce
    to global per-bin mean subtraction.
    """
    mels = feats.mels
    t = mels.shape[1]
    half = int(round(window_s * feats.frames_per_second)) // 2
    csum = np.cumsum(np.pad(mels, ((0, 0), (1, 0))), axis=1)
    lo = np.maximum(np.arange(t) - half, 0)
    hi = np.minimum(np.arange(t) + half + 1, t)
    means = (csum[:, hi] - csum[:, lo]) / (hi - lo)
    return replace(feats, mels=mels - means)


def frame_energy_db(feats: AcousticFeatures) -> np.ndarray:
    """Per-frame total energy in dB, recovered from the log-Mel bins."""
    linear = np.exp(feats.mels).sum(axis=0)
    return 10.0 * np.log10(np.maximum(linear, 1e-30))


def compute_vad_mask(feats: AcousticFeatures, threshold_db: float = 40.0,
                     floor_db: float = -60.0) -> VadMask:
    """Energy VAD: speech iff within ``threshold_db`` of the loudest frame
    and above an absolute floor."""
    e = frame_energy_db(feats)
    return VadMask(flags=(e > e.max() - threshold_db) & (e > floor_db))


def energy_vad_trim(feats: AcousticFeatures, target_duration_s,
                    mask: VadMask | None = None,
                    threshold_db: float = 40.0, floor_db: float = -60.0) -> AcousticFeatures:
    """Keep the first ``target_duration_s`` worth of speech frames.

    Frame order is preserved and non-speech frames are dropped. When the
    utterance holds fewer speech frames than requested (or the VAD marks
    nothing), the features are returned untrimmed. ``"full"`` or None skips
    trimming entirely.
    """
    if target_duration_s in (None, "full"):
        return feats
    target_duration_s = float(target_duration_s)
    if mask is None:
        mask = compute_vad_mask(feats, threshold_db, floor_db)
    if mask.flags.size != feats.num_frames:
        raise AudioError(f"VAD mask length {mask.flags.size} != {feats.num_frames} frames")
    n = int(round(target_duration_s * feats.frames_per_second))
    speech = np.flatnonzero(mask.flags)
    if speech.size == 0 or speech.size < n:
        return feats
    return replace(feats, mels=feats.mels[:, speech[:n]])


# -- file formats ------------------------------------------------------------------


def write_lmfb(path, feats: AcousticFeatures) -> None:
    """Binary feature file: LMFB magic, version, dims, then bin-major f32."""
    with open(path, "wb") as fh:
        fh.write(LMFB_MAGIC)
        fh.write(struct.pack("<IIIf", LMFB_VERSION, feats.mels.shape[0],
                             feats.mels.shape[1], float(feats.frame_shift_ms)))
        fh.write(np.ascontiguousarray(feats.mels, dtype="<f4").tobytes())


def read_lmfb(path) -> AcousticFeatures:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != LMFB_MAGIC:
            raise AudioError(f"{path}: bad magic {magic!r}")
        version, n_mels, n_frames, shift = struct.unpack("<IIIf", fh.read(16))
        if version != LMFB_VERSION:
            raise AudioError(f"{path}: unsupported version {version}")
        raw = fh.read(4 * n_mels * n_frames)
        if len(raw) != 4 * n_mels * n_frames:
            raise AudioError(f"{path}: truncated payload")
        mels = np.frombuffer(raw, dtype="<f4").reshape(n_mels, n_frames).astype(np.float64)
    return AcousticFeatures(mels=mels, frame_shift_ms=shift)


def read_wav_mono(path) -> tuple:
    """Returns (float64 samples in [-1, 1], sample_rate) from 16-bit PCM WAV."""
    with wave.open(str(path), "rb") as wf:
        if wf.getsampwidth() != 2:
            raise AudioError(f"{path}: expected 16-bit PCM, got {8 * wf.getsampwidth()}-bit")
        if wf.getnchannels() != 1:
            raise AudioError(f"{path}: expected mono, got {wf.getnchannels()} channels")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return samples, rate


def write_wav_mono(path, samples: np.ndarray, sample_rate: int) -> None:
    scaled = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    ints = np.round(scaled * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(ints.tobytes())
