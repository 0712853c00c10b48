"""Waveform I/O, STFT/ISTFT, and log-mel spectrograms.

All audio is mono 16 kHz. Spectral transforms use centered framing with
reflection padding so frame counts are 1 + floor(len / hop), keeping the
100 Hz mel grid in a fixed 2x ratio to the 50 Hz latent grid.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DataError, NumericError

SAMPLE_RATE = 16000

# Default STFT / mel geometry (nfft = win = 640, hop = 160 at 16 kHz).
NFFT = 640
HOP = 160
WIN = 640
N_MELS = 100
FMIN = 0.0
FMAX = 8000.0
LOG_FLOOR = 1e-5


@dataclass
class Waveform:
    """Mono PCM signal in [-1, 1] at 16 kHz."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or len(self.samples) < 1:
            raise DataError("waveform must be a non-empty 1-D sample array")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite samples")
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)


@dataclass
class ComplexSpectrogram:
    """F x B complex STFT frames plus the transform geometry."""

    frames: np.ndarray
    nfft: int = NFFT
    hop: int = HOP
    win: int = WIN

    @property
    def n_bins(self):
        return self.nfft // 2 + 1


@dataclass
class MelSpectrogram:
    """F x M log-amplitude mel frames."""

    frames: np.ndarray
    n_mels: int = N_MELS
    fmin: float = FMIN
    fmax: float = FMAX


def load_wav(path) -> Waveform:
    """Read a mono 16 kHz PCM WAV file (16-bit int or 32-bit float)."""
    from scipy.io import wavfile

    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise DataError(f"cannot read WAV file {path}: {exc}") from exc
    if data.ndim != 1:
        raise DataError(f"{path}: expected mono audio, got shape {data.shape}")
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} (no resampling)")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float32)
    else:
        raise DataError(f"{path}: unsupported WAV sample format {data.dtype}")
    return Waveform(samples)


def save_wav(path, w: Waveform) -> None:
    """Write a waveform as 16-bit PCM."""
    clipped = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(w.sample_rate)
        wf.writeframes(pcm.tobytes())


def _hann(win: int) -> torch.Tensor:
    return torch.hann_window(win, periodic=True, dtype=torch.float64)


def stft_tensor(x: torch.Tensor, nfft=NFFT, hop=HOP, win=WIN) -> torch.Tensor:
    """Differentiable centered STFT; returns (..., F, B) complex frames."""
    spec = torch.stft(
        x,
        n_fft=nfft,
        hop_length=hop,
        win_length=win,
        window=_hann(win).to(x.dtype if x.dtype.is_floating_point else torch.float32),
        center=True,
        pad_mode="reflect",
        return_complex=True,
    )
    return spec.transpose(-1, -2)


def istft_tensor(spec: torch.Tensor, length: int, nfft=NFFT, hop=HOP, win=WIN) -> torch.Tensor:
    """Differentiable inverse of stft_tensor with window-sum normalization."""
    real_dtype = torch.float64 if spec.dtype == torch.complex128 else torch.float32
    return torch.istft(
        spec.transpose(-1, -2),
        n_fft=nfft,
        hop_length=hop,
        win_length=win,
        window=_hann(win).to(real_dtype),
        center=True,
        length=length,
    )


def stft(w: Waveform, nfft=NFFT, hop=HOP, win=WIN) -> ComplexSpectrogram:
    if len(w) < win:
        raise DataError(f"signal of {len(w)} samples shorter than one window ({win})")
    x = torch.from_numpy(w.samples.astype(np.float64))
    frames = stft_tensor(x, nfft, hop, win).numpy()
    return ComplexSpectrogram(frames, nfft=nfft, hop=hop, win=win)


def istft(s: ComplexSpectrogram) -> Waveform:
    frames = torch.from_numpy(np.asarray(s.frames, dtype=np.complex128))
    length = frames.shape[0] * s.hop
    # torch.istft raises on a degenerate window envelope; surface it as ours.
    try:
        x = istft_tensor(frames, length, s.nfft, s.hop, s.win)
    except RuntimeError as exc:
        raise NumericError(f"ISTFT failed (window-sum degenerate?): {exc}") from exc
    return Waveform(x.numpy().astype(np.float32))


def _hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, log above."""
    f = np.asarray(f, dtype=np.float64)
    mel = f / (200.0 / 3.0)
    log_step = np.log(6.4) / 27.0
    above = f >= 1000.0
    mel = np.where(above, 15.0 + np.log(np.maximum(f, 1000.0) / 1000.0) / log_step, mel)
    return mel


def _mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f = m * (200.0 / 3.0)
    log_step = np.log(6.4) / 27.0
    above = m >= 15.0
    return np.where(above, 1000.0 * np.exp(log_step * (m - 15.0)), f)


def mel_filterbank(n_mels=N_MELS, nfft=NFFT, fmin=FMIN, fmax=FMAX, sample_rate=SAMPLE_RATE) -> np.ndarray:
    """Triangular Slaney-mel filterbank, shape (n_mels, nfft//2 + 1)."""
    if n_mels < 1:
        raise ConfigError(f"n_mels must be >= 1, got {n_mels}")
    if fmax > sample_rate / 2:
        raise ConfigError(f"fmax {fmax} exceeds Nyquist {sample_rate / 2}")
    n_bins = nfft // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / nfft
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    hz_pts = _mel_to_hz(mel_pts)
    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / max(ctr - lo, 1e-12)
        down = (hi - fft_freqs) / max(hi - ctr, 1e-12)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_band_centers(n_mels=N_MELS, fmin=FMIN, fmax=FMAX) -> np.ndarray:
    """Center frequency (Hz) of each mel band."""
    mel_pts = np.linspace(_hz_to_mel(fmin), _hz_to_mel(fmax), n_mels + 2)
    return _mel_to_hz(mel_pts)[1:-1]


_FB_CACHE: dict[tuple, torch.Tensor] = {}


def _fb_tensor(n_mels, nfft, fmin, fmax, dtype) -> torch.Tensor:
    key = (n_mels, nfft, float(fmin), float(fmax), dtype)
    if key not in _FB_CACHE:
        fb = mel_filterbank(n_mels, nfft, fmin, fmax)
        _FB_CACHE[key] = torch.from_numpy(fb).to(dtype)
    return _FB_CACHE[key]


def mel_tensor(x: torch.Tensor, n_mels=N_MELS, fmin=FMIN, fmax=FMAX,
               nfft=NFFT, hop=HOP, win=WIN) -> torch.Tensor:
    """Differentiable log-mel spectrogram, (..., F, n_mels)."""
    spec = stft_tensor(x, nfft, hop, win)
    mag = spec.abs()
    fb = _fb_tensor(n_mels, nfft, fmin, fmax, mag.dtype)
    mel = mag @ fb.T
    return torch.log(torch.clamp(mel, min=LOG_FLOOR))


def mel_spectrogram(w: Waveform, n_mels=N_MELS, fmin=FMIN, fmax=FMAX) -> MelSpectrogram:
    if n_mels < 1:
        raise ConfigError(f"n_mels must be >= 1, got {n_mels}")
    if fmax > w.sample_rate / 2:
        raise ConfigError(f"fmax {fmax} exceeds Nyquist {w.sample_rate / 2}")
    x = torch.from_numpy(w.samples.astype(np.float64))
    frames = mel_tensor(x, n_mels, fmin, fmax).numpy()
    return MelSpectrogram(frames, n_mels=n_mels, fmin=fmin, fmax=fmax)
