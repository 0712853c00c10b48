"""Short-time objective intelligibility (STOI).

Classic procedure: resample to 10 kHz, remove silent frames (40 dB below
the loudest clean frame), take 1/3-octave band envelopes of a 256-sample
Hann STFT, and average clipped short-time band correlations over 384 ms
(30-frame) segments.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import resample_poly

from .audio_io import Waveform
from .errors import DataError

FS = 10000
WIN = 256
HOP = 128
NFFT = 512
N_BANDS = 15
MIN_FREQ = 150.0
SEG_FRAMES = 30          # 384 ms at 10 kHz / hop 128
BETA = -15.0             # SDR clipping bound, dB
DYN_RANGE = 40.0         # silence-removal threshold, dB
EPS = 1e-12


def _third_octave_bands(fs=FS, nfft=NFFT, n_bands=N_BANDS, min_freq=MIN_FREQ):
    f = np.linspace(0, fs / 2, nfft // 2 + 1)
    k = np.arange(n_bands, dtype=float)
    freq_low = min_freq * 2.0 ** ((2 * k - 1) / 6)
    freq_high = min_freq * 2.0 ** ((2 * k + 1) / 6)
    obm = np.zeros((n_bands, len(f)))
    for i in range(n_bands):
        lo = int(np.argmin((f - freq_low[i]) ** 2))
        hi = int(np.argmin((f - freq_high[i]) ** 2))
        obm[i, lo:hi] = 1.0
    return obm


def _frame(x: np.ndarray) -> np.ndarray:
    n_frames = 1 + (len(x) - WIN) // HOP
    idx = np.arange(WIN)[None, :] + HOP * np.arange(n_frames)[:, None]
    return x[idx]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray):
    w = np.hanning(WIN + 2)[1:-1]
    frames_x = _frame(x) * w
    frames_y = _frame(y) * w
    energy = 20 * np.log10(np.linalg.norm(frames_x, axis=1) + EPS)
    keep = energy > energy.max() - DYN_RANGE
    frames_x, frames_y = frames_x[keep], frames_y[keep]
    # Overlap-add the kept frames back into contiguous signals.
    n = (len(frames_x) - 1) * HOP + WIN if len(frames_x) else 0
    out_x = np.zeros(n)
    out_y = np.zeros(n)
    for i in range(len(frames_x)):
        s = i * HOP
        out_x[s:s + WIN] += frames_x[i]
        out_y[s:s + WIN] += frames_y[i]
    return out_x, out_y


def _band_envelopes(x: np.ndarray, obm: np.ndarray) -> np.ndarray:
    w = np.hanning(WIN + 2)[1:-1]
    frames = _frame(x) * w
    spec = np.fft.rfft(frames, NFFT, axis=1)
    power = np.abs(spec) ** 2
    return np.sqrt(power @ obm.T)  # (frames, bands)


def stoi(clean: Waveform, degraded: Waveform) -> float:
    """STOI score in roughly [0, 1]; higher is more intelligible."""
    x = resample_poly(clean.samples.astype(np.float64), 5, 8)
    y = resample_poly(degraded.samples.astype(np.float64), 5, 8)
    n = min(len(x), len(y))
    x, y = x[:n], y[:n]
    if n < WIN + HOP:
        raise DataError(f"signal too short for STOI after resampling ({n} samples)")
    x, y = _remove_silent_frames(x, y)
    if len(x) < WIN + HOP * (SEG_FRAMES - 1):
        raise DataError("signal too short for STOI after silence removal")
    obm = _third_octave_bands()
    ex = _band_envelopes(x, obm).T  # (bands, frames)
    ey = _band_envelopes(y, obm).T
    m_frames = ex.shape[1]
    clip = 10 ** (-BETA / 20)
    scores = []
    for m in range(SEG_FRAMES - 1, m_frames):
        sx = ex[:, m - SEG_FRAMES + 1:m + 1]
        sy = ey[:, m - SEG_FRAMES + 1:m + 1]
        alpha = np.linalg.norm(sx, axis=1, keepdims=True) / (
            np.linalg.norm(sy, axis=1, keepdims=True) + EPS)
        sy_n = np.minimum(alpha * sy, sx * (1 + clip))
        cx = sx - sx.mean(axis=1, keepdims=True)
        cy = sy_n - sy_n.mean(axis=1, keepdims=True)
        corr = (cx * cy).sum(axis=1) / (
            np.linalg.norm(cx, axis=1) * np.linalg.norm(cy, axis=1) + EPS)
        scores.append(corr.mean())
    return float(np.mean(scores))
