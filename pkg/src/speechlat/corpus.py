"""Synthetic multi-speaker corpus for desk-scale training.

Each utterance is a sequence of content segments. A content class is a
formant-like spectral envelope; a speaker contributes an f0 range, spectral
tilt, and vibrato. Content labels are per-frame at 50 Hz (320 samples) so
they align 1:1 with latent frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import SAMPLE_RATE, Waveform, save_wav
from .errors import ConfigError, DataError

FRAME_SAMPLES = 320  # 50 Hz label grid at 16 kHz


@dataclass
class CorpusEntry:
    id: str
    path: str
    speaker: int
    classes: list[int]  # one label per 50 Hz frame
    dur: float


@dataclass
class CorpusManifest:
    entries: list[CorpusEntry] = field(default_factory=list)
    root: Path = Path(".")

    def wav_path(self, entry: CorpusEntry) -> Path:
        return self.root / entry.path

    def save(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps({
                    "id": e.id, "path": e.path, "speaker": e.speaker,
                    "classes": e.classes, "dur": e.dur,
                }) + "\n")

    @classmethod
    def load(cls, path) -> "CorpusManifest":
        path = Path(path)
        entries = []
        seen = set()
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                e = CorpusEntry(rec["id"], rec["path"], int(rec["speaker"]),
                                [int(c) for c in rec["classes"]], float(rec["dur"]))
                if e.id in seen:
                    raise DataError(f"duplicate utterance id {e.id}")
                seen.add(e.id)
                if not (path.parent / e.path).exists():
                    raise DataError(f"missing audio file {e.path} referenced by {e.id}")
                entries.append(e)
        return cls(entries, root=path.parent)


def _speaker_params(rng: np.random.Generator, n_speakers: int):
    f0 = np.linspace(95.0, 265.0, n_speakers) * rng.uniform(0.95, 1.05, n_speakers)
    tilt = rng.uniform(-0.8, -0.2, n_speakers)       # spectral tilt exponent
    vib_rate = rng.uniform(4.0, 7.0, n_speakers)     # vibrato Hz
    vib_depth = rng.uniform(0.01, 0.03, n_speakers)
    return f0, tilt, vib_rate, vib_depth


def _class_params(rng: np.random.Generator, n_classes: int):
    # Two formants per class on a shuffled grid so classes are well separated.
    f1 = np.linspace(350.0, 950.0, n_classes)
    f2 = np.linspace(1200.0, 3400.0, n_classes)
    rng.shuffle(f2)
    bw1 = rng.uniform(90.0, 140.0, n_classes)
    bw2 = rng.uniform(150.0, 250.0, n_classes)
    return f1, f2, bw1, bw2


def _render_utterance(rng, dur_frames, speaker, classes_by_frame,
                      spk_params, cls_params):
    f0_base, tilt, vib_rate, vib_depth = (p[speaker] for p in spk_params)
    f1, f2, bw1, bw2 = cls_params
    n = dur_frames * FRAME_SAMPLES
    t = np.arange(n) / SAMPLE_RATE

    # Smooth f0 contour: slow drift + vibrato + per-utterance offset.
    drift = 1.0 + 0.06 * np.sin(2 * np.pi * rng.uniform(0.3, 0.8) * t + rng.uniform(0, 2 * np.pi))
    vib = 1.0 + vib_depth * np.sin(2 * np.pi * vib_rate * t)
    f0 = f0_base * rng.uniform(0.93, 1.07) * drift * vib
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE

    n_harm = int(np.floor(7000.0 / f0.min()))
    h = np.arange(1, n_harm + 1)[:, None]               # (H, 1)
    harm_freq = h * f0[None, :]                          # (H, N)

    # Per-sample formant envelope from the per-frame class labels.
    cls_per_sample = np.repeat(np.asarray(classes_by_frame), FRAME_SAMPLES)
    env = (np.exp(-0.5 * ((harm_freq - f1[cls_per_sample]) / bw1[cls_per_sample]) ** 2)
           + 0.8 * np.exp(-0.5 * ((harm_freq - f2[cls_per_sample]) / bw2[cls_per_sample]) ** 2)
           + 0.02)
    env *= (harm_freq / 500.0) ** tilt
    env[harm_freq >= 7800.0] = 0.0

    x = np.sum(env * np.sin(h * phase[None, :]), axis=0)

    # Short crossfade at segment boundaries to avoid clicks.
    gain = np.ones(n)
    boundaries = np.nonzero(np.diff(np.asarray(classes_by_frame)))[0]
    ramp = 1.0 - np.hanning(2 * 160)  # dips to 0 at the boundary sample
    for b in boundaries:
        s = (b + 1) * FRAME_SAMPLES
        lo, hi = max(0, s - 160), min(n, s + 160)
        gain[lo:hi] *= ramp[160 - (s - lo):160 + (hi - s)]
    x *= gain
    x += 0.003 * rng.standard_normal(n)

    x = 0.5 * x / max(np.max(np.abs(x)), 1e-9)
    return x.astype(np.float32)


def synth_corpus(out_dir, seed: int, n_speakers=4, n_classes=8, n_utts=200,
                 dur_range=(0.8, 1.6)) -> CorpusManifest:
    """Generate a deterministic synthetic corpus under out_dir.

    Writes one WAV per utterance plus manifest.jsonl (line-delimited JSON:
    id, path, speaker, classes, dur).
    """
    if n_speakers < 2 or n_classes < 2:
        raise ConfigError("need n_speakers >= 2 and n_classes >= 2")
    lo, hi = dur_range
    if not (0 < lo <= hi):
        raise ConfigError(f"bad dur_range {dur_range}")
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    spk_params = _speaker_params(rng, n_speakers)
    cls_params = _class_params(rng, n_classes)

    manifest = CorpusManifest(root=out_dir)
    for i in range(n_utts):
        speaker = int(rng.integers(n_speakers))
        dur_frames = int(rng.integers(round(lo * 50), round(hi * 50) + 1))
        classes = []
        while len(classes) < dur_frames:
            seg_frames = int(rng.integers(8, 18))  # 0.16 - 0.34 s segments
            c = int(rng.integers(n_classes))
            classes.extend([c] * seg_frames)
        classes = classes[:dur_frames]

        x = _render_utterance(rng, dur_frames, speaker, classes, spk_params, cls_params)
        utt_id = f"utt{i:05d}"
        rel = f"wav/{utt_id}.wav"
        save_wav(out_dir / rel, Waveform(x))
        manifest.entries.append(CorpusEntry(
            utt_id, rel, speaker, classes, dur_frames / 50.0))

    manifest.save(out_dir / "manifest.jsonl")
    return manifest


def segments(classes: list[int]) -> list[tuple[int, int, int]]:
    """Contiguous same-class runs as (class, start_frame, end_frame)."""
    out = []
    start = 0
    for i in range(1, len(classes) + 1):
        if i == len(classes) or classes[i] != classes[start]:
            out.append((classes[start], start, i))
            start = i
    return out
