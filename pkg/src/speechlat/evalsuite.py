"""Evaluation: intelligibility, semantic retention, probing, clustering,
2D embedding, and reference classifiers standing in for neural evaluators.

The content and speaker reference classifiers are trained only on
ground-truth synthetic audio and frozen afterwards; they play the role of
an external ASR / speaker-embedding system at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .audio_io import Waveform, load_wav, mel_tensor
from .corpus import CorpusManifest, segments
from .encoder import FeatureSequence
from .errors import DataError, NumericError
from .seeding import derive_seed
from .stoi import stoi  # re-exported as part of the eval surface

__all__ = [
    "stoi", "semantic_retention", "linear_probe", "silhouette", "embed_2d",
    "ReferenceClassifiers", "train_reference_classifiers",
    "toy_content_error", "toy_speaker_sim", "EvalReport",
    "eval_reconstruction", "train_test_split", "pooled_segment_features",
]

# Full-scale context values reported alongside desk-scale results.
FULL_SCALE_CONTEXT = {"reconstruction_stoi": 0.97, "reconstruction_sim": 0.94}


def semantic_retention(a: FeatureSequence, b: FeatureSequence) -> float:
    """Mean per-frame cosine similarity between two feature sequences."""
    if a.frames.shape != b.frames.shape:
        raise DataError(f"shape mismatch {a.frames.shape} vs {b.frames.shape}")
    fa = a.frames.astype(np.float64)
    fb = b.frames.astype(np.float64)
    na = np.linalg.norm(fa, axis=1)
    nb = np.linalg.norm(fb, axis=1)
    if (na < 1e-8).any() or (nb < 1e-8).any():
        raise NumericError("zero-norm frame in semantic_retention")
    return float(((fa * fb).sum(axis=1) / (na * nb)).mean())


def train_test_split(n: int, seed: int, test_frac: float = 0.2):
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(n)
    n_test = max(1, int(round(test_frac * n)))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def linear_probe(features: np.ndarray, labels: np.ndarray, seed: int = 0,
                 test_frac: float = 0.2) -> float:
    """Held-out accuracy of a multinomial logistic regression probe."""
    from sklearn.linear_model import LogisticRegression

    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise DataError("linear probe needs at least 2 classes")
    train_idx, test_idx = train_test_split(len(labels), seed, test_frac)
    clf = LogisticRegression(max_iter=2000, random_state=seed)
    clf.fit(features[train_idx], labels[train_idx])
    return float(clf.score(features[test_idx], labels[test_idx]))


def silhouette(vectors: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette coefficient with Euclidean distance."""
    from scipy.spatial.distance import cdist

    vectors = np.asarray(vectors, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if len(classes) < 2 or counts.min() < 2:
        raise DataError("silhouette needs >= 2 classes with >= 2 members each")
    dist = cdist(vectors, vectors)
    if dist[~np.eye(len(vectors), dtype=bool)].max() < 1e-12:
        raise DataError("all points identical: silhouette undefined")
    scores = np.zeros(len(vectors))
    for i in range(len(vectors)):
        same = (labels == labels[i])
        a = dist[i, same & (np.arange(len(vectors)) != i)].mean()
        b = min(dist[i, labels == c].mean() for c in classes if c != labels[i])
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


def embed_2d(vectors: np.ndarray) -> np.ndarray:
    """First two principal components, sign-fixed so the largest-magnitude
    loading of each component is positive."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] < 3:
        raise DataError("embed_2d needs at least 3 points")
    centered = vectors - vectors.mean(axis=0)
    cov = centered.T @ centered / max(1, len(vectors) - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    comps = eigvecs[:, np.argsort(eigvals)[::-1][:2]]
    if comps.shape[1] < 2:
        comps = np.pad(comps, ((0, 0), (0, 2 - comps.shape[1])))
    for j in range(2):
        k = np.argmax(np.abs(comps[:, j]))
        if comps[k, j] < 0:
            comps[:, j] = -comps[:, j]
    return centered @ comps


def write_plot_data(path, ids, coords, labels) -> None:
    """Plot-data text: one "id x y label" line per point."""
    with open(path, "w") as fh:
        for i, (x, y), lab in zip(ids, coords, labels):
            fh.write(f"{i}\t{x:.6f}\t{y:.6f}\t{lab}\n")


# ---- reference classifiers -------------------------------------------------


class ContentClassifier(nn.Module):
    """Per-frame (50 Hz) content classifier over log-mel input."""

    def __init__(self, n_classes: int, n_mels: int = 100, hidden: int = 64):
        super().__init__()
        self.conv1 = nn.Conv1d(n_mels, hidden, 5, stride=2, padding=2)
        self.conv2 = nn.Conv1d(hidden, hidden, 3, padding=1)
        self.head = nn.Linear(hidden, n_classes)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """(B, F, n_mels) 100 Hz mel -> (B, ~F/2, n_classes) 50 Hz logits."""
        h = F.gelu(self.conv1(mel.transpose(1, 2)))
        h = F.gelu(self.conv2(h))
        return self.head(h.transpose(1, 2))


class SpeakerClassifier(nn.Module):
    """Utterance-level speaker classifier; penultimate layer is the
    speaker embedding used for similarity."""

    def __init__(self, n_speakers: int, n_mels: int = 100, hidden: int = 64):
        super().__init__()
        self.fc1 = nn.Linear(2 * n_mels, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.head = nn.Linear(hidden, n_speakers)

    def embed(self, mel: torch.Tensor) -> torch.Tensor:
        pooled = torch.cat([mel.mean(dim=1), mel.std(dim=1)], dim=-1)
        return self.fc2(F.gelu(self.fc1(pooled)))

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        return self.head(F.gelu(self.embed(mel)))


@dataclass
class ReferenceClassifiers:
    content: ContentClassifier
    speaker: SpeakerClassifier
    n_classes: int
    n_speakers: int
    held_out_content_error: float = float("nan")


def _mel_of(w: Waveform) -> torch.Tensor:
    return mel_tensor(torch.from_numpy(w.samples)[None]).float()


def _content_logits(clf: ContentClassifier, w: Waveform, n_frames: int) -> torch.Tensor:
    logits = clf(_mel_of(w))[0]
    return logits[:n_frames]


def train_reference_classifiers(manifest: CorpusManifest, seed: int = 0,
                                steps: int = 400, lr: float = 3e-3,
                                test_frac: float = 0.2) -> ReferenceClassifiers:
    """Train frozen content/speaker classifiers on ground-truth audio."""
    n_classes = 1 + max(max(e.classes) for e in manifest.entries)
    n_speakers = 1 + max(e.speaker for e in manifest.entries)
    torch.manual_seed(derive_seed(seed, "ref_clf"))
    content = ContentClassifier(n_classes)
    speaker = SpeakerClassifier(n_speakers)

    mels, labels, speakers = [], [], []
    for e in manifest.entries:
        w = load_wav(manifest.wav_path(e))
        mels.append(_mel_of(w)[0])
        labels.append(torch.tensor(e.classes, dtype=torch.long))
        speakers.append(e.speaker)
    train_idx, test_idx = train_test_split(len(mels), seed, test_frac)

    params = list(content.parameters()) + list(speaker.parameters())
    opt = torch.optim.AdamW(params, lr=lr)
    for step in range(steps):
        rng = np.random.default_rng(derive_seed(seed, "ref_clf", step))
        batch = rng.choice(train_idx, size=min(16, len(train_idx)), replace=False)
        loss = torch.zeros(())
        for i in batch:
            mel, lab = mels[i], labels[i]
            logits = content(mel[None])[0][:len(lab)]
            loss = loss + F.cross_entropy(logits, lab[:logits.shape[0]])
            sp = speaker(mel[None])
            loss = loss + F.cross_entropy(sp, torch.tensor([speakers[i]]))
        loss = loss / len(batch)
        if not torch.isfinite(loss):
            raise NumericError(f"reference classifier diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    content.eval()
    speaker.eval()
    for p in params:
        p.requires_grad_(False)
    errs = []
    with torch.no_grad():
        for i in test_idx:
            lab = labels[i]
            pred = content(mels[i][None])[0][:len(lab)].argmax(-1)
            n = min(len(pred), len(lab))
            errs.append(float((pred[:n] != lab[:n]).float().mean()))
    return ReferenceClassifiers(content, speaker, n_classes, n_speakers,
                                held_out_content_error=float(np.mean(errs)))


def toy_content_error(ref: ReferenceClassifiers, w: Waveform,
                      true_classes: list[int]) -> float:
    """Frame-weighted error rate with majority voting per segment."""
    with torch.no_grad():
        logits = _content_logits(ref.content, w, len(true_classes))
    n = logits.shape[0]
    if abs(n - len(true_classes)) > 2:
        raise DataError(f"length mismatch: {n} predicted vs {len(true_classes)} true frames")
    pred = logits.argmax(-1).numpy()
    wrong = 0
    total = 0
    for cls, start, end in segments(true_classes[:n]):
        votes = np.bincount(pred[start:end])
        majority = int(np.argmax(votes))
        total += end - start
        if majority != cls:
            wrong += end - start
    return wrong / max(1, total)


def toy_speaker_sim(ref: ReferenceClassifiers, a: Waveform, b: Waveform) -> float:
    """Cosine similarity between speaker-classifier embeddings."""
    with torch.no_grad():
        ea = ref.speaker.embed(_mel_of(a))[0].numpy()
        eb = ref.speaker.embed(_mel_of(b))[0].numpy()
    return float(np.dot(ea, eb) / (np.linalg.norm(ea) * np.linalg.norm(eb) + 1e-12))


# ---- report + orchestration ------------------------------------------------


@dataclass
class EvalReport:
    corpus_id: str
    config_hash: str
    metrics: dict = field(default_factory=dict)
    per_utterance: dict = field(default_factory=dict)
    context: dict = field(default_factory=lambda: dict(FULL_SCALE_CONTEXT))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump({"corpus_id": self.corpus_id, "config_hash": self.config_hash,
                       "metrics": self.metrics, "per_utterance": self.per_utterance,
                       "context": self.context}, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as fh:
            rec = json.load(fh)
        return cls(rec["corpus_id"], rec["config_hash"], rec["metrics"],
                   rec["per_utterance"], rec["context"])


def pooled_segment_features(frames: np.ndarray, classes: list[int],
                            frame_rate: int = 50) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pool frames over contiguous same-class segments."""
    scale = 50 // frame_rate
    vecs, labs = [], []
    for cls, start, end in segments(classes):
        lo, hi = start // scale, max(start // scale + 1, -(-end // scale))
        hi = min(hi, frames.shape[0])
        if lo >= hi:
            continue
        vecs.append(frames[lo:hi].mean(axis=0))
        labs.append(cls)
    return np.stack(vecs), np.asarray(labs)


def eval_reconstruction(encoder, adapter, decoder, manifest: CorpusManifest,
                        ref: ReferenceClassifiers, seed: int = 0,
                        config_hash: str = "", encoder_frozen=None,
                        tap_layer: int | None = None,
                        max_utts: int | None = None) -> EvalReport:
    """Encode -> compress -> decode over the held-out split and score it."""
    from .acoustic import decode, mel_loss
    from .adapter import compress
    from .encoder import encode

    _, test_idx = train_test_split(len(manifest.entries), seed)
    if max_utts is not None:
        test_idx = test_idx[:max_utts]
    report = EvalReport(corpus_id=str(manifest.root), config_hash=config_hash)
    rows = []
    for i in test_idx:
        e = manifest.entries[int(i)]
        y = load_wav(manifest.wav_path(e))
        f = encode(encoder, y, layer=tap_layer)
        z = compress(adapter, f)
        y_hat = decode(decoder, z)
        row = {
            "stoi": stoi(y, y_hat),
            "mel_l1": mel_loss(y, y_hat),
            "content_error": toy_content_error(ref, y_hat, e.classes),
            "speaker_sim": toy_speaker_sim(ref, y, y_hat),
        }
        if encoder_frozen is not None:
            f_ref = encode(encoder_frozen, y, layer=tap_layer)
            row["semantic_retention"] = semantic_retention(f_ref, f)
        rows.append(row)
        report.per_utterance[e.id] = row
    for key in rows[0]:
        report.metrics[key] = float(np.mean([r[key] for r in rows]))
    return report
