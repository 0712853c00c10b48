import numpy as np
import pytest
import torch

from speechlat.corpus import synth_corpus

# Keep CPU runs predictable on shared machines.
torch.set_num_threads(max(1, torch.get_num_threads()))

CORPUS_SEED = 123


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """Small shared corpus: 4 speakers x 8 classes, 64 utterances."""
    out = tmp_path_factory.mktemp("corpus")
    return synth_corpus(out, CORPUS_SEED, n_speakers=4, n_classes=8,
                        n_utts=64, dur_range=(0.8, 1.2))


@pytest.fixture(scope="session")
def speech_like(corpus):
    """A handful of corpus waveforms as plain float arrays."""
    from speechlat.audio_io import load_wav

    return [load_wav(corpus.wav_path(e)).samples for e in corpus.entries[:4]]


def rand_waveform(rng: np.random.Generator, n: int = 16000):
    from speechlat.audio_io import Waveform

    return Waveform(rng.standard_normal(n).astype(np.float32) * 0.1)
