"""Compress-then-enrich speech latent toolkit.

Pipeline: a toy self-supervised encoder produces 50 Hz features, a semantic
adapter compresses them into a low-dimensional latent (stage 1), and a causal
acoustic decoder is jointly enriched to reconstruct waveforms while the latent
stays anchored to the encoder's feature space (stage 2). The latent doubles as
a target for flow-matching generation.
"""

__version__ = "0.1.0"
