"""Unsupervised salient-interval detection for motor-imagery EEG.

A masked-reconstruction LSTM/self-attention autoencoder scores every time
sample of a trial; the highest-scoring segments are kept and the pruned
trials are classified with CSP + LDA.
"""

__version__ = "0.1.0"
