"""Far-field speaker verification toolkit: features, VAD, room simulation,
ResNet speaker embeddings, cosine/PLDA scoring and detection metrics."""

__version__ = "0.1.0"
