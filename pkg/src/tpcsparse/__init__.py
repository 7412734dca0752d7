"""Sparse 3D convolutional networks for time projection chamber events.

Modules:
    sparse    coordinates, sparse tensors, kernel maps
    layers    sparse conv, batch norm, activations, pooling (forward and backward)
    model     sparse ResNet14, checkpoints
    train     loss, Adam, schedule, sampling, metrics, epoch loop
    events    synthetic GADGET/AT-TPC events, gating labels, event files
    analysis  embeddings, linear SVM probes, PCA
    cli       ``tpcsparse`` command line
"""

from .errors import TpcSparseError
from .kernels import active as kernel_backend

__version__ = "0.1.0"

__all__ = ["TpcSparseError", "kernel_backend", "__version__"]
