"""fer-forge: a from-scratch facial emotion recognition toolkit.

Subpackages cover the dense array kernels (tensor), layer forward/backward
passes (layers), optimizers (optim), the compared architectures and their
persistence (models), a CART baseline (tree), FER-2013 ingestion (data),
the training/evaluation loop (train), Haar-cascade face detection
(facedetect) and the CLI (cli).
"""

__version__ = "0.1.0"
