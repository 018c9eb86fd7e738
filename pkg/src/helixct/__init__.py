"""helixct: helical cone-beam CT pipeline toolkit.

Differentiable projection/backprojection operators, classical wFBP and
IR-TV reconstruction, a photon-space self-supervised calibration loop, and
a CLI for phantom simulation, reconstruction, and evaluation.
"""

__version__ = "0.1.0"
