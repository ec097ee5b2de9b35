"""Desk-scale training certification toolkit.

Trains small quantized ReLU networks and decoder-only transformers, and
constructs cheap layer-wise reference solutions at monitoring epochs so that
training effectiveness can be audited against achievable baselines instead of
loss curves alone.
"""

from .errors import (
    FormatError,
    InvalidArgument,
    InvalidPermutation,
    InvalidShape,
    InvalidSpec,
    InvalidToken,
    NumericalFailure,
    TooLarge,
    TraincertError,
)
from .linalg import GradCheckReport, Rng, as_matrix, grad_check, least_squares_project, pinv
from .quantization import (
    QuantSpec,
    QuantizedMatrix,
    binarize,
    binarize_channelwise,
    brute_force_binary_minimizer,
    quantize,
    ste_grad,
    ternarize,
)

__version__ = "0.1.0"
