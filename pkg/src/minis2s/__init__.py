"""minis2s: a desk-scale speech sequence-to-sequence toolkit.

End-to-end ASR, speech translation and speech synthesis on toy data,
built on a small reverse-mode autodiff engine. Transformer and RNN
model bodies are interchangeable behind shared encoder/decoder
interfaces, and a single beam search serves both body types.
"""

__version__ = "0.1.0"

from .tensor import Tensor, Graph, no_grad, backward, grad_check

__all__ = ["Tensor", "Graph", "no_grad", "backward", "grad_check", "__version__"]
