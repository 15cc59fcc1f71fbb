"""Desk-scale sparse mixture-of-experts language model toolkit.

Submodules:

- ``numerics``: float64 tensors, tape autograd, finite-difference checks
- ``pretokenizer`` / ``bpe``: byte-level pretokenization and BPE
- ``attention``: gated grouped-query attention with local/global layers
- ``moe``: sigmoid top-k routing, shared experts, bias balancers
- ``model``: sandwich-normalized decoder, presets, losses
- ``datapipe``: sequential and randomized-buffer packing, BatchHet
- ``training``, ``checkpoint``, ``checks``, ``cli``: plumbing
"""

from .model import ModelConfig, load_config
from .numerics import Tape, Tensor

__all__ = ["ModelConfig", "Tape", "Tensor", "load_config"]
__version__ = "0.1.0"
