"""Tensor Chain decomposition with sensitivity control."""
from .model import (
    BTDSharedModel,
    DegenerateModelError,
    StabilityMeasures,
    TCModel,
    balanced_normalize,
    btd_to_tc,
    degeneracy_sequence,
    intensity,
    reconstruct,
    sensitivity,
    tc_to_btd,
)
from .tensor import cyclic_shift, frobenius_norm, relative_error, train_contract, unfold

__version__ = "0.1.0"
