"""flowparse: key-frame video instance parsing at desk scale.

A numpy-backed implementation of flow-guided feature propagation between
key frames, convolutional-GRU temporal encoding, a two-branch instance
parsing head, and the runtime-cost model that justifies key-frame
scheduling.  Training runs through a minimal reverse-mode tape.
"""

__version__ = "0.1.0"

from .autodiff import Param, ParamStore, Tape, backward, sgd_step  # noqa: F401
