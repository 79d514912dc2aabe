from . import tensor
from .checkpoint import CheckpointError, load_checkpoint, load_checkpoint_table, save_checkpoint
from .gradcheck import analytic_gradients, grad_check, max_relative_error, numeric_gradients
from .modules import (
    ConformerBlock,
    DepthwiseConv1d,
    Dropout,
    FeedForward,
    Film,
    LayerNorm,
    Linear,
    Module,
    Parameter,
    SelfAttention,
    Tac,
    WeightedLayerSum,
    cross_entropy,
    sinusoidal_encoding,
)
from .optim import Adam, Sgd, make_optimizer
from .tensor import NumericError, Tensor
