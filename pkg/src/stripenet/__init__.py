"""stripenet: stripe-based multi-granularity feature learning on a numpy autodiff core."""

from .tensor import (
    Tensor,
    ShapeError,
    no_grad,
    concat,
    split,
    concat_batch,
    split_batch,
    read_tensor,
    write_tensor,
)
from . import (
    augment,
    data,
    evaluation,
    gradcheck,
    layers,
    losses,
    model,
    ops,
    partition,
    receptive,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "concat",
    "split",
    "concat_batch",
    "split_batch",
    "read_tensor",
    "write_tensor",
    "augment",
    "data",
    "evaluation",
    "gradcheck",
    "layers",
    "losses",
    "model",
    "ops",
    "partition",
    "receptive",
    "train",
    "__version__",
]
