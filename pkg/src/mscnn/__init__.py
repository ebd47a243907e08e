"""Multi-scale convolutional crowd counting, implemented on numpy."""

from .density import (
    DensityMap,
    HeadAnnotations,
    KernelParams,
    count_from_density,
    downsample_sum,
    mean_knn_distance,
    render_density_map,
    sigma_for_heads,
)
from .metrics import EvalReport, evaluate, kfold_evaluate, mae, mse
from .model import (
    Model,
    ModelSpec,
    MSBSpec,
    build_mscnn,
    default_spec,
    forward,
    load_checkpoint,
    loss_and_grad,
    param_count,
    save_checkpoint,
)
from .trainer import Sample, TrainConfig, augment_ninecrop, augment_randomcrop, kfold_splits, train

__version__ = "0.1.0"
