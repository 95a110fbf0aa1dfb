"""Desk-scale 3D morphable-model parameter regression toolkit.

Core pieces: a PCA shape engine with orthographic projection, a family of
parameter-regression losses with analytic gradients (vertex distance, brute
force and fast weighted parameter distance, landmark regression), a k-step
look-ahead optimizer that picks between the two main losses on held-out
batches, short-video synthesis for stability training, alignment metrics,
and bit-exact persistence for every artifact.
"""

from .lookahead import (
    MetaConfig,
    SelectorRecord,
    StreamExhausted,
    export_trace,
    meta_joint_step,
    parse_trace,
    train_meta_joint,
)
from .losses import (
    JointConfig,
    LossOutput,
    fwpdc,
    fwpdc_weights,
    landmark_regression_loss,
    vanilla_joint,
    vdc,
    weighted_param_loss,
    wpdc_naive,
    wpdc_weights_naive,
)
from .metrics import (
    NORMALIZER_BBOX,
    NORMALIZER_INTEROCULAR,
    DegenerateInputError,
    EvalReport,
    nme_dense,
    nme_sparse,
    stability,
)
from .morphable import (
    BasisSet,
    NormStats,
    ParamVec,
    StateError,
    VertexSet,
    denormalize_params,
    normalize_params,
    project_2d,
    reconstruct_vertices,
    render_pointsplat,
    sample_landmarks,
    synthetic_basis,
    truncate_basis,
)
from .regressor import (
    RegressorWeights,
    SgdConfig,
    TrainConfig,
    TrainResult,
    backward,
    forward,
    init_weights,
    predict_landmarks,
    predict_params,
    prepare_pool,
    sgd_step,
    train_supervised,
)
from .storage import (
    DatasetManifest,
    ParamPrior,
    ParseError,
    fit_norm_stats,
    generate_dataset,
)
from .synthesis import (
    PerturbRanges,
    SyntheticClip,
    apply_motion_blur,
    apply_noise,
    inplane_transform,
    outofplane_transform,
    synthesize_clip,
)

__version__ = "0.1.0"
