"""Deterministic desk-scale simulator of federated learning with sparse
on-device training (top-K weights and activations) and three local
sparsification strategies for uplink compression."""

from .analysis import FlopsReport, MaskTrace, flops_report, jaccard, mask_stability, nonzero_ratio
from .codec import (
    CsrLayerPayload,
    ModelUpdate,
    Strategy,
    TensorPayload,
    build_update,
    csr_decode,
    csr_encode,
    deserialize_update,
    savings_factor,
    serialize_update,
)
from .config import ExperimentConfig, config_to_ini, parse_config
from .data import (
    Dataset,
    PartitionPlan,
    client_validation_split,
    lda_partition,
    load_idx,
    make_blob_task,
    read_idx,
    synth_blobs,
)
from .federation import (
    FedAdamConfig,
    FederationConfig,
    RoundRecord,
    ServerState,
    aggregate,
    fedadam_aggregate,
    lr_at,
    pseudo_gradient,
    run_experiment,
    sample_clients,
    train_locally,
)
from .model import (
    ForwardTrace,
    Layer,
    ModelParams,
    backward_swat,
    evaluate,
    forward_swat,
    grad_check,
    init_cnn,
    init_mlp,
    sgd_step,
)
from .sparsify import SparsityConfig, TopKMask, apply_mask, keep_fraction_for, topk_mask
from .tensor import (
    ConvSpec,
    ShapeError,
    conv2d_backward_input,
    conv2d_backward_weights,
    conv2d_forward,
    conv_macs,
    linear_backward_input,
    linear_backward_weights,
    linear_forward,
    linear_macs,
    mac_count,
)

__version__ = "0.1.0"
