"""Training and diagnosis lab for unstructured sparse neural networks."""

__version__ = "0.1.0"

from .autodiff import (
    ComputationTape,
    QuadraticHead,
    SoftmaxCrossEntropy,
    backward,
    evaluate,
    forward,
    hvp,
    logits,
    loss_and_grads,
    predict_proba,
)
from .data import Dataset, load_mnist, make_synthetic, resolve_dataset
from .dst import (
    DstConfig,
    LotteryState,
    PruneConfig,
    UpdateReport,
    drop_fraction_at,
    dst_update,
    extract_lottery,
    make_scratch,
    prune_step,
)
from .flow import (
    GradFlowRecord,
    SpectrumEstimate,
    full_hessian,
    gradient_flow,
    largest_negative_eigenvalue_track,
    mask_update_delta,
    spectrum,
)
from .initialization import InitScheme, initialize, signal_probe, sweep_sparsity_probe
from .landscape import (
    ParamPoint,
    SimilarityReport,
    disagreement,
    ensemble_accuracy,
    interpolate_loss,
    jensen_shannon,
    kl_divergence,
    l2_distance,
    mds_embed,
    similarity_report,
)
from .network import (
    MaskedNetwork,
    SparsityDistribution,
    allocate_sparsity,
    build_network,
    fan_counts,
    lenet5_spec,
    mlp_spec,
    parse_model_spec,
)
from .checkpoint import load_state, save_state
from .recipes import RECIPES, run_experiment
from .train import RunArtifacts, TrainConfig, train
