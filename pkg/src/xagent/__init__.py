"""Latent-semantic-aware agent attention at desk scale.

Transport-guided agent-token selection, mask-guided dual-branch pooling,
cascaded differential attention with residual refinement, alignment and
segmentation objectives, a deterministic gradient-descent trainer, and a CLI
harness that verifies the whole mechanism with oracles, invariants, and
finite-difference gradient checks.
"""

from .attention import (
    AgentAttnParams,
    AttnRecord,
    BranchWeights,
    DiffAttnParams,
    Wiring,
    ablation_wiring,
    agent_attention,
    cross_attn,
    diff_attn,
    mean_attention_distance,
)
from .config import RunConfig, config_defaults, parse_config, smoke_overrides
from .errors import (
    ArgumentError,
    ConfigError,
    DegenerateInputError,
    NumericError,
    ShapeError,
    TrainingDivergedError,
)
from .numerics import (
    Rng,
    fd_gradient,
    gather_rows,
    l2_normalize_rows,
    matmul,
    sigmoid,
    softmax_rows,
    topk,
)
from .pipeline import (
    Instance,
    Model,
    init_encoder,
    init_model,
    loss_and_grads,
    make_instance,
    named_parameters,
    pipeline_forward,
)
from .pooling import (
    PoolingParams,
    effective_gamma,
    fuse,
    mask_tokens,
    pool,
    pool_variant,
)
from .report import InvariantResult, RunReport, emit_heatmap, emit_trajectory, read_heatmap
from .selection import (
    AffinityMatrix,
    AgentSelection,
    affinity,
    select_agents_baseline,
    select_channels,
    select_tokens,
)
from .training import (
    LossParams,
    ProbeResult,
    TextProjector,
    TrainState,
    align_loss,
    make_train_state,
    probe_simulation,
    project_text,
    seg_loss,
    total_loss,
    train,
)
from .transport import (
    TransportPlan,
    TransportProblem,
    cost_matrix,
    plan_entropy,
    sinkhorn,
    uniform_problem,
)
from .cli import INVARIANT_NAMES, main, run, run_invariant_suite

__version__ = "0.1.0"
