"""Few-shot class-incremental learning harness: prompt tuning over a
frozen toy text encoder, per-class diagonal-Gaussian feature replay with
VAE-synthesized estimation support, baselines, and metrics."""

__version__ = "0.1.0"

from .distributions import (
    DistributionStore,
    GaussianClassDistribution,
    dimension_histogram,
    estimate_distribution,
    load_store,
    sample_pseudo_feature,
    save_store,
    storage_bytes,
)
from .encoders import (
    ClassEmbeddingTable,
    FeatureRecord,
    SyntheticWorld,
    TextEncoder,
    encode_text,
    encode_text_grad,
    load_feature_file,
    synthetic_sample,
    write_feature_file,
)
from .errors import (
    ConfigError,
    DataFormatError,
    DimensionMismatchError,
    FscilError,
    NumericalError,
    ProtocolViolationError,
    TapeError,
    ZeroVectorError,
)
from .numerics import (
    Layer,
    MlpParams,
    Rng,
    cosine_similarity,
    mlp_backward,
    mlp_forward,
    rng_standard_normal,
    softmax_cross_entropy,
)
from .prompt import (
    ClassifierHead,
    OptimizerState,
    PromptContext,
    SessionHyperparams,
    evaluate,
    init_prompt,
    load_prompt,
    loss_new,
    loss_old,
    loss_total,
    predict,
    save_prompt,
    sgd_momentum_step,
    train_session,
)
from .protocol import (
    BenchmarkSpec,
    MethodConfig,
    RunOutcome,
    SessionResult,
    SyntheticLayout,
    build_synthetic_benchmark,
    metric_avg,
    metric_decomposition,
    metric_pd,
    run_benchmark,
    shot_sweep,
)
from .vae import (
    VaeParams,
    VaeTrainConfig,
    kl_to_standard_normal,
    reconstruction_loss,
    reparameterize,
    synthesize_features,
    train_vae,
    vae_decode,
    vae_encode,
)
