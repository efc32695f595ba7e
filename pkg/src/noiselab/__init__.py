"""Camera-pipeline noise attacks and display-adaptive defense components."""

__version__ = "0.1.0"

from .errors import (
    CodecClampWarning,
    ContractError,
    DomainMismatchError,
    GradientFault,
    InvalidProfileError,
    IoFormatError,
    NoiselabError,
    RejectedInputError,
    ShapeError,
)
from .isp_core import (
    BayerPlane,
    CameraProfile,
    Domain,
    GammaDirection,
    ImagePlane,
    TransformDirection,
    bundled_profiles,
    color_correct,
    demosaic_bilinear,
    gamma_transfer,
    load_profile,
    mosaic_rggb,
    white_balance,
)
from .noise_model import (
    CodecDirection,
    K_MAX,
    K_MIN,
    NoiseMode,
    NoiseParams,
    NormalizedNoiseParams,
    SIGMA_MAX,
    SIGMA_MIN,
    denormalize_arrays,
    denormalize_params,
    inject_noise,
    make_stream,
    noise_variance,
    normalize_arrays,
    normalize_params,
    param_codec,
    sample_noise_params,
)
from .pds_attack import (
    DegradedSample,
    PerturbedPair,
    forward_isp,
    inverse_isp,
    perturb_lowlight,
    sample_profile,
    synthesize_attack,
)
from .autodiff_core import (
    GradCheckReport,
    Tape,
    Tensor,
    backward,
    grad_check,
    load_checkpoint,
    save_checkpoint,
    suspend_tape,
    tape,
)
from .defense_nets import (
    DaMoeBlock,
    MoeConfig,
    MoeMode,
    NoisePredictorNet,
    PredictorConfig,
    SftConfig,
    SftLayer,
    da_moe_forward,
    make_da_moe_block,
    make_noise_predictor,
    make_sft_layer,
    noise_predictor_forward,
    predicted_params,
    sft_forward,
)
from .objectives import (
    LossReport,
    SurrogateFeatureExtractor,
    amd_loss,
    consist_loss,
    dual_domain_loss,
    dynamic_margin,
    make_surrogate_extractor,
    perceptual_distance,
    reconstruction_loss,
    surrogate_features,
    total_loss,
)
from .training import (
    DefenseConfig,
    DefenseSystem,
    OptimizerState,
    ToyDataset,
    ToyItem,
    adam_step,
    defense_forward,
    make_adam,
    make_defense_system,
    synth_toy_dataset,
    train_defense_toy,
    train_noise_predictor,
)
from .cli_io import (
    RunManifest,
    load_png,
    run_attack,
    run_perturb,
    run_predict,
    run_stats_variance,
    run_verify,
    save_png,
    tensor_io,
)

__all__ = [name for name in dir() if not name.startswith("_")]
