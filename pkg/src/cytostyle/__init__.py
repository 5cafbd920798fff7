"""Training-free appearance transfer for annotated microscopy datasets.

Transfers the look (texture, color, noise) of an unannotated target dataset
onto an annotated source dataset by inverting both through a diffusion
backbone and substituting attention keys/values during regeneration. Source
cell geometry survives, so source masks stay valid for the styled images.
Includes SEG/DET/OP instance-segmentation scoring for evaluating the
downstream effect.
"""

from .diffusion import (
    Backbone,
    NoiseSchedule,
    add_noise,
    ddim_sample,
    ddim_step,
    diffusion_loss,
    make_noise_schedule,
)
from .errors import (
    AlphaUndefinedError,
    CacheMissError,
    CheckpointError,
    ConfigError,
    CytostyleError,
    DetectorError,
    ImageDecodeError,
    NoCellsError,
    StageError,
    UnsupportedFormatError,
)
from .imaging import (
    Image,
    InstanceMask,
    InstanceStats,
    connected_components,
    instance_stats,
    load_image,
    load_mask,
    rescale_image,
    resize_to,
    save_image,
    save_mask,
)
from .inversion import InversionResult, ddim_invert_step, invert
from .attention_control import (
    AttentionCache,
    InjectionPlan,
    injected_attention,
    run_with_injection,
    select_injection_layers,
)
from .metrics import (
    Matching,
    MetricReport,
    PenaltyWeights,
    det_score,
    evaluate_dataset,
    match_objects,
    op_csb,
    seg_score,
)
from .score_scaling import AlphaEstimate, attention_score_std, compute_alpha
from .size_match import (
    SizeRatio,
    average_cell_length,
    compute_size_ratio,
    naive_detector,
    prepare_target,
)
from .stylize import PairManifest, StyledRecord, StylizeJob, generate_dataset, stylize_pair
from .toy_backbone import ToyBackbone, ToyTrainConfig, ToyUNet, train_toy_backbone

__version__ = "0.1.0"
