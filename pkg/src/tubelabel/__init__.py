"""Flow-guided aggregation, pseudo-labeling, and video metrics for soft segmentation maps."""

from .aggregate import AggregatedClip, Neighbor, aggregate_clip, aggregate_frame
from .errors import (
    BadSpan,
    EmptyEvaluation,
    EmptyLabel,
    InconsistentDims,
    IoError,
    MalformedFile,
    MissingFile,
    SchemaError,
    ShapeMismatch,
    TubeLabelError,
)
from .flow_warp import (
    DEFAULT_ALPHA_OCC,
    DEFAULT_OCC_TH,
    OcclusionMask,
    bilinear_warp,
    nearest_warp,
    occlusion_mask,
    warp_labels,
    warp_soft,
)
from .losses import (
    LossConfig,
    TubePair,
    cross_entropy,
    dice,
    tube_loss_arrays,
    tube_matching_loss,
    vst_objective,
)
from .metrics import ConfusionMatrix, VpqAccumulator, confusion, miou, p_miou, vpq_s
from .pipeline import PipelineConfig, load_config, run_pipeline
from .pseudo import (
    THETA0,
    ConfidencePool,
    PseudoConfig,
    ThresholdState,
    fixed_threshold_labels,
    generate_clip_labels,
    generate_dataset_labels,
    pool_confidences,
    psi,
    update_thresholds,
)
from .refine import refine_cutout, refine_fillin
from .synth import NoiseConfig, SynthConfig, generate
from .tensor_io import (
    IGNORE,
    ClipManifest,
    FlowField,
    FrameEntry,
    ImageFrame,
    LabelMap,
    SoftSegMap,
    load_array,
    load_manifest,
    save_array,
    validate_softseg,
    write_manifest,
)

__version__ = "0.1.0"
