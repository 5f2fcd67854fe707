"""Paired HE/CK slides to registered, class-labeled segmentation
datasets, plus the matching evaluation scheme.

The public surface re-exports the data model and the per-stage
operations; the CLI in `restain.cli` drives them end to end.
"""

from .errors import (
    ConfigError,
    DependencyError,
    FormatError,
    GenerationError,
    PredictorError,
    ResolutionError,
    RestainError,
)
from .raster import (
    LABEL_PALETTE,
    N_CLASSES,
    BinaryMask,
    LabelMask,
    PyramidImage,
    RasterImage,
    build_pyramid,
    crop,
    downsample,
    downsample_labels,
    read_label_mask,
    read_pyramid,
    write_label_mask,
    write_pyramid,
)
from .stains import (
    DeconvConfig,
    StainMatrix,
    compose_od,
    compose_rgb,
    dab_channel,
    dab_mask,
    deconvolve,
    load_stain_matrix,
    od_to_rgb_float,
    rgb_to_od,
)
from .maskops import (
    AnnotationSet,
    MorphologyConfig,
    Polygon,
    TissueConfig,
    clean_epithelium_mask,
    connected_components,
    load_geojson,
    mask_intersect,
    mask_subtract,
    mask_union,
    rasterize,
    save_geojson,
    tissue_mask,
)
from .register import ShiftVector, apply_shift, equalize, phase_correlation, register_pair
from .tma import (
    CorePair,
    CoreRegion,
    ExtractorConfig,
    extract_cores,
    extract_pair_rasters,
    pair_cores,
)
from .dataset import (
    AugmentationConfig,
    GroundTruthConfig,
    PatchGridConfig,
    PatchOrigin,
    PatchRecord,
    assign_set,
    augment,
    balanced_sampler,
    build_ground_truth,
    cut_patches,
    patch_grid,
    read_patch_store,
    write_patch_store,
)
from .evaluate import (
    ClassCounts,
    ConstantPredictor,
    CoreMetrics,
    MetricRow,
    OraclePredictor,
    QualScore,
    aggregate,
    core_metrics,
    group_metrics,
    qualitative_summary,
    report_dict,
    score,
    stitch_predict,
)
from .protocol import (
    ExternalPredictor,
    read_request,
    read_response,
    write_request,
    write_response,
)
from .synth import SynthResult, SynthSpec, generate
from .config import PipelineConfig, config_hash, config_to_dict, load_config

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
