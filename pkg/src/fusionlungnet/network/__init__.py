from .backbone import BackboneConfig, ResNet50Encoder, TinyEncoder, encode
from .blocks import (
    ChannelAggregationAttention,
    MultiScaleFusion,
    ResidualRefinement,
    SelfRefinement,
    ShapeError,
    rrm_forward,
)
from .checkpoint import canonical_json, config_hash, load_model, read_checkpoint, save_checkpoint
from .model import (
    ABLATION_GRID,
    BASELINE,
    FULL,
    AblationFlags,
    FusionLungNet,
    SegmentationOutput,
    as_model_input,
    count_parameters,
    model_forward,
)
