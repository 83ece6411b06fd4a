"""Multi-grained text-guided image fusion.

A desk-scale trainable pipeline that fuses multi-exposure or multi-focus
image pairs under hierarchical textual guidance, together with the
saliency-driven enrichment augmenter, the multi-grained training objective,
and the standard fusion quality metric suite (EN, SD, SF, AG, VIF, Qabf).
"""

from .core import (
    Config,
    ConfigError,
    ContractError,
    FormatError,
    Image,
    ImagePair,
    MtifError,
    SchemaError,
    elementwise_max,
    load_config,
    load_image,
    save_image,
    to_grayscale,
)
from .enrich import (
    CropWindow,
    EnrichedPairSet,
    SaliencyMap,
    center_periphery_partition,
    compute_saliency,
    load_saliency_map,
    select_center_window,
)
from .textguide import (
    GrainedDescriptions,
    PrecomputedTextEncoder,
    StubTextEncoder,
    TextFeatureSet,
    encode_text,
    load_description_cache,
    save_description_cache,
    save_embeddings,
    stub_embed,
)

__version__ = "0.1.0"

__all__ = [
    "Config", "ConfigError", "ContractError", "FormatError", "Image", "ImagePair",
    "MtifError", "SchemaError", "elementwise_max", "load_config", "load_image",
    "save_image", "to_grayscale",
    "CropWindow", "EnrichedPairSet", "SaliencyMap", "center_periphery_partition",
    "compute_saliency", "load_saliency_map", "select_center_window",
    "GrainedDescriptions", "PrecomputedTextEncoder", "StubTextEncoder",
    "TextFeatureSet", "encode_text", "load_description_cache",
    "save_description_cache", "save_embeddings", "stub_embed",
]
