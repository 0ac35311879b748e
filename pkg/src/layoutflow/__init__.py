"""Layout-conditioned flow-matching image generation at desk scale.

A small diffusion transformer trained on procedurally generated flat-shape
scenes.  Each layout instance (a content description plus a normalized
bounding box) is encoded into one token; during the early, high-noise part
of sampling those tokens steer the image through per-instance cropped
attention whose results are averaged back onto the token grid wherever
instances overlap.
"""

from .assemble import CascadedModel
from .config import (
    DataConfig,
    ModelConfig,
    RunConfig,
    SampleConfig,
    TrainConfig,
    dense_data_config,
    sparse_data_config,
)
from .diffusion import forward_noise, sample, train, training_loss, velocity_target
from .encoder import LayoutEncoder
from .errors import AnnotationError, ConfigError, GenerationError, LayoutFlowError
from .geometry import BBox, bbox_to_crop, dense_sample, density_map, fourier_embed, iou
from .layout import ImageContent, Instance, Layout, TextContent

__version__ = "0.1.0"

__all__ = [
    "AnnotationError",
    "BBox",
    "CascadedModel",
    "ConfigError",
    "DataConfig",
    "GenerationError",
    "ImageContent",
    "Instance",
    "Layout",
    "LayoutEncoder",
    "LayoutFlowError",
    "ModelConfig",
    "RunConfig",
    "SampleConfig",
    "TextContent",
    "TrainConfig",
    "bbox_to_crop",
    "dense_sample",
    "dense_data_config",
    "density_map",
    "forward_noise",
    "fourier_embed",
    "iou",
    "sample",
    "sparse_data_config",
    "train",
    "training_loss",
    "velocity_target",
    "__version__",
]
