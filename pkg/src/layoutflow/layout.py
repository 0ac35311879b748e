"""Instance layouts: a set of boxes, each carrying text ids or an image crop."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox

MAX_INSTANCES = 24


@dataclass(frozen=True)
class TextContent:
    """Content described by vocabulary ids (at least one)."""

    ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.ids) == 0:
            raise ValueError("text content needs at least one id")


@dataclass(frozen=True)
class ImageContent:
    """Content given as an RGB crop, float32 (3, h, w) in [0, 1]."""

    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[0] != 3 or px.shape[1] < 1 or px.shape[2] < 1:
            raise ValueError(f"image content must be (3, h, w), got {px.shape}")


@dataclass(frozen=True)
class Instance:
    content: TextContent | ImageContent
    bbox: BBox


@dataclass(frozen=True)
class Layout:
    instances: tuple[Instance, ...] = ()
    max_instances: int = MAX_INSTANCES

    def __post_init__(self):
        if len(self.instances) > self.max_instances:
            raise ValueError(
                f"layout holds {len(self.instances)} instances, cap is {self.max_instances}"
            )

    def __len__(self) -> int:
        return len(self.instances)

    def __iter__(self):
        return iter(self.instances)


EMPTY_LAYOUT = Layout()
