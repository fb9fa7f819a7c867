"""Diffusion-feature detection: python surface over the C++ core."""

from ._diffdet import (  # noqa: F401
    DdpmModel,
    NoiseSchedule,
    average_precision,
    bilinear_resize,
    class_names,
    corrupt,
    generate_synthetic,
    greedy_nms,
    iou,
    make_schedule,
    q_sample,
    q_step,
)

__all__ = [
    "DdpmModel",
    "NoiseSchedule",
    "average_precision",
    "bilinear_resize",
    "class_names",
    "corrupt",
    "generate_synthetic",
    "greedy_nms",
    "iou",
    "make_schedule",
    "q_sample",
    "q_step",
]
