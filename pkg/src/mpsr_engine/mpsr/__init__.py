from .pyramid import PYRAMID_SIDES, ObjectPyramid, PyramidScaleSet, build_object_pyramid
from .selection import (
    LEVEL_TABLE,
    LevelAssignment,
    RefinementTargets,
    anchor_match_on_pyramids,
    assign_levels,
    refinement_targets,
    select_roi_refinement,
    select_rpn_positives,
)

__all__ = [
    "PYRAMID_SIDES", "ObjectPyramid", "PyramidScaleSet", "build_object_pyramid",
    "LEVEL_TABLE", "LevelAssignment", "RefinementTargets", "anchor_match_on_pyramids",
    "assign_levels", "refinement_targets", "select_roi_refinement", "select_rpn_positives",
]
