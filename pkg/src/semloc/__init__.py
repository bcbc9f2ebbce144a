"""Semantic and descriptor-based visual localization in landmark maps."""
from .geometry import CameraModel, Pose, VisibilityWedge, in_wedge, project
from .semantic_map import SemanticMap, build_descriptor, class_prior_from_images, occluded_pmf, potentially_visible_set
from .mapfile import decode_map, encode_map

__version__ = "0.1.0"
