"""Point-cloud classification and part segmentation with learned critical points."""
from .geometry import (AugmentParams, PointCloud, augment, farthest_point_sampling, knn,
                       normalize_unit_sphere)
from .network import (ClassifierConfig, SegmenterConfig, classify_forward, idw_interpolate,
                      init_params, segment_forward, vote_predict)

__all__ = [
    "AugmentParams", "PointCloud", "augment", "farthest_point_sampling", "knn",
    "normalize_unit_sphere", "ClassifierConfig", "SegmenterConfig", "classify_forward",
    "idw_interpolate", "init_params", "segment_forward", "vote_predict",
]
