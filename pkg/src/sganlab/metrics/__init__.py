from .attention import gradient_attention, label_share
from .seg import SegReport, confusion_matrix, iu_from_confusion, label_iu, pairwise_iu, seg_eval, torch_segmenter
from .shape import (FEATURE_NAMES, export_features, fool_rate, read_features, shape_features,
                    zernike_magnitudes, zernike_moments)
from .stats import GlobalStats, chi_squared, chi_squared_table, global_stats, perimeter, roundness
from .support import SupportEstimate, count_duplicates, plot_min_distance, support_size

__all__ = [
    "FEATURE_NAMES", "GlobalStats", "SegReport", "SupportEstimate", "chi_squared", "chi_squared_table",
    "confusion_matrix", "count_duplicates", "export_features", "fool_rate", "global_stats",
    "gradient_attention", "iu_from_confusion", "label_iu", "label_share", "pairwise_iu", "perimeter",
    "plot_min_distance", "read_features", "roundness", "seg_eval", "shape_features", "support_size",
    "torch_segmenter", "zernike_magnitudes", "zernike_moments",
]
