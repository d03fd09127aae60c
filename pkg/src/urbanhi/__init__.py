"""Heat Index reconstruction, extreme-aware downscaling and SHAP/ALE attribution on gridded data."""

__version__ = "0.1.0"

from .grid import FeatureStack, Grid, GridHeader, read_grid, write_grid
from .heat_index import heat_index_f, heat_index_grid, seasonal_mam_aggregate
from .trees import fit_gbm_quantile, fit_random_forest
from .downscale import evaluate, predict_ensemble, train_year
from .explain_shap import compress_background, explain_region, pairwise_joint_summary, tree_shap_interventional
from .explain_ale import ale_1d, ale_2d, h2_interaction, select_strongest_pair
from .stats import block_bootstrap, effect_sizes, ks_two_sample, linear_trend
