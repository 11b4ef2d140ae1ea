"""pointcount: joint object counting and pointer localization.

Two pipelines over a small from-scratch conv classifier: count-then-point
(bounded count head, then Gaussian-mixture ellipse pointers) and
point-then-count (class-signature heatmap pruning, then density-peak
clustering that yields count and box pointers simultaneously). Ships with
a stacked-digit scene generator for controlled experiments.
"""

__version__ = "0.1.0"

from .errors import DataError, NumericError
from .grids import (
    BBox,
    Ellipse,
    Heatmap,
    bilinear_resize,
    channel_stack,
    global_avg_pool,
    global_max_pool,
    l2_normalize,
    normalize_subtract_scaled_mean,
    upscale_heatmap,
)
from .cluster import (
    DensityPeaksResult,
    GmmModel,
    WeightedPoints,
    cluster_pointers,
    density_peaks,
    gmm_fit,
    gmm_pointers,
    heatmap_to_points,
)
from .counthead import CountLabel, LinearSvmModel, extract_count_features, saturate_count, svm_predict, svm_train
from .lego import (
    ConstructionRule,
    LegoClassSpec,
    LegoSample,
    Scene,
    add_background,
    compose_object,
    count_combinations,
    gen_classification_set,
    gen_scene,
    gen_scene_set,
    glyph_digit_store,
    make_ruleset,
    mnist_digit_store,
)
from .net import Network, TrainConfig, backward, build_network, load_network, save_network, train
from .pipelines import PncOutput, load_results, run_c2p, run_p2c, save_results
from .signatures import (
    FeatureSelection,
    SignatureDictionary,
    build_dictionary,
    feature_selected_heatmap,
    load_dictionary,
    save_dictionary,
    top_features,
)
from .evaluation import (
    CountReport,
    PointingReport,
    containment_ratio,
    count_accuracy,
    pointing_accuracy,
    render_overlay,
)
