"""Random-forest visual codebooks re-learned from pLSA soft patch labels."""

from .bow import BowMatrix, build_bow, column_normalize
from .datasets import Corpus, SyntheticSpec, generate_synthetic, load_folder_corpus, patch_label_purity
from .features import GridConfig, PatchDescriptor, PatchSet, extract_dense, load_descriptors, resize_max_edge
from .forest import ForestCodebook, ForestConfig, information_gain, leaf_assignments, quantize, shannon_entropy, train_forest
from .pipeline import (
    LoopConfig,
    PipelineConfig,
    classify,
    derive_thresholds,
    feedback_step,
    initial_learning,
    run_experiment,
    run_loop,
    run_ssl,
)
from .plsa import EmConfig, PlsaModel, fold_in, topic_posterior, train_plsa
from .softlabel import (
    class_topic_distribution,
    classify_soft_label,
    dominant_topics,
    feedback_histograms,
    image_soft_labels,
    patch_soft_labels,
    patch_topic_distribution,
)

__version__ = "0.1.0"
