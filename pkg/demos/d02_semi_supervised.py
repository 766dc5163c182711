"""
Learning with a fraction of the labels
======================================

Only some training images keep their label.  The rest get image soft labels
from pLSA fold-in and contribute to the forest through them.
"""

import numpy as np

from patchforge.datasets import SyntheticSpec, extract_corpus, generate_synthetic, stratified_split
from patchforge.forest import ForestConfig
from patchforge.pipeline import LoopConfig, PipelineConfig, run_experiment

spec = SyntheticSpec(num_classes=3, images_per_class=30, image_size=40, contrast=0.2)
sc = generate_synthetic(spec)
patches = extract_corpus(sc.images)
cfg = PipelineConfig(
    forest=ForestConfig(num_trees=6, max_leaves=20, candidate_thresholds=10),
    n_topics=4,
    loop=LoopConfig(max_feedback_iters=3),
)

for fraction in (1.0, 0.5, 0.2):
    train, test, labeled = stratified_split(sc.corpus.labels, 0.3, fraction, seed=0)
    res = run_experiment(patches, sc.corpus.labels, spec.num_classes, train, labeled, test, cfg)
    n_lab = int(np.sum(labeled & train))
    acc = res.test.accuracy(sc.corpus.labels[test])
    print(f"labels {fraction:4.0%} ({n_lab:3d} images): test accuracy {acc:.3f}")
