"""
Where does each class live inside an image?
===========================================

Patch soft labels p(c|x,d) arranged on the extraction grid, compared against
the synthetic object mask.  Writes PGM maps into ./soft_label_maps.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from patchforge.datasets import SyntheticSpec, extract_corpus, generate_synthetic
from patchforge.forest import ForestConfig
from patchforge.pipeline import LoopConfig, PipelineConfig, TrainingSet, initial_learning
from patchforge.softlabel import label_grid

spec = SyntheticSpec(num_classes=2, images_per_class=20, image_size=48, background_fraction=0.5)
sc = generate_synthetic(spec)
patches = extract_corpus(sc.images)
data = TrainingSet(patches, sc.corpus.labels, spec.num_classes)
cfg = PipelineConfig(forest=ForestConfig(num_trees=5, max_leaves=16), n_topics=3, loop=LoopConfig())
state = initial_learning(data, cfg)

doc = 0
rows = np.flatnonzero(patches.image_ids == doc)
lg = label_grid(state.patch_labels.probs[rows], patches.positions[rows])  # (patches, classes)
label = sc.corpus.labels[doc]
print("image", doc, "class", label, "grid", lg.grid.shape[1:])
print(np.round(lg.grid[label], 2))

# object patches should carry more of their own class than background patches
truth = sc.patch_ground_truth(patches, 8)[rows]
own = state.patch_labels.probs[rows, label]
print("mean p(own class | patch): object", own[truth].mean().round(3), "background", own[~truth].mean().round(3))

out = Path("soft_label_maps")
out.mkdir(exist_ok=True)
for m in range(spec.num_classes):
    img = np.kron(lg.grid[m], np.ones((8, 8)))
    Image.fromarray(np.rint(255 * img).astype(np.uint8)).save(out / f"doc{doc}_class{m}.pgm")
Image.fromarray(np.rint(255 * sc.object_masks[doc]).astype(np.uint8)).save(out / f"doc{doc}_mask.pgm")
print("maps written to", out.resolve())
