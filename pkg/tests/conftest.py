import numpy as np
import pytest

from patchforge.datasets import SyntheticSpec, extract_corpus, generate_synthetic, stratified_split
from patchforge.forest import ForestConfig
from patchforge.pipeline import LoopConfig, PipelineConfig
from patchforge.plsa import EmConfig

TINY_SPEC = SyntheticSpec(num_classes=2, images_per_class=10, image_size=24, contrast=0.15, seed=0)


def tiny_config(**loop) -> PipelineConfig:
    loop = {"max_feedback_iters": 2, "shift_tol": 1e-9, "validation_fraction": 0.3, **loop}
    return PipelineConfig(
        forest=ForestConfig(num_trees=3, max_leaves=8, candidate_thresholds=5),
        n_topics=3,
        em=EmConfig(max_iters=100),
        loop=LoopConfig(**loop),
    )


@pytest.fixture(scope="session")
def tiny():
    """Two-class 24x24 stripe corpus: 20 images, 25 patches each."""
    sc = generate_synthetic(TINY_SPEC)
    patches = extract_corpus(sc.images)
    train, test, labeled = stratified_split(sc.corpus.labels, 0.3, 1.0, 0)
    return sc, patches, train, test, labeled


def state_bytes(state) -> bytes:
    parts = [state.plsa.word_given_topic, state.plsa.topic_given_doc, state.image_labels.probs, state.patch_labels.probs]
    parts += [t.feature for t in state.forest.trees] + [t.threshold for t in state.forest.trees]
    return b"".join(np.ascontiguousarray(p).tobytes() for p in parts)


ACCEPTANCE: list[str] = []


def record_criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
