import numpy as np
import pytest

from inspectlab.corpus import CorpusSpec, LabelClass, generate_corpus


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """A 32px corpus big enough for 10-fold plans and model smoke training."""
    spec = CorpusSpec(
        counts={LabelClass.GOOD: 60, LabelClass.DOUBLE_PRINT: 20, LabelClass.INTERRUPTED_PRINT: 20},
        image_size=32,
        seed=123,
    )
    return generate_corpus(spec, tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def small_images(small_corpus):
    return {s.id: small_corpus.load_image(s) for s in small_corpus.samples}


def pairwise_auc(scores, labels):
    """Brute-force AUC oracle: fraction of correctly ordered pos/neg pairs."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=bool)
    pos = scores[labels]
    neg = scores[~labels]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))
