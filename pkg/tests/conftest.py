import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


from gradprom.engine import Batch, Models, init_state  # noqa: E402
from gradprom.models import classifier_config, enhancer_config, segmenter_config  # noqa: E402
from gradprom.synthdata import make_dataset, parse_degrade  # noqa: E402


def small_models(recognizer="classifier", task="denoise", channels=4):
    enh = enhancer_config(task, channels=channels, factor=2)
    recs = []
    if recognizer in ("classifier", "both"):
        recs.append(classifier_config(3, channels=channels))
    if recognizer in ("segmenter", "both"):
        recs.append(segmenter_config(2, channels=channels))
    return Models(enh, tuple(recs))


def small_dataset(n_train=16, n_eval=4, degrade="gaussian(0.2)", seed=0):
    return make_dataset(seed, n_train, n_eval, degradation=parse_degrade(degrade))


def batch_from(dataset, start=0, size=4):
    sl = slice(start, start + size)
    return Batch(dataset.degraded["train"][sl], dataset.clean["train"][sl],
                 dataset.labels["train"][sl], dataset.masks["train"][sl].astype(np.int64))


@pytest.fixture
def setup():
    models = small_models()
    data = small_dataset()
    return models, data, init_state(models, 0), batch_from(data)
