import numpy as np
import pytest

from hiddentail import dataprep as D
from hiddentail import model as M
from hiddentail.config import resolve_checkpoint


@pytest.fixture(scope="session")
def trained():
    """The shipped seed-7 checkpoint."""
    return M.load_checkpoint(resolve_checkpoint("builtin:seed7"))


@pytest.fixture(scope="session")
def scene():
    img, desc = D.synthesize_images(1, 0)[0]
    return img, desc


@pytest.fixture(scope="session")
def trained_dataset(trained, scene):
    img, desc = scene
    seed = 1234
    texts = D.generate_prompts(desc, n=60, seed=seed)
    pairs = D.capture_responses(trained, img, [D.prompt_ids(t) for t in texts])
    return D.split_dataset(pairs, seed, img.image_id)


def tiny_dataset(n_opt=2, n_test=2, image_id="img00"):
    """Hand-made pairs for fast attack and harness checks."""
    pairs = []
    for i in range(n_opt + n_test):
        pairs.append(D.PromptResponsePair([M.BOS] + M.encode("q" + "abcd"[i % 4]),
                                          M.encode("xy"[: 1 + i % 2]) + [M.EOS]))
    return D.GuidingDataset(image_id, pairs, list(range(n_opt)),
                            list(range(n_opt, n_opt + n_test)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)
