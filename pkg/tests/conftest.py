import numpy as np
import pytest

from sketchret.synthdata import generate_corpus, load_corpus


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("tiny_corpus")
    generate_corpus(d, seed=11, n_source_ids=12, n_target_train_ids=6,
                    n_target_test_ids=5, photos_per_source_id=3)
    return d


@pytest.fixture()
def tiny_corpus(tiny_corpus_dir):
    # fresh Corpus per test so audit logs and caches do not leak across tests
    return load_corpus(tiny_corpus_dir)


def numerical_gradient(fn, arr, h=1e-5):
    """Central finite differences of a scalar function of one array."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_rel_err(analytic, numeric, floor=1e-6):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))
