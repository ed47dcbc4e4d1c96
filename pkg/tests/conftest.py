import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from idea import synthetic


@pytest.fixture(scope="session")
def synthetic_corpus(tmp_path_factory):
    """Clean 3-class keyword corpus: 300 train / 150 test."""
    root = tmp_path_factory.mktemp("corpus")
    train_csv = str(root / "train.csv")
    test_csv = str(root / "test.csv")
    rows, names = synthetic.generate_rows(300, 3, seed=100)
    synthetic.write_csv(rows, train_csv)
    rows_t, _ = synthetic.generate_rows(150, 3, seed=200)
    synthetic.write_csv(rows_t, test_csv)
    return {"train": train_csv, "test": test_csv, "labels": names}


@pytest.fixture(scope="session")
def noisy_corpus(tmp_path_factory):
    """Harder corpus with shared vocabulary and cross-class keyword noise."""
    root = tmp_path_factory.mktemp("noisy")
    train_csv = str(root / "train.csv")
    test_csv = str(root / "test.csv")
    gen = dict(n_classes=3, overlap=2, confusion=0.45, label_token_rate=0.9)
    rows, names = synthetic.generate_rows(600, seed=300, **gen)
    synthetic.write_csv(rows, train_csv)
    rows_t, _ = synthetic.generate_rows(300, seed=301, **gen)
    synthetic.write_csv(rows_t, test_csv)
    return {"train": train_csv, "test": test_csv, "labels": names}


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
