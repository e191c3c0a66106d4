import pytest
import torch

from indivaid.data import scan_dataset
from indivaid.encoders import EncoderConfig, ToyEncoders
from indivaid.synthetic import make_synthetic_dataset

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def dataset_root(tmp_path_factory):
    """5 identities: 25 train, 10 gallery, 10 query images."""
    root = tmp_path_factory.mktemp("synthetic") / "data"
    make_synthetic_dataset(
        root, num_identities=5, train_per_id=5, gallery_per_id=2, query_per_id=2, seed=11
    )
    return root


@pytest.fixture(scope="session")
def scanned(dataset_root):
    return scan_dataset(dataset_root)


@pytest.fixture(scope="session")
def overfit_root(tmp_path_factory):
    """8 identities x 12 images, rendered noisy enough to confuse an untrained encoder."""
    root = tmp_path_factory.mktemp("overfit") / "data"
    make_synthetic_dataset(
        root, num_identities=8, train_per_id=8, gallery_per_id=2, query_per_id=2,
        seed=0, noise=0.16, brightness=(0.45, 1.55), max_shift_frac=0.1,
    )
    return root


@pytest.fixture
def toy_encoders():
    return ToyEncoders(EncoderConfig())


@pytest.fixture
def micro_config():
    """Small dims and resolution so finite-difference sweeps stay fast."""
    return EncoderConfig(
        embed_dim=8, word_dim=8, image_width=16, context_length=8,
        vocab_size=64, resolution=32,
    )
