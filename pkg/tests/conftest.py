import pytest

from dircn import phantom


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """14 small slices shared across tests that only need a valid dataset."""
    root = tmp_path_factory.mktemp("data") / "tiny"
    return phantom.build_dataset(root, n_slices=14, grid=24, coils=2,
                                 noise_sigma=0.001, seed=99)
