import numpy as np
import pytest


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)

from stan.dataio import SyntheticSpec, generate_synthetic, load_manifest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def easy_dataset(tmp_path_factory):
    """Small well-separated synthetic set (s=0): 4 known x 16 train samples."""
    out = tmp_path_factory.mktemp("easy_data")
    spec = SyntheticSpec(
        k_known=4, k_unknown=4, per_class=16, image_side=32,
        inter_class_similarity=0.0, seed=7,
    )
    return load_manifest(generate_synthetic(spec, str(out)))


TINY_BACKBONE = {
    "image_size": 16,
    "patch_size": 2,
    "stage_channels": [2, 4, 8, 16],
    "stage_depths": [1, 1, 1, 1],
    "window_size": 2,
    "num_heads": [1, 1, 2, 2],
    "num_classes": 3,
}
