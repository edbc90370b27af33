import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from carime.data import preprocess  # noqa: E402
from carime.synthetic import make_synthetic_dataset  # noqa: E402
from carime.trainer import TrainConfig  # noqa: E402


@pytest.fixture(scope="session")
def raw_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("raw")
    make_synthetic_dataset(root, n_identities=4, photos_per_id=3, caris_per_id=3, seed=0)
    return root


@pytest.fixture(scope="session")
def data_root(raw_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("pre")
    preprocess(raw_root, out, size=64)
    return out


@pytest.fixture
def tiny_cfg():
    return TrainConfig(
        image_size=64, batch_size=4, width=8, max_width=32, styler_width=8, disc_width=8,
        styler_mlp_dim=32, styler_res_blocks=2, warper_iters=20, warper_decay_iters=20,
        styler_iters=10, styler_decay_iters=10, checkpoint_every=10,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[k])
