import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from topdropnet import synthdata


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """8 ids x 2 cams x 2 images at 32x16: enough for fast train smoke."""
    root = tmp_path_factory.mktemp("tiny_ds")
    synthdata.generate_dataset(
        root, num_ids=8, num_cams=2, imgs_per_id_per_cam=2, occlusion_prob=0.2, size=(32, 16), seed=7
    )
    return synthdata.load_dataset(root)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds_dir")
    synthdata.generate_dataset(
        root, num_ids=8, num_cams=2, imgs_per_id_per_cam=3, occlusion_prob=0.0, size=(32, 16), seed=3
    )
    return root
