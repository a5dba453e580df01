import os
import warnings

import pytest

from clipreid.config import Config
from clipreid.data import SyntheticSpec, generate_synthetic, load_dataset
from clipreid.training import build_model

os.environ.setdefault("HYPOTHESIS_PROFILE", "default")
warnings.filterwarnings("ignore", message=".*enable_nested_tensor.*")

TINY_SPEC = dict(n_train_ids=4, n_test_ids=3, images_per_id=6, n_cameras=2, image_hw=(16, 16),
                 n_pretrain_ids=4, seed=7)

TINY_OVERRIDES = {
    "model.patch": 4, "model.stride": 4, "model.width": 32, "model.heads": 2,
    "model.proj_dim": 16, "text.width": 32, "text.heads": 2,
    "stage0.epochs": 2, "stage0.batch": 8,
    "stage1.epochs": 3, "stage1.batch": 8,
    "stage2.epochs": 2, "stage2.P": 2, "stage2.K": 2, "stage2.warmup_epochs": 1,
    "stage2.milestones": "1",
}


def tiny_config(**overrides) -> Config:
    cfg = Config()
    for k, v in {**TINY_OVERRIDES, **overrides}.items():
        cfg.set(k, v)
    return cfg


def tiny_model(ds, cfg=None):
    cfg = cfg or tiny_config()
    return build_model(cfg, ds.vocabulary(cfg["text.ctx_len"]), ds.n_train_ids, ds.n_cameras,
                       tuple(ds.meta["spec"]["image_hw"]), ds.kind)


@pytest.fixture(scope="session")
def tiny_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny") / "ds"
    generate_synthetic(SyntheticSpec(**TINY_SPEC), root, ctx_len=16)
    return root


@pytest.fixture(scope="session")
def tiny_ds(tiny_root):
    return load_dataset(tiny_root)


def pytest_terminal_summary(terminalreporter):
    from harness import ACCEPTANCE
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
