import numpy as np
import pytest
import torch

from pssflow.config import ModelConfig

# lines printed by the acceptance suite, replayed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def record(name: str, ok: bool, detail: str = "") -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip())


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(variant="nano", d_model=16, n_blocks=1, d_state=4, corr_dim=16, flow_dim=8,
                       motion_dim=8, motion_feat_dim=16, iters=2, seed=3)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def _make_data(root, arity):
    from pssflow.harness.dataset import DatasetSpec, generate_dataset

    spec = DatasetSpec(size=(32, 32), arity=arity, n_train=6, n_eval=3, max_translation=3.0,
                       max_displacement=3.0, static_fraction=0.2)
    return generate_dataset(spec, 7, root)


@pytest.fixture(scope="session")
def data3(tmp_path_factory):
    return _make_data(tmp_path_factory.mktemp("data3"), 3)


@pytest.fixture(scope="session")
def data5(tmp_path_factory):
    return _make_data(tmp_path_factory.mktemp("data5"), 5)


SMALL_MODEL = {"d_model": 16, "n_blocks": 1, "d_state": 4, "corr_dim": 16, "flow_dim": 8,
               "motion_dim": 8, "motion_feat_dim": 16}
