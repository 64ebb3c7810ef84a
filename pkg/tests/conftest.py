import numpy as np
import pytest

from ffcn.config import RunConfig
from ffcn.gradcheck import tiny_config
from ffcn.synth import SynthDataset, make_splits


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config(RunConfig())


@pytest.fixture(scope="session")
def tiny_data(tiny_cfg):
    ds = SynthDataset.build(tiny_cfg)
    splits = make_splits(ds.classes, "longtail", tiny_cfg.seed, cfg=tiny_cfg)
    return ds, splits, ds.render(splits.manifests["train"]), ds.render(splits.manifests["val"])


@pytest.fixture(scope="session")
def default_ds():
    return SynthDataset.build(RunConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(0)


CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture(scope="session")
def criteria(request):
    """Collects one verdict line per acceptance criterion for the terminal summary."""
    return request.config.stash[CRITERIA]


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(lines):
        terminalreporter.write_line(lines[num])
