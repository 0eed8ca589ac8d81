import numpy as np
import pytest
import torch

from dmcl.datasets import SPLIT_LAYOUT, LabelSpaces, Split, ZsdaDataset
from dmcl.model import ArchitectureConfig

from _acceptance_report import ACCEPTANCE_LINES


def synthetic_dataset(n=40, shape=(8, 8), n_toi=3, n_irt=2, seed=0, eval_n=None):
    """A small, learnable four-split task.

    Each class gets a fixed random template; target-domain splits are the
    negative of the source rendering, like the desk G->N setting.
    """
    rng = np.random.default_rng(seed)
    templates = {"TOI": rng.random((n_toi, *shape)), "IRT": rng.random((n_irt, *shape))}
    splits = {}
    for name, (task, domain) in SPLIT_LAYOUT.items():
        size = eval_n if (eval_n is not None and name == "target_toi_eval") else n
        k = n_toi if task.value == "TOI" else n_irt
        labels = np.arange(size) % k
        gray = np.clip(templates[task.value][labels] + 0.1 * rng.standard_normal((size, *shape)), 0, 1)
        if domain == 1:
            gray = 1.0 - gray
        pixels = np.repeat(gray[..., None], 3, axis=-1).astype(np.float32)
        ids = np.array([f"{name}/{i}" for i in range(size)], dtype=object)
        splits[name] = Split(name, pixels, labels, task, domain, ids)
    spaces = LabelSpaces(tuple(f"r{i}" for i in range(n_toi)), tuple(f"i{i}" for i in range(n_irt)))
    return ZsdaDataset(label_spaces=spaces, **splits)


def tiny_arch(n_toi=3, n_irt=2, shape=(8, 8)):
    return ArchitectureConfig(head_class_counts=(n_toi, n_irt), input_shape=(*shape, 3),
                              conv_channels_g=[4, 4, 4], conv_channels_branch=[4, 4, 16])


@pytest.fixture
def dataset():
    return synthetic_dataset()


@pytest.fixture
def arch():
    return tiny_arch()


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
