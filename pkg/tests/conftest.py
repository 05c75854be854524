import pytest

from learned_isp import raw


@pytest.fixture(scope="session")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scenes")
    raw.write_synthetic_scenes(d, 3, (320, 320), seed=1)
    return d


@pytest.fixture(scope="session")
def tiny_data(scene_dir, tmp_path_factory):
    """Eight 32x32 training pairs and four validation pairs."""
    root = tmp_path_factory.mktemp("tiny")
    tr = raw.make_dataset(scene_dir, root / "train", 8, patch=32, seed=0)
    va = raw.make_dataset(scene_dir, root / "val", 4, patch=32, seed=1)
    return tr, va


# filled by test_acceptance.py, one line per criterion
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
