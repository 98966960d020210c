import pytest

from fogda.scenes import FogDataset, SceneSpec, synthesize_dataset

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdicts where capture cannot touch them."""
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance summary")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small four-split dataset shared by evaluation and training tests."""
    root = tmp_path_factory.mktemp("tiny") / "data"
    spec = SceneSpec(
        counts={"train_source": 6, "train_target": 6, "test_target": 3, "test_clear": 3},
        seed=123,
    )
    synthesize_dataset(spec, root)
    return FogDataset(root)
