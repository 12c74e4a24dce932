import pytest

from vinil.config import ExperimentConfig


def small_config_dict(out_dir, **overrides):
    """A seconds-long experiment: 4 categories, 8x8 images, 2 tasks."""
    d = {
        "data": {"n_categories": 4, "instances_per_category": 2, "views_per_instance": 8, "image_size": 8},
        "encoder": {"hidden": [16], "embed_dim": 6, "projector_hidden": 12, "projector_dim": 8},
        "hyper": {"epochs_per_session": 2, "batch_size": 8, "base_lr": 0.01},
        "protocol": {"n_tasks": 2, "categories_per_task": 2, "k_nn": 3},
        "output_dir": str(out_dir),
    }
    for key, value in overrides.items():
        section, _, leaf = key.partition(".")
        if leaf:
            d.setdefault(section, {})[leaf] = value
        else:
            d[section] = value
    return d


@pytest.fixture
def small_config(tmp_path):
    def make(**overrides):
        return ExperimentConfig.from_dict(small_config_dict(tmp_path / "run", **overrides))
    return make


_ACCEPTANCE: dict[int, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_c" not in report.nodeid:
        return
    n = int(report.nodeid.split("::test_c")[1][:2])
    if report.when == "call" or report.outcome == "failed":
        if _ACCEPTANCE.get(n) != "FAIL":
            _ACCEPTANCE[n] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    from test_acceptance import CRITERIA
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"criterion {n:2d}: {_ACCEPTANCE[n]}  {CRITERIA[n]}")
