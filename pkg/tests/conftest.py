import pytest

from acceptance_log import RESULTS
from owdcl.benchmark import DatasetSpec
from owdcl.encoder import PretrainConfig
from pipelines import Pipeline


@pytest.fixture(scope="session")
def pipeline():
    return Pipeline(DatasetSpec())


@pytest.fixture(scope="session")
def small_pipeline():
    spec = DatasetSpec(num_source_classes=3, num_strong_classes=2, samples_per_class=60, target_size=256,
                       height=8, width=8, seed=3)
    pipe = Pipeline(spec, PretrainConfig(hidden=16, feature_dim=8, epochs=20))
    pipe.batch_size = 8
    return pipe


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(RESULTS):
        passed, detail = RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}")
