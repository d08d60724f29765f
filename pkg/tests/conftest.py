import pytest

from lesionlab.manifest import stratified_split
from lesionlab.synth import SynthSpec, generate_synthetic_corpus

_acceptance_results = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if item.module.__name__.endswith("test_acceptance") and report.when == "call":
        doc = (item.function.__doc__ or item.name).strip().splitlines()[0]
        _acceptance_results.append((report.outcome, doc))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.section("acceptance criteria")
    for outcome, doc in _acceptance_results:
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {doc}")


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """7 classes x 4 images, unsplit."""
    root = tmp_path_factory.mktemp("small_corpus")
    return generate_synthetic_corpus(SynthSpec(class_counts={i: 4 for i in range(7)}, seed=3), root)


@pytest.fixture(scope="session")
def small_split(small_corpus):
    return stratified_split(small_corpus, 0.25, seed=0)
