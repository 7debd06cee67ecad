import os

import pytest

from pe_evade.corpus import SyntheticCorpusSpec, gen_corpus, load_manifest, read_sample


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """60 files (30 per class), shared by the unit tests."""
    out = str(tmp_path_factory.mktemp("corpus60"))
    gen_corpus(SyntheticCorpusSpec(n_benign=30, n_malicious=30), seed=11, out_dir=out)
    return out


@pytest.fixture(scope="session")
def corpus_files(small_corpus):
    return [read_sample(small_corpus, e) for e in load_manifest(small_corpus)]


@pytest.fixture(scope="session")
def malicious_files(small_corpus):
    return [read_sample(small_corpus, e) for e in load_manifest(small_corpus) if e.label == 1]


# -- acceptance summary -------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): an acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    previous = _CRITERIA.get(number, (title, True))[1]
    _CRITERIA[number] = (title, previous and report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
