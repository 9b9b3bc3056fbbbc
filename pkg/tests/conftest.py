import numpy as np
import pytest

from gesturenet.dataset import SynthConfig, load_manifest, synth_generate

SYNTH_SEED = 20240611


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """The default synthetic corpus: 10 classes x 14 persons x 10 repetitions."""
    out = tmp_path_factory.mktemp("synth")
    synth_generate(out, SynthConfig(), SYNTH_SEED)
    return out


@pytest.fixture(scope="session")
def synth_samples(synth_dir):
    return load_manifest(synth_dir / "dataset.csv")


@pytest.fixture(scope="session")
def tiny_dir(tmp_path_factory):
    """4 persons x 10 classes x 2 repetitions, for fast end-to-end checks."""
    out = tmp_path_factory.mktemp("tiny")
    synth_generate(out, SynthConfig(persons=4, repetitions=2), 7)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ------------------------------------------------------- acceptance summary

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        report.criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    results = {}
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "criterion", None) is None:
                continue
            entry = results.setdefault(rep.criterion, {"outcomes": [], "details": []})
            entry["outcomes"].append(rep.outcome)
            entry["details"] += [f"{k}={v}" for k, v in rep.user_properties]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), entry in sorted(results.items()):
        outcomes = entry["outcomes"]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        details = f"  [{', '.join(entry['details'])}]" if entry["details"] else ""
        terminalreporter.write_line(f"criterion {number:2d} {verdict}  {title}{details}")
