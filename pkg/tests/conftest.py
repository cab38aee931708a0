from pathlib import Path

import pytest

from popsim.backend import ScriptedBackend, TemplateStore

DATA = Path(__file__).resolve().parents[1] / "src" / "popsim" / "data"
GOLDEN = DATA / "golden"
FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def templates():
    return TemplateStore.from_file()


@pytest.fixture
def golden_backend(templates):
    return ScriptedBackend.from_file(GOLDEN / "rules.yaml", templates=templates)


@pytest.fixture(scope="session")
def synthetic_bundle(tmp_path_factory):
    """A small prepared 3-domain bundle with enough items per domain for 9 distractors."""
    from popsim.dataset import DatasetSpec, prepare, write_bundle
    from popsim.synthetic import write_synthetic

    root = tmp_path_factory.mktemp("synthetic")
    spec = write_synthetic(root, preset="cross-1", n_users=12, items_per_domain=24,
                           user_sample_size=None)
    return write_bundle(prepare(DatasetSpec.from_file(spec)), root / "bundle")


def scripted(completions, embeddings=(), dimension=4):
    """Scripted backend from inline rules; appends a catch-all echo if missing."""
    rules = list(completions)
    if not any(set(r) <= {"response"} for r in rules):
        rules.append({"response": "ok"})
    return ScriptedBackend.from_dict({"dimension": dimension, "completions": rules,
                                      "embeddings": list(embeddings)})


# --- acceptance summary: one pass/fail line per criterion

_acceptance = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::")[-1]
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        _acceptance[name] = status


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        terminalreporter.write_line(f"{_acceptance[name]:4}  {name}")
