import pytest

from tvnerf.synthworld import DatasetSpec, emit_dataset, preset

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six 16x16 views (two held out) of the warm-sphere scene."""
    root = tmp_path_factory.mktemp("tiny")
    emit_dataset(preset("warm-sphere-night"), DatasetSpec(views=6, heldout=2, size=16, nq=64), root)
    return root


@pytest.fixture(scope="session")
def criterion(request):
    """``criterion(name, passed, detail)`` records one acceptance line for the summary."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(name, passed, detail):
        results[name] = (bool(passed), detail)
        print(f"{name} {'PASS' if passed else 'FAIL'} {detail}")
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(results):
        passed, detail = results[name]
        terminalreporter.write_line(f"{name} {'PASS' if passed else 'FAIL'}  {detail}")
