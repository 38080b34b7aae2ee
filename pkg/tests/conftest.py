import pytest

from protoprop.synthdata import SplitSpec, default_vocab, generate_dataset, save_dataset


@pytest.fixture(scope="session")
def tiny_dataset():
    """3 colors x 2 shapes, 2 unseen compositions, a handful of images each."""
    return generate_dataset(default_vocab(3, 2), SplitSpec(3, 7, seed=1, n_train=6, n_val=4, n_test=4))


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory, tiny_dataset):
    return save_dataset(tiny_dataset, tmp_path_factory.mktemp("data") / "tiny")


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    Call ``criterion(number, title)`` first, then ``.detail(text)`` as facts
    accumulate; the line is written when the test finishes, failed or not.
    """
    lines = request.config.stash.setdefault(ACCEPTANCE, {})
    state = {}

    class Recorder:
        def __call__(self, number, title):
            state.update(number=number, title=title, detail=[])
            return self

        def detail(self, text):
            state["detail"].append(text)

    yield Recorder()
    if state:
        failed = getattr(request.node, "_rep_call_failed", True)
        status = "FAIL" if failed else "PASS"
        line = f"criterion {state['number']}: {status}  {state['title']}"
        if state["detail"]:
            line += "  [" + "; ".join(state["detail"]) + "]"
        lines[(state["number"], request.node.name)] = line
        print("\n" + line)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    if rep.when == "call":
        item._rep_call_failed = rep.failed


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
