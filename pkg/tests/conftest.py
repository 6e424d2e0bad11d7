import time

import pytest

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def grating_corpus(tmp_path_factory):
    """8 identities x 20 impressions, last impression of each held out as probe."""
    from latentprint.synthetic import make_corpus

    return make_corpus(tmp_path_factory.mktemp("corpus"), n_identities=8, per_identity=20, seed=0)


@pytest.fixture(scope="session")
def grating_inputs(grating_corpus):
    """Enhanced 64 px model inputs for every sample in the corpus."""
    from latentprint.config import PreprocessConfig
    from latentprint.pipeline import load_model_inputs
    from latentprint.protocol import load_manifest

    records = load_manifest(grating_corpus)
    loaded = load_model_inputs(records, grating_corpus, 64, PreprocessConfig())
    assert not loaded.excluded
    return loaded


class _Criterion:
    def __init__(self, lines, name, limit_s):
        self.lines, self.name, self.limit_s = lines, name, limit_s
        self.detail = ""

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.start
        over = self.limit_s is not None and elapsed > self.limit_s
        ok = exc_type is None and not over
        reason = self.detail
        if exc_type is not None:
            reason = f"{exc_type.__name__}: {exc}".splitlines()[0]
        elif over:
            reason = f"took {elapsed:.1f}s, limit {self.limit_s:.0f}s"
        line = f"{'PASS' if ok else 'FAIL'}  {self.name}  ({elapsed:.1f}s)  {reason}".rstrip()
        self.lines.append(line)
        print(line)
        if over and exc_type is None:
            raise AssertionError(reason)
        return False


@pytest.fixture
def criterion(request):
    """Context manager factory: ``with criterion(name, limit_s) as c: ...`` records one result line."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])
    return lambda name, limit_s=None: _Criterion(lines, name, limit_s)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
