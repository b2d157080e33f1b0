import os
import tempfile

import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=200, deadline=None)
settings.load_profile("default")

_RESULTS = []


@pytest.fixture(scope="session")
def accept_ctx():
    """Shared acceptance context; ``SUP_ACCEPT_DIR`` reuses a previous run's artifacts."""
    from sup_kit.acceptance import Context

    workdir = os.environ.get("SUP_ACCEPT_DIR") or tempfile.mkdtemp(prefix="sup-accept-")
    return Context(workdir)


@pytest.fixture(scope="session")
def pipeline_dir(accept_ctx):
    """The default pipeline, trained and evaluated once per session."""
    return accept_ctx.pipeline()


@pytest.fixture(scope="session")
def record_result():
    return _RESULTS.append


def pytest_terminal_summary(terminalreporter):
    if _RESULTS:
        terminalreporter.section("acceptance criteria")
        for r in sorted(_RESULTS, key=lambda r: r.number):
            terminalreporter.write_line(r.line())
