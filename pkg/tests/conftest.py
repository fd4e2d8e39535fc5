import numpy as np
import pytest

from diffgraph import _kernels_py, kernels
from diffgraph.pipeline import Pipeline
from diffgraph.testbed import Testbed, TestbedSpec
from diffgraph.workflows import build_graph


def kernel_backends():
    out = [pytest.param(_kernels_py, id="python")]
    compiled = kernels.compiled_module()
    if compiled is not None:
        out.append(pytest.param(compiled, id="compiled"))
    return out


@pytest.fixture(params=kernel_backends())
def backend(request):
    return request.param


@pytest.fixture(scope="session")
def testbed():
    return Testbed(TestbedSpec())


@pytest.fixture(scope="session")
def built(testbed):
    return build_graph(testbed, testbed.build_ecosystem())


@pytest.fixture(scope="session")
def small_built(testbed):
    """Four experts, three reference prompts."""
    sources = testbed.build_ecosystem(1, 1, clusters=[0, 1], attributes=[0, 1])
    return build_graph(testbed, sources, n_ref=3, n_candidates=12)


@pytest.fixture()
def pipeline(built, testbed):
    return Pipeline(built.graph, testbed)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance
    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
