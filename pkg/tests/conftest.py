import pytest

from hormlab.analysis.frames import euclidean, grushin, heisenberg


@pytest.fixture(scope="session")
def heis():
    return heisenberg()


@pytest.fixture(scope="session")
def grush():
    return grushin()


@pytest.fixture(scope="session")
def plane():
    return euclidean(2)


@pytest.fixture(scope="session")
def line():
    return euclidean(1)


@pytest.fixture
def output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("HORMLAB_OUTPUT_ROOT", str(tmp_path))
    return tmp_path
