import pytest

from nclab.randmat import RngStream


@pytest.fixture
def stream():
    return RngStream(987654321)


@pytest.fixture
def gen(stream):
    return stream.generator()
