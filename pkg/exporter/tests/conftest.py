import pytest

from kvexport import make_toy


@pytest.fixture(scope="session")
def toy_model(tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "toy"
    make_toy(str(path), seed=7)
    return str(path)
