import pytest

from hmpe import set_verbosity
from hmpe.utils.config import PipelineConfig
from hmpe.utils.numerics import Rng


@pytest.fixture(autouse=True)
def quiet_logger():
    set_verbosity(verbose=False)
    yield
    set_verbosity(verbose=True)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_config():
    """Shrunk pipeline config that still exercises every stage."""
    return PipelineConfig(height=8, width=8, channels=4, depth=16, heads=4, scale=2, top_m=20)
