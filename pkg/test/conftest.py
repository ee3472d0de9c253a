import pytest

from ppi.panel import generate_synthetic_panel


@pytest.fixture
def synthetic_panel():
    return generate_synthetic_panel(4, 8, 8, seed=7)
