import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def tiny_acm_path():
    return FIXTURES / "tiny_acm"


@pytest.fixture
def tiny_acm(tiny_acm_path):
    from meow.graph import load_graph

    return load_graph(tiny_acm_path)
