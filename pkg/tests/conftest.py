import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from fmisynth.phantom import PhantomSpec, generate_case  # noqa: E402


@pytest.fixture(scope="session")
def small_case():
    return generate_case(PhantomSpec(seed=3))


@pytest.fixture(scope="session")
def large_case():
    return generate_case(PhantomSpec(shape=(64, 64, 32), seed=5))
