"""Shared fixtures. Heavy artifacts (synthetic corpus, pre-trained encoders)
are session-scoped so the acceptance suite and unit suites share one build."""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

import torch

# Determinism contract: tests compare runs bit-for-bit on one platform.
torch.use_deterministic_algorithms(True)


@pytest.fixture(scope="session")
def torch_threads():
    torch.set_num_threads(max(1, os.cpu_count() or 1))
    return torch.get_num_threads()
