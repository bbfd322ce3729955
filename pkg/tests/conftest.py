from pathlib import Path

import pytest
from hypothesis import settings

settings.register_profile("repo", deadline=None, max_examples=100)
settings.load_profile("repo")

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def scenarios_dir():
    return ROOT / "scenarios"
