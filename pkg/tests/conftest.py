from __future__ import annotations

import pytest

from spectrelab.config import LabConfig


@pytest.fixture
def config() -> LabConfig:
    return LabConfig()


@pytest.fixture
def short_config() -> LabConfig:
    return LabConfig(secret="KEY!")
