import os

import pytest

from synthetic_home import SynthConfig, generate_synthetic_trace


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MASKGUARD_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="desk-scale experiment; set MASKGUARD_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def small_home():
    """12 h synthetic home: 8 binary + 2 numeric sensors, D = 24."""
    return generate_synthetic_trace(SynthConfig(duration_hours=12, seed=3))
