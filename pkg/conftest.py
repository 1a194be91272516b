import os

import pytest
from hypothesis import HealthCheck, settings as hsettings

# hypothesis examples share the autouse path fixture
hsettings.register_profile("chronoweft", suppress_health_check=[HealthCheck.function_scoped_fixture])
hsettings.load_profile("chronoweft")


def pytest_collection_modifyitems(config, items):
    if os.getenv("CHRONOWEFT_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="desk-scale run; set CHRONOWEFT_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(autouse=True)
def isolated_outputs(tmp_path, monkeypatch):
    """Keep the run ledger and default output root inside the test's tmp dir"""
    from chronoweft import settings

    monkeypatch.setattr(settings, "LEDGER_FILE", tmp_path / "ledger.db")
    monkeypatch.setattr(settings, "OUTPUT_ROOT", tmp_path / "runs")
