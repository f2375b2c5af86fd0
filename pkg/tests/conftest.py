import pytest


@pytest.fixture(autouse=True)
def lut_cache(tmp_path_factory, monkeypatch):
    """Keep the baked BRDF lookup out of the user's home directory."""
    monkeypatch.setenv("SHADOWSPLAT_CACHE_DIR", str(tmp_path_factory.getbasetemp() / "cache"))
