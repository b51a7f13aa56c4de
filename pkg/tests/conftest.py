import secrets

import pytest

from cusense.plane import DataType, RegionSpec, create_plane


@pytest.fixture
def plane_name():
    return f"cusense-test-{secrets.token_hex(6)}"


@pytest.fixture
def small_plane(plane_name):
    """HEST-only plane with 4 slots of 4 KiB, 2 ms TTI."""
    handle = create_plane(
        [RegionSpec(DataType.HEST, slots_per_buffer=4, slot_payload_bytes=4096)],
        tti_period_ns=2_000_000,
        name=plane_name,
    )
    yield handle
    handle.close()
    try:
        handle.unlink()
    except FileNotFoundError:
        pass
