from __future__ import annotations

from datetime import date
from pathlib import Path

import pytest

from autobox.auditcore import ModuleMetadata

DATA_DIR = Path(__file__).parent / "data"

# Frozen digests, computed once with coreutils sha256sum over the documented
# canonical byte strings (see data/hash_vectors.txt for the exact bytes).
ECU_PAYLOAD_DIGEST = "9e5afc1b1d8f50e68e76a2eb327f224826e2711d7ad13d4c3bde4096ef44e0c7"
BCM_PAYLOAD_DIGEST = "53bf23f8cb0ea5f2f4f38c6c0e5b5d2a2d35b382b173f748210fdf1a5f13558f"
ECU_REFLASH_T42_KEY = "091bc9fcaefbe87950dd741e28734f9a76a59b7eb748a7bbf88841520eeb18fe"
TWO_SERIAL_VEHICLE_KEY = "98b43d1ea0b23f6430dd654c9c311de75e1e7c3587a5f48ce5f0cb33842f7b42"
EMPTY_SHA256 = "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"

VIN = "1HGBH41JXMN109186"


def make_metadata(module_id: str = "ECU", **overrides) -> ModuleMetadata:
    base = dict(
        module_id=module_id,
        design_date=date(2019, 3, 14),
        manufacture_date=date(2019, 8, 2),
        manufacture_location="Stuttgart",
        supplier_id="SUP-042",
        production_lot="LOT-7731",
        software_version="1.4.2",
        variant_code="EU-BASE",
        serial_number=f"{module_id}-SN-0001",
        vin=VIN,
    )
    base.update(overrides)
    return ModuleMetadata(**base)


@pytest.fixture
def ecu_metadata() -> ModuleMetadata:
    return make_metadata("ECU")


@pytest.fixture
def bcm_metadata() -> ModuleMetadata:
    return make_metadata(
        "BCM",
        design_date=date(2018, 11, 5),
        manufacture_date=date(2019, 7, 21),
        manufacture_location="Ostrava",
        supplier_id="SUP-017",
        production_lot="LOT-0088",
        software_version="3.0.1",
        serial_number="BCM-SN-0002",
    )


JUNKYARD_VIN = "JH4TB2H26CC000000"
FLEET_VIN_2 = "2HGBH41JXMN109187"


def make_vehicle_config(vin: str = VIN, **overrides):
    """Four-module desk vehicle: ECU+BCM data devices, TCM hosts parity."""
    from autobox.vehiclesim import VehicleConfig

    modules = tuple(
        make_metadata(
            module_id,
            serial_number=f"{module_id}-SN-{vin[-4:]}",
            vin=vin,
        )
        for module_id in ("ECU", "BCM", "TCM", "HeadUnit")
    )
    base = dict(
        vin=vin,
        variant_code="EU-BASE",
        modules=modules,
        dht_store_limit_bytes=2048,
        parity_clusters=(("ECU", "BCM", "TCM"),),
        capture_interval_s=3600,
        mileage_stride_km=1000,
    )
    base.update(overrides)
    return VehicleConfig(**base)


def make_scenario(events=(), duration_s=3600, library=None, vin=VIN, **config_overrides):
    from autobox.vehiclesim import Scenario, VehicleLane

    return Scenario(
        scenario_id="test",
        seed=0,
        duration_s=duration_s,
        lanes=(
            VehicleLane(
                config=make_vehicle_config(vin=vin, **config_overrides),
                events=tuple(events),
            ),
        ),
        approved_library=library,
    )


def seeded_library(scenario):
    """Golden-run seeding: execute without verdicts, collect the digests."""
    from dataclasses import replace

    from autobox.vehiclesim import run_scenario

    builder = replace(scenario, approved_library=None)
    result = run_scenario(builder)
    return result.observed_library()
