"""Shared fixtures. BEM solves are cached for the whole session because each
graded solve of the built-in layout takes one to two minutes on one core."""

from __future__ import annotations

import json
from importlib import resources

import numpy as np
import pytest

from surftrap.cli import build_model
from surftrap.constants import UM
from surftrap.fields import analytic_bases
from surftrap.geometry import builtin_smit_layout
from surftrap.pseudo import DriveConfig, IonSpecies, rail_midline


def packaged_config(name: str) -> dict:
    return json.loads(resources.files("surftrap").joinpath("data", name).read_text())


@pytest.fixture(scope="session")
def layout150():
    return builtin_smit_layout(150 * UM)


@pytest.fixture(scope="session")
def analytic150(layout150):
    return analytic_bases(layout150)


@pytest.fixture(scope="session")
def sr88():
    return IonSpecies.from_label("88Sr+")


@pytest.fixture(scope="session")
def mg25():
    return IonSpecies.from_label("25Mg+")


@pytest.fixture(scope="session")
def mit_config():
    return packaged_config("mit_voltages.json")


@pytest.fixture(scope="session")
def michigan_config():
    return packaged_config("michigan_voltages.json")


@pytest.fixture(scope="session")
def mit_drive():
    return DriveConfig.parse("155V@40.6MHz")


class ModelCache:
    """BEM (or analytic) trap models keyed by (spacing_um, slot, site, method)."""

    def __init__(self):
        self._models = {}

    def get(self, spacing_um: float, site: str = "3", slot: bool = False, method: str = "bem"):
        key = (float(spacing_um), bool(slot), str(site), method)
        if key not in self._models:
            layout = builtin_smit_layout(spacing_um * UM, with_slot=slot)
            x = layout.electrode_center(f"{site}T")[0]
            self._models[key] = build_model(layout, method, x)
        return self._models[key]

    @staticmethod
    def seed(model, site: str, spacing_um: float) -> np.ndarray:
        x = model.layout.electrode_center(f"{site}T")[0]
        return np.array([x, rail_midline(model.layout), 0.5 * spacing_um * UM])


@pytest.fixture(scope="session")
def models():
    return ModelCache()


# one verdict line per acceptance criterion, echoed in the terminal summary
CRITERIA_LINES: list[str] = []


@pytest.fixture(scope="session")
def criterion_log():
    def log(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        CRITERIA_LINES.append(line)
        print(line)
        return ok

    return log


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
