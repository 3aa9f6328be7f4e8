"""Summary table of computed trap parameters against published reference values."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping, Sequence

from .analysis import LifetimeFit, NoiseMeasurement
from .pseudo import SecularResult

logger = logging.getLogger(__name__)

ABSENT = "---"


def _num(x: float) -> float:
    """Round to 9 significant digits so reports are byte-stable."""
    return float("%.8e" % x)


def load_reference(path=None) -> dict:
    """Reference table shipped with the package, or a user-supplied copy."""
    if path is None:
        text = resources.files("surftrap").joinpath("data/reference_values.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    return json.loads(text)


@dataclass
class TrapConfigRecord:
    label: str
    rail_spacing: float  # m
    species: str
    drive: str
    voltages: Mapping[str, float] = field(default_factory=dict)
    temperature: str = "300 K"
    secular: SecularResult | Mapping[str, Any] | None = None
    model: str = "bem"
    noise: Sequence[NoiseMeasurement] = ()
    lifetime: LifetimeFit | None = None

    def secular_dict(self) -> dict | None:
        if self.secular is None:
            return None
        return self.secular.to_dict() if isinstance(self.secular, SecularResult) else dict(self.secular)


def _row(quantity: str, unit: str, computed, reference, tol: float | None, kind: str, graded: bool, sigma=None) -> dict:
    row = {"quantity": quantity, "unit": unit, "graded": graded}
    row["computed"] = ABSENT if computed is None else _num(computed)
    row["reference"] = ABSENT if reference is None else _num(reference)
    if sigma is not None:
        row["reference_sigma"] = _num(sigma)
    if computed is None or reference is None:
        row["verdict"] = ABSENT
        return row
    dev = computed - reference
    row["abs_dev"] = _num(dev)
    row["rel_dev"] = _num(dev / reference) if reference else ABSENT
    if kind == "relative":
        ok = abs(dev) <= tol * abs(reference)
    elif kind == "absolute":
        ok = abs(dev) <= tol
    elif kind == "order_of_magnitude":
        ok = computed > 0 and abs(math.log10(computed / reference)) < 1.0
    elif kind == "error_bar":
        ok = abs(dev) <= sigma
    else:
        raise ValueError(f"unknown comparison {kind!r}")
    row["tolerance"] = kind if tol is None else f"{kind} {tol:g}"
    row["verdict"] = ("pass" if ok else "fail") if graded else "info"
    return row


def record_rows(rec: TrapConfigRecord, ref: Mapping[str, Any] | None, tolerances: Mapping[str, float]) -> list[dict]:
    sec = rec.secular_dict()
    ref = ref or {}
    graded = set(ref.get("graded", []))
    rows = []
    freqs = [None] * 3
    if sec:
        f = sec["frequencies_mhz"]
        freqs = list(f.values()) if isinstance(f, Mapping) else list(f)
    ref_f = ref.get("secular_mhz") or [None] * 3
    for name, c, p in zip(("w_x'", "w_y'", "w_z"), freqs, ref_f):
        rows.append(_row(f"secular {name}/2pi", "MHz", c, p, tolerances["frequency_rel"], "relative", "secular" in graded))
    rot = abs(sec["axis_rotation_deg"]) if sec else None
    rows.append(_row("principal axis rotation", "deg", rot, ref.get("rotation_deg"), tolerances["rotation_abs_deg"], "absolute", "rotation" in graded))
    depth = None if not sec or sec.get("trap_depth_ev") is None else 1e3 * sec["trap_depth_ev"]
    mode = ref.get("depth_mode", "relative")
    rows.append(_row("trap depth", "meV", depth, ref.get("trap_depth_mev"), tolerances["depth_rel"] if mode == "relative" else None, mode, "depth" in graded))
    htol = tolerances["height_rel_bem"] if rec.model == "bem" else tolerances["height_rel_analytic"]
    # design height is that of the RF null; DC fields may displace the ion from it
    height = sec["null_position_um"][2] if sec and sec.get("null_position_um") else None
    rows.append(_row("ion height", "um", height, ref.get("ion_height_um"), htol, "relative", "height" in graded))
    hr, nz = ref.get("heating_rate_per_s"), ref.get("noise_1mhz")
    for m in rec.noise:
        rows.append(_row("heating rate", "1/s", m.heating_rate, hr and hr["value"], None, "error_bar", False, hr and hr["sigma"]))
        rows.append(_row("S_E at 1 MHz", "V^2/m^2/Hz", m.s_e_reference, nz and nz["value"], None, "error_bar", "noise" in graded, nz and nz["sigma"]))
    lt = ref.get("lifetime_s")
    if rec.lifetime is not None:
        rows.append(_row("ion lifetime", "s", rec.lifetime.tau, lt and lt["value"], None, "error_bar", False, lt and lt.get("sigma")))
    return rows


def build_report(records: Sequence[TrapConfigRecord], reference: Mapping[str, Any] | None = None) -> dict:
    """Structured comparison document, ordered by record label."""
    reference = load_reference() if reference is None else reference
    labels = [r.label for r in records]
    if len(set(labels)) != len(labels):
        raise ValueError(f"record labels must be unique, got {labels}")
    configs = reference.get("configs", {})
    out = []
    for rec in sorted(records, key=lambda r: r.label):
        ref = configs.get(rec.label)
        if ref is None:
            logger.warning("no reference entry for %r; row emitted without comparison", rec.label)
        out.append(
            {
                "label": rec.label,
                "model": rec.model,
                "species": rec.species,
                "drive": rec.drive,
                "rail_spacing_um": _num(rec.rail_spacing * 1e6),
                "temperature": rec.temperature,
                "voltages": {k: _num(v) for k, v in sorted(rec.voltages.items())},
                "reference_found": ref is not None,
                "rows": record_rows(rec, ref, reference["tolerances"]),
            }
        )
    verdicts = [row["verdict"] for r in out for row in r["rows"]]
    return {
        "reference_version": reference.get("version"),
        "notes": reference.get("notes", {}),
        "records": out,
        "summary": {v: verdicts.count(v) for v in ("pass", "fail", "info", ABSENT)},
    }


def dumps(report: Mapping[str, Any]) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def text_table(report: Mapping[str, Any]) -> str:
    head = ["config", "quantity", "unit", "computed", "reference", "rel dev", "verdict"]
    lines = []
    for rec in report["records"]:
        for row in rec["rows"]:
            rel = row.get("rel_dev", ABSENT)
            rel = f"{100 * rel:+.1f}%" if isinstance(rel, float) else rel
            lines.append([rec["label"], row["quantity"], row["unit"], _cell(row["computed"]), _cell(row["reference"]), rel, row["verdict"]])
    widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    out = [fmt.format(*head), fmt.format(*("-" * w for w in widths))]
    out += [fmt.format(*l) for l in lines]
    return "\n".join(s.rstrip() for s in out) + "\n"
