"""Command-line entry point.

Every subcommand accepts ``--out DIR`` and ``--dry-run``; a dry run checks
all inputs and stops before any computation. Options may also come from a
JSON ``--config`` file whose keys are the long option names (with
underscores); explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass
from importlib import resources
from typing import Any, Mapping

import numpy as np

from . import __version__
from .constants import MHZ, TWO_PI, UM

logger = logging.getLogger("surftrap")

DEFAULT_SEED = 20080101
DEFAULT_MESH_EDGE_UM = 5.0
PACKAGED_CONFIGS = {"mit": "mit_voltages.json", "michigan": "michigan_voltages.json", "nist_load": "nist_load.json", "nist_trap": "nist_trap.json"}


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------- shared model setup


def read_config(ref: str) -> dict:
    """Load a trap-configuration JSON by path or by packaged name (``mit``, ...)."""
    if os.path.exists(ref):
        with open(ref) as fh:
            doc = json.load(fh)
    elif ref in PACKAGED_CONFIGS:
        doc = json.loads(resources.files("surftrap").joinpath("data", PACKAGED_CONFIGS[ref]).read_text())
    else:
        raise CliError(f"configuration {ref!r} is neither a file nor one of {sorted(PACKAGED_CONFIGS)}")
    if not isinstance(doc, dict):
        raise CliError(f"configuration {ref!r} must be a JSON object")
    if "voltages" not in doc and all(isinstance(v, (int, float)) for v in doc.values()):
        doc = {"voltages": doc}
    return doc


@dataclass
class TrapModel:
    layout: Any
    bases: dict
    rf: dict
    dc: dict
    method: str
    panels: int = 0

    def site_x(self, site: str) -> float:
        name = site if site in self.layout else f"{site}T"
        return self.layout.electrode_center(name)[0]


def build_model(layout, method: str = "bem", focus_x: float | None = None, mesh_edge: float = DEFAULT_MESH_EDGE_UM * UM) -> TrapModel:
    """Unit-voltage bases for every electrode of ``layout``.

    The BEM mesh is graded: ``mesh_edge`` near ``focus_x`` growing to 200 um
    far away.
    """
    from .fields import analytic_bases

    if method == "analytic":
        bases = analytic_bases(layout)
        panels = 0
    elif method == "bem":
        from .bem import solve_bem
        from .geometry import discretize

        fx = 0.5 * sum(layout.dc_span()) if focus_x is None else focus_x
        mesh = discretize(layout, mesh_edge, focus=(fx, 0.0), growth=0.3, max_edge=200 * UM, fine_radius=(100 * UM, 100 * UM))
        bases = solve_bem(mesh).bases()
        panels = len(mesh)
    else:
        raise CliError(f"unknown field model {method!r}")
    rf = {n: bases[n] for n in layout.rf_names}
    dc = {n: bases[n] for n in layout.dc_names if n in bases}
    return TrapModel(layout, bases, rf, dc, method, panels)


def _layout_from_args(args):
    from .geometry import builtin_smit_layout, load_layout

    if getattr(args, "layout", None):
        with open(args.layout) as fh:
            return load_layout(fh.read())
    return builtin_smit_layout(args.builtin * UM, with_slot=bool(args.slot))


def _trap_inputs(args):
    """Merge a trap-config file with explicit flags; flags take precedence."""
    from .pseudo import DriveConfig, IonSpecies

    cfg = read_config(args.voltages) if getattr(args, "voltages", None) else {}
    if getattr(args, "builtin", None) is None and not getattr(args, "layout", None):
        args.builtin = float(cfg.get("rail_spacing_um", 150.0))
        if args.slot is None:
            args.slot = bool(cfg.get("loading_slot", False))
    species = IonSpecies.from_label(args.species or cfg.get("species") or "88Sr+")
    offset = args.rf_offset if args.rf_offset is not None else float(cfg.get("rf_dc_offset_V", 0.0))
    drive_text = args.rf or cfg.get("drive")
    if not drive_text:
        raise CliError("no RF drive given (use --rf '<amp>V@<freq>MHz')")
    drive = DriveConfig.parse(drive_text, offset)
    site = args.site or str(cfg.get("trap_site", "3"))
    voltages = cfg.get("voltages")
    axial = args.axial if getattr(args, "axial", None) is not None else cfg.get("axial_mhz")
    label = getattr(args, "label", None) or cfg.get("label")
    return species, drive, site, voltages, axial, label


# ---------------------------------------------------------------- output helpers


def _fmt(x):
    if isinstance(x, float):
        return float("%.8e" % x) if math.isfinite(x) else None
    if isinstance(x, (np.floating,)):
        return _fmt(float(x))
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return [_fmt(v) for v in x.tolist()]
    if isinstance(x, Mapping):
        return {str(k): _fmt(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_fmt(v) for v in x]
    return x


def _write(args, name: str, text: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, name)
    with open(path, "w", newline="") as fh:
        fh.write(text)
    return path


def _write_json(args, name: str, doc) -> str:
    return _write(args, name, json.dumps(_fmt(doc), indent=2, sort_keys=True) + "\n")


def _dry(args, what: str) -> int:
    print(f"dry run: {args.command} inputs valid ({what}); nothing computed")
    return 0


def _seed_point(model: TrapModel, x: float, spacing: float):
    from .pseudo import rail_midline

    return np.array([x, rail_midline(model.layout), 0.5 * spacing])


def _rail_spacing(layout) -> float:
    rails = [layout.electrode_center(n)[1] for n in layout.rf_names]
    if len(rails) >= 2:
        return float(max(rails) - min(rails)) - _rail_width(layout)
    return 150 * UM


def _rail_width(layout) -> float:
    n = layout.rf_names[0]
    x1, x2, y1, y2 = layout[n].bounds
    return float(y2 - y1)


# ---------------------------------------------------------------- subcommands


def cmd_layout(args) -> int:
    layout = _layout_from_args(args)
    if args.dry_run:
        return _dry(args, f"{len(layout.names)} electrodes")
    path = _write(args, "layout.json", layout.dumps())
    print(f"layout: {len(layout.names)} electrodes ({len(layout.rf_names)} rf) -> {path}")
    return 0


def _spacing(args, layout) -> float:
    return args.builtin * UM if getattr(args, "builtin", None) else _rail_spacing(layout)


def cmd_solve(args) -> int:
    from .fields import sample_grid
    from .pseudo import find_rf_null

    cfg = read_config(args.voltages) if args.voltages else {}
    if args.builtin is None and not args.layout:
        args.builtin = float(cfg.get("rail_spacing_um", 150.0))
    layout = _layout_from_args(args)
    spacing = _spacing(args, layout)
    site = args.site or str(cfg.get("trap_site", "3"))
    x = layout.electrode_center(site if site in layout else f"{site}T")[0]
    v = cfg.get("voltages") or {n: 1.0 for n in layout.rf_names}
    half = 0.5 * args.box * UM
    box = ((x - half, x + half), (-half, half), (max(1 * UM, 0.5 * spacing - half), 0.5 * spacing + half))
    if args.dry_run:
        return _dry(args, f"{args.model} model, grid {args.resolution}")
    model = build_model(layout, args.model, x, args.mesh_edge * UM)
    null = find_rf_null(sum_rf(model), _seed_point(model, x, spacing))
    path = _write(args, "fieldmap.csv", sample_grid(model.bases, v, box, args.resolution))
    print(f"solve: {args.model} bases for {len(model.bases)} electrodes, rf null at height {null[2] / UM:.2f} um -> {path}")
    return 0


def sum_rf(model: TrapModel):
    from .fields import combine

    return combine([model.rf[n] for n in sorted(model.rf)], [1.0] * len(model.rf), "rf")


def cmd_characterize(args) -> int:
    from .control import solve_well
    from .pseudo import characterize
    from .report import TrapConfigRecord, build_report, dumps, text_table

    species, drive, site, voltages, axial, label = _trap_inputs(args)
    layout = _layout_from_args(args)
    spacing = _spacing(args, layout)
    x = layout.electrode_center(site if site in layout else f"{site}T")[0]
    if voltages is None and axial is None:
        raise CliError("need either a voltage table or --axial to solve for one")
    if args.dry_run:
        return _dry(args, f"{species.label}, {drive.label()}, site {site}, {args.model} model")
    model = build_model(layout, args.model, x, args.mesh_edge * UM)
    seed = _seed_point(model, x, spacing)
    well = None
    if voltages is None:
        well = solve_well(model.dc, model.rf, drive, species, x, float(axial) * MHZ, bounds=15.0, seed=seed, span=layout.dc_span())
        voltages = dict(well.voltages)
    res = characterize(model.rf, model.bases, drive, voltages, species, seed, spacing, depth=not args.no_depth)
    doc = {"config": {"label": label, "species": species.label, "drive": drive.label(), "rf_dc_offset_V": drive.rf_dc_offset,
                      "model": model.method, "panels": model.panels, "site": site, "voltages": dict(sorted(voltages.items()))},
           "secular": res.to_dict()}  # fmt: skip
    if well is not None:
        doc["solved_well"] = {"target_axial_mhz": float(axial), "residual": well.residual}
    path = _write_json(args, "secular.json", doc)
    f = res.frequencies_mhz
    depth = "n/a" if res.trap_depth_ev is None else f"{1e3 * res.trap_depth_ev:.1f} meV"
    print(f"characterize: {label or 'config'} f = ({f[0]:.3f}, {f[1]:.3f}, {f[2]:.3f}) MHz, "
          f"rotation {res.axis_rotation_deg:+.1f} deg, depth {depth} -> {path}")  # fmt: skip
    if label:
        rec = TrapConfigRecord(label, spacing, species.label, drive.label(), voltages, secular=res, model=model.method)
        rep = build_report([rec])
        _write(args, "report.json", dumps(rep))
        _write(args, "report.txt", text_table(rep))
    return 0


def cmd_compensate(args) -> int:
    from .control import StrayField, compensate_stray_field, micromotion_amplitude
    from .pseudo import characterize, find_rf_null

    species, drive, site, voltages, axial, label = _trap_inputs(args)
    stray = StrayField(tuple(args.stray), provenance="measured" if args.measured else "assumed")
    layout = _layout_from_args(args)
    spacing = _spacing(args, layout)
    x = layout.electrode_center(site if site in layout else f"{site}T")[0]
    if args.dry_run:
        return _dry(args, f"stray field {args.stray} V/m")
    model = build_model(layout, args.model, x, args.mesh_edge * UM)
    r0 = find_rf_null(sum_rf(model), _seed_point(model, x, spacing))
    comp = compensate_stray_field(model.dc, stray, r0, bounds=args.bound)
    doc = {"rf_null_um": r0 / UM, "stray_field_Vpm": list(stray.vector), "provenance": stray.provenance,
           "deltas": dict(comp.deltas.items()), "residual_Vpm": comp.residual, "active_bounds": list(comp.active_bounds),
           "feasible": comp.feasible}  # fmt: skip
    if voltages:
        res = characterize(model.rf, model.bases, drive, voltages, species, _seed_point(model, x, spacing), spacing, depth=False)
        doc["micromotion_uncompensated"] = micromotion_amplitude(model.rf, drive, species, stray, res).to_dict()
    path = _write_json(args, "compensation.json", doc)
    print(f"compensate: residual {comp.residual_norm:.3g} V/m, feasible={comp.feasible} -> {path}")
    return 0


def cmd_shuttle(args) -> int:
    from .control import shuttle_waveform

    species, drive, site, _, axial, _ = _trap_inputs(args)
    layout = _layout_from_args(args)
    spacing = _spacing(args, layout)

    def where(s):
        return layout.electrode_center(s if s in layout else f"{s}T")[0]

    x0, x1 = where(args.start), where(args.end)
    if args.dry_run:
        return _dry(args, f"{args.frames} frames from x = {x0 / UM:.0f} um to {x1 / UM:.0f} um")
    model = build_model(layout, args.model, 0.5 * (x0 + x1), args.mesh_edge * UM)
    wf = shuttle_waveform(
        model.dc, model.rf, drive, species, x0, x1, args.frames, float(axial or 1.0) * MHZ,
        duration=args.duration * 1e-6, bounds=15.0, seed=_seed_point(model, x0, spacing), span=layout.dc_span(),
    )  # fmt: skip
    path = _write(args, "waveform.csv", wf.to_csv())
    print(f"shuttle: {len(wf)} frames, max step {wf.max_step():.3g} V -> {path}")
    return 0


def cmd_modes(args) -> int:
    from .ions import ZigzagInstability, equilibrium_positions, normal_modes, radial_modes
    from .pseudo import IonSpecies

    species = IonSpecies.from_label(args.species or "88Sr+")
    if args.ions < 1 or args.axial <= 0:
        raise CliError("need --ions >= 1 and --axial > 0")
    if args.dry_run:
        return _dry(args, f"{args.ions} x {species.label}")
    chain = equilibrium_positions(args.ions, TWO_PI * args.axial * MHZ, species)
    modes = normal_modes(chain)
    doc = {"species": species.label, "n_ions": args.ions, "axial_mhz": args.axial, "length_unit_um": chain.length_unit / UM,
           "positions_um": chain.positions / UM, "positions_scaled": chain.scaled,
           "axial_modes": {"frequencies_rel": modes.frequencies, "frequencies_mhz": modes.frequencies_hz / MHZ,
                           "vectors": modes.vectors.T}}  # fmt: skip
    radial = []
    for f in args.radial or []:
        try:
            m = radial_modes(chain, f * MHZ)[0]
            radial.append({"trap_mhz": f, "stable": True, "frequencies_mhz": m.frequencies_hz / MHZ})
        except ZigzagInstability as exc:
            radial.append({"trap_mhz": f, "stable": False, "beta": exc.beta, "critical_beta": exc.critical_beta})
    doc["radial_modes"] = radial
    path = _write_json(args, "modes.json", doc)
    rel = ", ".join(f"{x:.6f}" for x in modes.frequencies)
    print(f"modes: {args.ions} ions, axial modes ({rel}) w_z -> {path}")
    return 0


def cmd_dynamics(args) -> int:
    from .ions import integrate_trajectory, mode_frequencies_from_trajectory
    from .pseudo import characterize

    species, drive, site, voltages, axial, _ = _trap_inputs(args)
    if voltages is None:
        raise CliError("dynamics needs a voltage table (--voltages)")
    layout = _layout_from_args(args)
    spacing = _spacing(args, layout)
    x = layout.electrode_center(site if site in layout else f"{site}T")[0]
    if args.dry_run:
        return _dry(args, f"{args.periods} secular periods, {args.model} model")
    model = build_model(layout, args.model, x, args.mesh_edge * UM)
    res = characterize(model.rf, model.bases, drive, voltages, species, _seed_point(model, x, spacing), spacing, depth=False)
    r0 = res.minimum + res.axes @ (np.full(3, args.kick) * UM)
    tr = integrate_trajectory(model.rf, model.bases, drive, voltages, species, r0, duration=args.periods / min(res.frequencies))
    doc = {"predicted_mhz": res.frequencies_mhz, "escaped": tr.escaped, "method": tr.method, "step_s": tr.step,
           "steps": len(tr) - 1, "diagnostics": tr.diagnostics, "mathieu_q": res.mathieu_q}  # fmt: skip
    if not tr.escaped:
        f = mode_frequencies_from_trajectory(tr, res.axes, res.frequencies)
        doc["measured_mhz"] = f / MHZ
        doc["relative_error"] = f / res.frequencies - 1.0
    path = _write(args, "trajectory.csv", tr.to_csv())
    _write_json(args, "dynamics.json", doc)
    meas = ", ".join(f"{v:.4f}" for v in doc.get("measured_mhz", []))
    print(f"dynamics: {len(tr) - 1} steps, escaped={tr.escaped}, spectral peaks ({meas}) MHz -> {path}")
    return 0


def cmd_thermometry(args) -> int:
    from .analysis import NoiseMeasurement, read_sidebands, thermometry
    from .pseudo import IonSpecies

    pairs = read_sidebands(args.sidebands)
    species = IonSpecies.from_label(args.species) if args.species else None
    if args.dry_run:
        return _dry(args, f"{len(pairs)} sideband pairs")
    nb, fit = thermometry(pairs)
    doc = {"nbar": [{"t_s": p.t, "nbar": n.value, "sigma": n.sigma, "ratio": n.ratio} for p, n in zip(pairs, nb)],
           "heating_rate_per_s": fit.rate, "heating_rate_sigma": fit.rate_sigma, "intercept": fit.intercept}  # fmt: skip
    if species and args.mode_frequency:
        m = NoiseMeasurement(max(fit.rate, 0.0), fit.rate_sigma, args.mode_frequency * MHZ, species)
        doc["s_e"] = m.s_e
        doc["s_e_1mhz"] = m.s_e_reference
        doc["s_e_1mhz_sigma"] = m.s_e_reference_sigma
    path = _write_json(args, "thermometry.json", doc)
    print(f"thermometry: heating rate {fit.rate:.6g} +/- {fit.rate_sigma:.2g} quanta/s -> {path}")
    return 0


def cmd_lifetime(args) -> int:
    from .analysis import dark_lifetime_mixture_fit, lifetime_fit_exponential, read_lifetimes, read_survival

    if not args.lifetimes and not args.survival:
        raise CliError("give --lifetimes and/or --survival")
    samples = read_lifetimes(args.lifetimes) if args.lifetimes else None
    survival = read_survival(args.survival) if args.survival else None
    if args.dry_run:
        return _dry(args, "lifetime inputs")
    doc, msg = {}, []
    if samples is not None:
        f = lifetime_fit_exponential(samples)
        doc["exponential"] = {"tau_s": f.tau, "sigma_s": f.sigma, "uncensored": f.n_uncensored, "total": f.n_total}
        msg.append(f"tau = {f.tau:.4g} +/- {f.sigma:.2g} s")
    if survival is not None:
        m = dark_lifetime_mixture_fit(*survival)
        doc["dark_mixture"] = m.to_dict()
        msg.append(f"dark survival prefers {m.preferred}")
    path = _write_json(args, "lifetime.json", doc)
    print(f"lifetime: {'; '.join(msg)} -> {path}")
    return 0


def _parse_record(spec: str):
    parts = spec.split(":")
    if len(parts) not in (2, 3):
        raise CliError(f"--record expects LABEL:SECULAR_JSON[:MODEL], got {spec!r}")
    return parts[0], parts[1], parts[2] if len(parts) == 3 else None


def cmd_report(args) -> int:
    from .analysis import NoiseMeasurement
    from .pseudo import IonSpecies
    from .report import TrapConfigRecord, build_report, dumps, load_reference, text_table

    ref = load_reference(args.reference)
    recs = {}
    for spec in args.record or []:
        label, path, model = _parse_record(spec)
        with open(path) as fh:
            doc = json.load(fh)
        cfg = doc.get("config", {})
        r = ref["configs"].get(label, {})
        recs[label] = TrapConfigRecord(
            label, float(r.get("rail_spacing_um", 0.0)) * UM, cfg.get("species", r.get("species", "?")),
            cfg.get("drive", r.get("drive", "?")), cfg.get("voltages", {}), secular=doc.get("secular", doc),
            model=model or cfg.get("model", "bem"),
        )  # fmt: skip
    noise = {}
    for spec in args.noise or []:
        try:
            label, rate, sigma, fmhz = spec.split(":")
            sp = IonSpecies.from_label(ref["configs"][label]["species"])
            noise.setdefault(label, []).append(NoiseMeasurement(float(rate), float(sigma), float(fmhz) * MHZ, sp))
        except (ValueError, KeyError) as exc:
            raise CliError(f"--noise expects LABEL:RATE:SIGMA:FREQ_MHZ with a known label, got {spec!r} ({exc})") from None
    for label, ms in noise.items():
        if label not in recs:
            c = ref["configs"][label]
            recs[label] = TrapConfigRecord(label, c["rail_spacing_um"] * UM, c["species"], c["drive"])
        recs[label].noise = ms
    if args.dry_run:
        return _dry(args, f"{len(recs)} records")
    rep = build_report(list(recs.values()), ref)
    path = _write(args, "report.json", dumps(rep))
    _write(args, "report.txt", text_table(rep))
    s = rep["summary"]
    print(f"report: {len(rep['records'])} records, {s['pass']} pass, {s['fail']} fail -> {path}")
    return 0


# ---------------------------------------------------------------- parser


def _add_common(p):
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("--dry-run", action="store_true", help="validate inputs only")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"root random seed (default {DEFAULT_SEED})")


def _add_layout(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--builtin", type=float, metavar="SPACING_UM", help="built-in layout with this RF rail spacing")
    g.add_argument("--layout", metavar="FILE", help="layout JSON document")
    p.add_argument("--slot", action="store_true", default=None, help="add the through-wafer loading slot")
    p.add_argument("--model", choices=("bem", "analytic"), default="bem", help="field model (default bem)")
    p.add_argument("--mesh-edge", type=float, default=DEFAULT_MESH_EDGE_UM, metavar="UM", help="finest BEM panel edge")


def _add_trap(p):
    p.add_argument("--voltages", metavar="FILE|NAME", help=f"trap configuration JSON or one of {sorted(PACKAGED_CONFIGS)}")
    p.add_argument("--species", help="ion species, e.g. 88Sr+")
    p.add_argument("--rf", metavar="AMP_V@FREQ_MHz", help="RF drive, e.g. 155V@40.6MHz")
    p.add_argument("--rf-offset", type=float, metavar="V", help="DC offset carried by the RF rails")
    p.add_argument("--site", help="trap site (electrode pair number or electrode name)")
    p.add_argument("--axial", type=float, metavar="MHZ", help="target axial frequency when solving for voltages")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="surftrap", description="Surface-electrode ion trap modeling and analysis.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("--config", metavar="FILE", help="JSON file of option defaults")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("layout", help="write an electrode layout document")
    _add_common(p)
    _add_layout(p)
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("solve", help="solve unit-voltage bases and sample a field map")
    _add_common(p)
    _add_layout(p)
    p.add_argument("--voltages", metavar="FILE|NAME")
    p.add_argument("--site")
    p.add_argument("--box", type=float, default=100.0, metavar="UM", help="edge of the cubic sample box")
    p.add_argument("--resolution", type=int, nargs=3, default=(5, 5, 5), metavar="N")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("characterize", help="secular frequencies, principal axes and trap depth")
    _add_common(p)
    _add_layout(p)
    _add_trap(p)
    p.add_argument("--label", help="configuration label for the comparison report, e.g. 'MIT I'")
    p.add_argument("--no-depth", action="store_true", help="skip the trap-depth search")
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("compensate", help="DC corrections nulling a stray field at the RF null")
    _add_common(p)
    _add_layout(p)
    _add_trap(p)
    p.add_argument("--stray", type=float, nargs=3, required=True, metavar=("EX", "EY", "EZ"), help="stray field in V/m")
    p.add_argument("--measured", action="store_true", help="mark the stray field as measured")
    p.add_argument("--bound", type=float, default=15.0, metavar="V", help="per-electrode correction bound")
    p.set_defaults(func=cmd_compensate)

    p = sub.add_parser("shuttle", help="transport waveform between two sites")
    _add_common(p)
    _add_layout(p)
    _add_trap(p)
    p.add_argument("--start", required=True, help="start site")
    p.add_argument("--end", required=True, help="end site")
    p.add_argument("--frames", type=int, default=21)
    p.add_argument("--duration", type=float, default=100.0, metavar="US")
    p.set_defaults(func=cmd_shuttle)

    p = sub.add_parser("modes", help="ion-chain equilibrium and normal modes")
    _add_common(p)
    p.add_argument("--ions", type=int, default=3)
    p.add_argument("--axial", type=float, default=0.54, metavar="MHZ")
    p.add_argument("--radial", type=float, nargs="*", metavar="MHZ")
    p.add_argument("--species")
    p.set_defaults(func=cmd_modes)

    p = sub.add_parser("dynamics", help="integrate the full RF equation of motion")
    _add_common(p)
    _add_layout(p)
    _add_trap(p)
    p.set_defaults(model="analytic")
    p.add_argument("--kick", type=float, default=0.3, metavar="UM", help="initial displacement along each principal axis")
    p.add_argument("--periods", type=float, default=40.0, help="duration in periods of the slowest secular mode")
    p.set_defaults(func=cmd_dynamics)

    p = sub.add_parser("thermometry", help="sideband n-bar and heating-rate fit")
    _add_common(p)
    p.add_argument("--sidebands", required=True, metavar="CSV")
    p.add_argument("--species")
    p.add_argument("--mode-frequency", type=float, metavar="MHZ", help="mode frequency for the field-noise conversion")
    p.set_defaults(func=cmd_thermometry)

    p = sub.add_parser("lifetime", help="ion lifetime fits")
    _add_common(p)
    p.add_argument("--lifetimes", metavar="CSV")
    p.add_argument("--survival", metavar="CSV")
    p.set_defaults(func=cmd_lifetime)

    p = sub.add_parser("report", help="comparison table against published values")
    _add_common(p)
    p.add_argument("--record", action="append", metavar="LABEL:SECULAR_JSON[:MODEL]")
    p.add_argument("--noise", action="append", metavar="LABEL:RATE:SIGMA:FREQ_MHZ")
    p.add_argument("--reference", metavar="FILE", help="alternative reference-values JSON")
    p.set_defaults(func=cmd_report)
    return ap


def _apply_config(ap: argparse.ArgumentParser, argv) -> argparse.Namespace:
    args = ap.parse_args(argv)
    if args.config and args.command:
        with open(args.config) as fh:
            cfg = json.load(fh)
        sub = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction)).choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise CliError(f"config file has unknown keys {unknown}")
        sub.set_defaults(**cfg)
        args = ap.parse_args(argv)
    return args


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = _apply_config(ap, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (CliError, OSError, ValueError) as exc:
        print(f"error [cli]: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        ap.print_usage(sys.stderr)
        print("error [cli]: a subcommand is required", file=sys.stderr)
        return 2
    try:
        return int(args.func(args) or 0)
    except Exception as exc:  # surface module errors with context, never a traceback
        module = type(exc).__module__.rsplit(".", 1)[-1]
        if module in ("builtins", "cli"):
            module = "cli"
        logger.debug("failure", exc_info=True)
        print(f"error [{module}] in {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
