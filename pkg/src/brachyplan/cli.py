"""Command-line front end for every pipeline step.

One binary, subcommand style. Exit codes: 0 on success, 1 on a domain
failure (e.g. a constraint FAIL under `check --strict`), 2 on usage errors.
`--json` switches stdout to machine-readable JSON with a stable
`"schema": 1` field. Runs with fixed inputs and seeds are bit-reproducible.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dosimetry, igtlink, planning, registration, segmentation, volume
from .mesh import load_stl, make_template, sample_surface, save_stl
from .registration import IcpConfig, LandmarkPairs, RigidTransform
from .service import DEFAULT_DEVICES, build_device_catalog
from .volume import StructureKind, load_volume, save_volume

SCHEMA = 1


class DomainError(Exception):
    """Failure that maps to exit code 1."""


def _print_json(payload: dict) -> None:
    payload = {"schema": SCHEMA, **payload}
    print(json.dumps(payload, sort_keys=True))


def _load_transform(path: str) -> RigidTransform:
    data = json.loads(Path(path).read_text())
    return RigidTransform.from_matrix_rows(data["rows"])


def _save_transform(t: RigidTransform, path: str) -> None:
    Path(path).write_text(json.dumps({"schema": SCHEMA, "rows": t.matrix_rows()}, sort_keys=True))


def _device_for(device_id: str):
    catalog = build_device_catalog()
    if device_id not in catalog:
        raise DomainError(
            f"unknown device {device_id!r}; available: {sorted(catalog)}"
        )
    return catalog[device_id]


def _structure(name: str) -> StructureKind:
    return StructureKind(name)


# --- subcommand implementations ----------------------------------------------


def cmd_convert(args) -> int:
    src = Path(args.input)
    if src.suffix.lower() == ".stl":
        mesh = load_stl(src, permissive=args.permissive)
        if args.inspect or args.output is None:
            info = {
                "kind": "stl",
                "name": mesh.name,
                "triangles": int(mesh.triangle_count),
                "vertices": int(len(mesh.vertices)),
                "flagged_normals": list(mesh.normal_flags),
            }
            _print_json(info) if args.json else print(
                f"STL '{mesh.name}': {mesh.triangle_count} triangles, "
                f"{len(mesh.vertices)} vertices"
            )
            return 0
        save_stl(mesh, args.output, args.format)
        return 0
    vol = load_volume(src)
    info = {
        "kind": "labelmap" if isinstance(vol, volume.LabelMap) else "volume",
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "dtype": str(vol.voxels.dtype),
        "modality": vol.modality_tag,
    }
    if isinstance(vol, volume.LabelMap):
        info["legend"] = {str(code): kind.name for code, kind in sorted(vol.legend.items())}
    if args.output:
        save_volume(vol, args.output)
    if args.json:
        _print_json(info)
    else:
        print(f"{info['kind']} dims={vol.dims} spacing={vol.spacing} modality={vol.modality_tag}")
    return 0


def cmd_register(args) -> int:
    pairs_data = json.loads(Path(args.landmarks).read_text())
    pairs = LandmarkPairs(
        np.asarray(pairs_data["model_points"], dtype=float),
        np.asarray(pairs_data["image_points"], dtype=float),
    )
    fit = registration.fit_landmarks(pairs)
    residual = registration.landmark_residual_rms(fit, pairs)
    result = {"landmark_residual_mm": residual, "rows": fit.matrix_rows()}
    final = fit
    if args.icp:
        if not (args.model_stl and args.target_labels):
            raise DomainError("--icp needs --model-stl and --target-labels")
        mesh = load_stl(args.model_stl)
        labels = load_volume(args.target_labels)
        target = segmentation.surface_cloud(labels, _structure(args.structure))
        cloud = sample_surface(mesh, args.samples, seed=args.seed)
        report = registration.icp_refine(
            cloud, target, fit, IcpConfig(max_iterations=args.max_iterations)
        )
        final = report.transform
        result["rows"] = final.matrix_rows()
        result["icp"] = {
            "iterations_used": report.iterations_used,
            "final_rms_mm": report.final_rms,
            "converged": report.converged,
        }
    if args.output:
        _save_transform(final, args.output)
    if args.json:
        _print_json(result)
    else:
        print(f"residual {residual:.3e} mm" + (f", icp rms {result['icp']['final_rms_mm']:.3e} mm" if args.icp else ""))
    return 0


def cmd_growcut(args) -> int:
    vol = load_volume(args.volume)
    seeds = load_volume(args.seeds)
    if not isinstance(seeds, volume.LabelMap):
        raise DomainError("seeds file must be a label map (has `label` lines)")
    out = segmentation.growcut(vol, seeds, max_passes=args.max_passes)
    save_volume(out, args.output)
    if args.json:
        counts = {
            kind.name: int(np.count_nonzero(out.voxels == code))
            for code, kind in sorted(out.legend.items())
        }
        _print_json({"labels": counts})
    return 0


def cmd_expand_margin(args) -> int:
    labels = load_volume(args.labels)
    if not isinstance(labels, volume.LabelMap):
        raise DomainError("input must be a label map")
    out = segmentation.expand_margin(
        labels, _structure(args.source), _structure(args.target), args.margin_mm
    )
    save_volume(out, args.output)
    if args.json:
        _print_json({
            "target_voxels": int(
                np.count_nonzero(volume.structure_mask(out, _structure(args.target)))
            )
        })
    return 0


def cmd_feasibility(args) -> int:
    labels = load_volume(args.labels)
    device = _device_for(args.device)
    reg = _load_transform(args.transform) if args.transform else RigidTransform.identity()
    report = planning.evaluate_feasibility(device, reg, labels)
    rows = [
        {
            "hole_id": r.hole_id,
            "min_depth_to_target": r.min_depth_to_target,
            "max_useful_depth": r.max_useful_depth,
            "target_path_length": r.target_path_length,
            "oar_hits": [[k.name, d] for k, d in r.oar_hits],
            "feasible": r.feasible,
        }
        for r in report.rows
    ]
    if args.json:
        _print_json({"feasible_hole_count": report.feasible_hole_count, "rows": rows})
    else:
        print(f"{report.feasible_hole_count} of {len(rows)} holes reach the target cleanly")
        for r in rows:
            if r["feasible"]:
                print(f"  {r['hole_id']}: target at {r['min_depth_to_target']:.1f} mm")
    return 0


def _plan_from_file(path: str) -> planning.NeedlePlan:
    data = json.loads(Path(path).read_text())
    device = _device_for(data["device"])
    return planning.plan_from_dict(data, device)


def cmd_dose(args) -> int:
    plan = _plan_from_file(args.plan)
    grid = load_volume(args.volume)
    sources = []
    for needle in plan.active_needles():
        for pos in planning.dwell_positions(plan, needle.hole_id):
            sources.append(dosimetry.DwellSource(position=pos, strength=args.strength, time=1.0))
    dose = dosimetry.accumulate_dose(sources, grid, cutoff_radius=args.cutoff_mm)
    dose32 = volume.ScalarVolume(
        dims=dose.dims, spacing=dose.spacing, origin=dose.origin,
        orientation=dose.orientation,
        voxels=dose.voxels.astype(np.float32), modality_tag="DOSE",
    )
    save_volume(dose32, args.output)
    if args.json:
        _print_json({
            "sources": len(sources),
            "max_dose_gy": float(dose.voxels.max()) if sources else 0.0,
        })
    return 0


def cmd_dvh(args) -> int:
    dose = load_volume(args.dose)
    labels = load_volume(args.labels)
    kind = _structure(args.structure)
    curve = dosimetry.dvh(dose, labels, kind)
    d2 = dosimetry.metric_dxcc(curve, 2.0)
    d01 = dosimetry.metric_dxcc(curve, 0.1)
    out = {
        "structure": kind.name,
        "volume_cc": curve.volume_cc,
        "d90_gy": dosimetry.metric_d_percent(curve, 90.0),
        "d2cc_gy": d2.dose_gy,
        "d2cc_undersized": d2.undersized,
        "d01cc_gy": d01.dose_gy,
        "points": [[d, v, pct] for d, v, pct in curve.points(args.points)],
    }
    if args.json:
        _print_json(out)
    else:
        print(
            f"{kind.name}: volume {curve.volume_cc:.2f} cc, D90 {out['d90_gy']:.2f} Gy, "
            f"D2cc {out['d2cc_gy']:.2f} Gy"
        )
    return 0


def cmd_check(args) -> int:
    dose = load_volume(args.dose)
    labels = load_volume(args.labels)
    rows = dosimetry.check_constraints(
        dose, labels, dosimetry.ConstraintSet(), args.ebrt, args.fractions
    )
    failing = [r for r in rows if r["verdict"] == "fail"]
    if args.json:
        _print_json({"verdicts": rows, "failing": len(failing)})
    else:
        for r in rows:
            value = "n/a" if r["value_gy"] is None else f"{r['value_gy']:.2f} Gy"
            print(f"{r['structure']:>20} {r['metric']:>5} {value:>12} -> {r['verdict']}")
    if args.strict and failing:
        for r in failing:
            print(
                f"FAIL {r['structure']} {r['metric']} {r['value_gy']:.2f} Gy "
                f"(limit {r['limit_gy']})",
                file=sys.stderr,
            )
        return 1
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    app = create_app(ServiceConfig(
        data_dir=args.data_dir,
        igtl_port=args.igtl_port,
        ui_dir=args.ui_dir,
    ))
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def cmd_igtl_send(args) -> int:
    conn = igtlink.IgtlConnection.open(args.host, args.port)
    try:
        if args.transform:
            t = _load_transform(args.transform)
            conn.send(igtlink.Transform(tuple(t.matrix_rows())), args.device)
        elif args.volume:
            vol = load_volume(args.volume)
            igtlink.push_volume(conn, vol, args.device)
        else:
            conn.send(igtlink.Status(code=1, message=args.status or ""), args.device)
    finally:
        conn.close()
    return 0


def cmd_igtl_recv(args) -> int:
    received = []

    def handler(peer, msg):
        received.append(msg)

    server = igtlink.serve(handler, host="0.0.0.0", port=args.port)
    try:
        import time

        deadline = time.time() + args.timeout
        while len(received) < args.count and time.time() < deadline:
            time.sleep(0.05)
    finally:
        server.stop()
    rows = [
        {
            "type": m.header.type_name,
            "device": m.header.device_name,
            "body_size": m.header.body_size,
        }
        for m in received
    ]
    if args.json:
        _print_json({"messages": rows})
    else:
        for r in rows:
            print(f"{r['type']:<12} {r['device']:<20} {r['body_size']} bytes")
    return 0 if len(received) >= args.count else 1


def cmd_workflow(args) -> int:
    """Scripted end-to-end run on the synthetic phantom (no HTTP)."""
    from .phantom import make_phantom
    from .service import CaseManager, ServiceConfig
    from .workflow import WorkflowStage

    phantom = make_phantom(n=args.grid)
    mgr = CaseManager(ServiceConfig(data_dir=args.data_dir))
    case = mgr.create_case(args.case_id)
    mgr.advance(case, WorkflowStage.DIAGNOSIS)
    upload = mgr.upload_volume(case, volume.dump_volume(phantom.volume), "T2")
    mgr.upload_volume(case, volume.dump_volume(phantom.labels), None)
    mgr.set_eligibility(case, True)
    mgr.compare_devices(case, ["template-6x6-10mm", "template-4x4-15mm"])
    mgr.select_device(case, "template-6x6-10mm")
    mgr.set_prescription(case, ebrt_gy=45.0, n_fractions=4)
    mgr.register(
        case,
        phantom.landmarks.model_points.tolist(),
        phantom.landmarks.image_points.tolist(),
        {"enabled": args.icp, "structure": "HR_CTV"} if args.icp else None,
    )
    report = None
    for hole_id in args.needles.split(","):
        report = mgr.edit_plan(case, hole_id.strip(), depth=args.depth_mm, active=True)
    mgr.advance(case, WorkflowStage.INTRAOP)
    mgr.advance(case, WorkflowStage.POSTOP)
    mgr.upload_volume(case, volume.dump_volume(phantom.post_volume), "T2")
    bundle = mgr.followup(case)
    out = {
        "case_id": args.case_id,
        "stage": case.stage.value,
        "volume_advisories": upload["advisories"],
        "verdicts": report["verdicts"] if report else None,
        "bundle": bundle,
    }
    if args.json:
        _print_json(out)
    else:
        print(f"case {args.case_id} finished in stage {case.stage.value}")
        print(f"followup bundle complete: {bundle['complete']}")
        for row in out["verdicts"] or []:
            print(f"  {row['structure']:>20} {row['metric']:>5} -> {row['verdict']}")
    if not bundle["complete"]:
        return 1
    return 0


# --- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brachyplan",
        description="Batch front end for the brachytherapy planning pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert STL formats / inspect SVOL or STL files")
    p.add_argument("input")
    p.add_argument("--out", dest="output")
    p.add_argument("--format", choices=["binary", "ascii"], default="binary")
    p.add_argument("--inspect", action="store_true")
    p.add_argument("--permissive", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("register", help="landmark fit with optional ICP refinement")
    p.add_argument("--landmarks", required=True, help="JSON with model_points/image_points")
    p.add_argument("--icp", action="store_true")
    p.add_argument("--model-stl")
    p.add_argument("--target-labels")
    p.add_argument("--structure", default="HR_CTV")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=20130821)
    p.add_argument("--max-iterations", type=int, default=100)
    p.add_argument("--out", dest="output")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("growcut", help="seeded region segmentation")
    p.add_argument("--volume", required=True)
    p.add_argument("--seeds", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--max-passes", type=int, default=200)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_growcut)

    p = sub.add_parser("expand-margin", help="grow a structure by a Euclidean margin")
    p.add_argument("--labels", required=True)
    p.add_argument("--source", default="HR_CTV")
    p.add_argument("--target", default="IR_CTV")
    p.add_argument("--margin-mm", type=float, default=10.0)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_expand_margin)

    p = sub.add_parser("feasibility", help="per-hole pre-implant evaluation")
    p.add_argument("--labels", required=True)
    p.add_argument("--device", default="template-6x6-10mm")
    p.add_argument("--transform", help="registration JSON (default identity)")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_feasibility)

    p = sub.add_parser("dose", help="accumulate the dose grid for a plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--cutoff-mm", type=float, default=150.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_dose)

    p = sub.add_parser("dvh", help="DVH metrics for one structure")
    p.add_argument("--dose", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--structure", default="HR_CTV")
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_dvh)

    p = sub.add_parser("check", help="constraint verdicts against published tolerances")
    p.add_argument("--dose", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--ebrt", type=float, default=45.0)
    p.add_argument("--fractions", type=int, default=4)
    p.add_argument("--strict", action="store_true", help="exit 1 when any verdict fails")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("serve", help="run the HTTP service (plus wire-protocol listener)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--igtl-port", type=int, default=None)
    p.add_argument("--data-dir", default="./brachyplan-data")
    p.add_argument("--ui-dir", default=None, help="built frontend to mount at /ui")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("igtl-send", help="send one message to a listener")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=igtlink.DEFAULT_PORT)
    p.add_argument("--device", required=True)
    p.add_argument("--transform", help="transform JSON to send")
    p.add_argument("--volume", help="SVOL volume to push")
    p.add_argument("--status", help="status text to send")
    p.set_defaults(func=cmd_igtl_send)

    p = sub.add_parser("igtl-recv", help="listen and print incoming messages")
    p.add_argument("--port", type=int, default=igtlink.DEFAULT_PORT)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_igtl_recv)

    p = sub.add_parser("workflow", help="scripted end-to-end demo on the synthetic phantom")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--case-id", default="demo-1")
    p.add_argument("--grid", type=int, default=64)
    p.add_argument("--needles", default="C3,C4,D3,D4")
    p.add_argument("--depth-mm", type=float, default=60.0)
    p.add_argument("--icp", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_workflow)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DomainError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError, LookupError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
