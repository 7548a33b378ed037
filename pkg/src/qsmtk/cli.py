"""Command-line interface: ``qsmtk <subcommand> ...``.

Exit codes: 0 success, 2 usage or precondition error, 3 numeric failure
(divergence, rank deficiency, failed demo check), 4 file I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.fft

from . import dipole, inversion, metrics, phantom, qvol, sti
from .dipole import Z_HAT, ForwardOperator, ReconState
from .inversion import DivergenceError
from .qvol import QvolError, Volume, read_qvol, write_qvol
from .sti import RankDeficiencyError
from .volume import Grid3, KernelSymmetryError, patch_split, patch_stitch, plan_patches

log = logging.getLogger("qsmtk")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class CheckFailed(RuntimeError):
    pass


# --------------------------------------------------------------------------
# argument helpers


def _floats(n):
    def parse(text):
        vals = [float(v) for v in text.replace(" ", "").split(",")]
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals
    return parse


def _dims(text):
    vals = [int(v) for v in text.split(",")]
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"dims must be N or NX,NY,NZ, got {text!r}")
    return tuple(vals)


def _voxel(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) == 1:
        vals = vals * 3
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"voxel must be D or DX,DY,DZ, got {text!r}")
    return tuple(vals)


def _fraction(text):
    return Fraction(text).limit_denominator(100)


def _direction(args) -> np.ndarray:
    if getattr(args, "R", None) is not None:
        return sti.h_from_rotation(np.reshape(args.R, (3, 3)))
    H = np.asarray(args.H, dtype=float)
    n = np.linalg.norm(H)
    if n == 0:
        raise ValueError("--H must be nonzero")
    return H / n


def _emit(obj, out: str | None = None):
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def _ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# --------------------------------------------------------------------------
# subcommands


def cmd_phantom(args):
    grid = Grid3(args.dims, args.voxel)
    out = _ensure_dir(args.out_dir)
    written = {}
    if args.kind == "sphere":
        center = tuple(args.center) if args.center else None
        spec = (phantom.SpherePhantom(center, args.radius, args.dchi) if center
                else phantom.SpherePhantom.centered(grid, args.radius, args.dchi))
        H = _direction(args)
        chi = phantom.sphere_chi(grid, spec)
        field = phantom.sphere_field_analytic(grid, spec, H)
        write_qvol(Volume(chi, grid), out / "chi.qvol")
        write_qvol(Volume(field, grid), out / "field_analytic.qvol")
        written = {"chi": str(out / "chi.qvol"), "field_analytic": str(out / "field_analytic.qvol")}
        params = {"center_mm": list(spec.center), "radius_mm": spec.radius,
                  "delta_chi_ppm": spec.delta_chi, "H": H.tolist()}
    else:
        spec = phantom.RandomTensorSpec(args.seed, args.corr_length, args.amplitude, args.anisotropy)
        chi = phantom.random_tensor(grid, spec)
        write_qvol(Volume(chi, grid), out / "chi_tensor.qvol")
        written = {"chi_tensor": str(out / "chi_tensor.qvol")}
        params = {"seed": spec.seed, "correlation_length_mm": spec.correlation_length,
                  "amplitude_ppm": spec.amplitude, "anisotropy": spec.anisotropy}
    print(json.dumps({"kind": args.kind, "dims": list(grid.dims),
                      "voxel_size_mm": list(grid.voxel_size), "files": written, **params}))
    return EXIT_OK


def cmd_forward(args):
    H = _direction(args)
    if args.tensor:
        vol = read_qvol(args.tensor)
        if vol.channels != 6:
            raise ValueError(f"{args.tensor}: --tensor needs a 6-channel volume, got {vol.channels}")
        field = dipole.simulate_field_sti(vol.data, H, vol.grid.voxel_size, pad=args.pad)
    else:
        vol = read_qvol(args.chi33)
        if vol.channels != 1:
            raise ValueError(f"{args.chi33}: --chi33 needs a scalar volume, got {vol.channels} channels")
        vsz = vol.grid.voxel_size
        if args.dbp:
            dbp = read_qvol(args.dbp)
            if dbp.channels != 1 or dbp.grid.dims != vol.grid.dims:
                raise ValueError("--dbp must be a scalar volume on the --chi33 grid")
            if np.abs(H - Z_HAT).max() > 1e-12:
                raise ValueError("the two-channel (chi33, dB') path is laboratory-frame: H must be 0,0,1")
            if args.pad != 1:
                raise ValueError("--pad applies to the tensor and chi33-only paths")
            field = ForwardOperator(vol.grid, H).apply(ReconState(vol.data, dbp.data))
        else:
            field = dipole.simulate_field(vol.data, H, vsz, pad=args.pad)
    write_qvol(Volume(field, vol.grid), args.out)
    if args.manifest:
        mpath = Path(args.manifest)
        entries = json.loads(mpath.read_text()) if mpath.exists() else []
        rel = Path(args.out).resolve()
        try:
            rel = rel.relative_to(mpath.resolve().parent)
        except ValueError:
            pass
        entry = {"field_volume_path": str(rel)}
        if args.R is not None:
            entry["rotation_matrix"] = [float(v) for v in args.R]
        else:
            entry["H_sub"] = H.tolist()
        entries.append(entry)
        mpath.write_text(json.dumps(entries, indent=2) + "\n")
    print(json.dumps({"field": str(args.out), "H": H.tolist()}))
    return EXIT_OK


def _invert_volume(b: np.ndarray, grid: Grid3, H, args) -> tuple[ReconState | np.ndarray, dict]:
    method = args.method
    if method == "tkd":
        chi = inversion.tkd_invert(b, H, args.threshold, grid.voxel_size)
        return chi, {"threshold": args.threshold}
    if method == "pgd":
        steps = None if args.step == "auto" else float(args.step)
        cfg = inversion.SolveConfig(iterations=args.iters, steps=steps,
                                    prox=inversion.parse_prox(args.prox),
                                    lipschitz_iters=args.lipschitz_iters)
        rep = inversion.pgd_solve(b, H, cfg, grid.voxel_size)
        if rep.lipschitz is not None:
            log.info("Lipschitz estimate L = %.6f (13/9 = %.6f)", rep.lipschitz, 13 / 9)
        return rep.state, {"iterations": args.iters, "prox": cfg.prox.describe(), **rep.to_dict()}
    res = inversion.cg_least_squares(b, H, args.max_iter, args.cg_tol, args.lam, grid.voxel_size)
    if not res.converged:
        log.warning("CG did not reach tol %.3g in %d iterations", args.cg_tol, args.max_iter)
    return res.state, {"lam": args.lam, "tol": args.cg_tol, "iterations": res.iterations,
                       "relative_residual": res.relative_residual, "converged": res.converged}


def cmd_invert(args):
    vol = read_qvol(args.field)
    if vol.channels != 1:
        raise ValueError(f"{args.field}: field must be a scalar volume")
    H = _direction(args)
    out = _ensure_dir(args.out_dir)
    report = {"method": args.method, "H": H.tolist(), "input": str(args.field)}
    if args.patch:
        layout = plan_patches(vol.data.shape, args.patch, args.overlap)
        results, patch_reports = [], []
        for patch in patch_split(vol.data, layout):
            res, info = _invert_volume(patch, Grid3(patch.shape, vol.grid.voxel_size), H, args)
            results.append(res)
            patch_reports.append(info)
        if isinstance(results[0], ReconState):
            result = ReconState(patch_stitch([r.chi33 for r in results], layout),
                                patch_stitch([r.dbp for r in results], layout))
        else:
            result = patch_stitch(results, layout)
        report["patch"] = {"size": args.patch, "overlap": str(layout.overlap_fraction),
                           "stride": layout.stride, "count": len(layout.origins),
                           "patches": patch_reports}
    else:
        result, info = _invert_volume(vol.data, vol.grid, H, args)
        report.update(info)
    files = {}
    if isinstance(result, ReconState):
        write_qvol(Volume(result.chi33, vol.grid), out / "chi33.qvol")
        write_qvol(Volume(result.dbp, vol.grid), out / "dbp.qvol")
        files = {"chi33": str(out / "chi33.qvol"), "dbp": str(out / "dbp.qvol")}
    else:
        write_qvol(Volume(result, vol.grid), out / "chi33.qvol")
        files = {"chi33": str(out / "chi33.qvol")}
    report["files"] = files
    _emit(report, args.report or str(out / "report.json"))
    return EXIT_OK


def _load_samples(manifest) -> tuple[list, Grid3]:
    entries = qvol.read_manifest(manifest)
    samples, grid = [], None
    for e in entries:
        vol = read_qvol(e["path"])
        if vol.channels != 1:
            raise ValueError(f"{e['path']}: orientation field must be scalar")
        if grid is not None and vol.grid != grid:
            raise ValueError(f"{e['path']}: grid {vol.grid} differs from {grid}")
        grid = vol.grid
        if "R" in e:
            samples.append(sti.OrientationSample.from_rotation(vol.data, e["R"]))
        else:
            samples.append(sti.OrientationSample(vol.data, e["H_sub"]))
    return samples, grid


def cmd_sti(args):
    entries = qvol.read_manifest(args.manifest)
    need = sti.MIN_COSMOS_ORIENTATIONS if args.cosmos else sti.MIN_STI_ORIENTATIONS
    if len(entries) < need:
        raise ValueError(f"{'COSMOS' if args.cosmos else 'STI'} needs at least {need} "
                         f"orientations, manifest has {len(entries)}")
    samples, grid = _load_samples(args.manifest)
    out = _ensure_dir(args.out_dir)
    if args.cosmos:
        chi = sti.cosmos_fit(samples, grid.voxel_size)
        write_qvol(Volume(chi, grid), out / "chi_cosmos.qvol")
        _emit({"method": "cosmos", "orientations": len(samples),
               "files": {"chi_cosmos": str(out / "chi_cosmos.qvol")}})
        return EXIT_OK
    chi, info = sti.sti_fit(samples, grid.voxel_size, return_info=True)
    labels = sti.extract_labels(chi, grid.voxel_size)
    write_qvol(Volume(chi, grid), out / "chi_tensor.qvol")
    write_qvol(Volume(labels.chi33, grid), out / "chi33.qvol")
    write_qvol(Volume(labels.dbp, grid), out / "dbp.qvol")
    _emit({"method": "sti", "orientations": len(samples), **info,
           "files": {"chi_tensor": str(out / "chi_tensor.qvol"), "chi33": str(out / "chi33.qvol"),
                     "dbp": str(out / "dbp.qvol")}})
    return EXIT_OK


def _scalar(path) -> Volume:
    vol = read_qvol(path)
    if vol.channels != 1:
        raise ValueError(f"{path}: expected a scalar volume")
    return vol


def cmd_metrics(args):
    report: dict = {}
    mask = _scalar(args.mask).data > 0.5 if args.mask else None
    if args.x or args.ref:
        if not (args.x and args.ref):
            raise ValueError("--x and --ref go together")
        x, ref = _scalar(args.x), _scalar(args.ref)
        if x.grid.dims != ref.grid.dims:
            raise ValueError(f"shape mismatch: {x.grid.dims} vs {ref.grid.dims}")
        report = metrics.evaluate(x.data, ref.data, mask, normalized_rmse=not args.plain_rmse).to_dict()
        if args.roi:
            labels = _scalar(args.roi)
            names = json.loads(Path(args.roi_names).read_text()) if args.roi_names else {}
            names = {int(k): v for k, v in names.items()}
            report["rois"] = [vars(r) for r in metrics.roi_stats(x.data, metrics.label_masks(labels.data, names))]
    if args.consistency:
        if not (args.field and args.state_chi33):
            raise ValueError("--consistency needs --field and --state-chi33 (and optionally --state-dbp)")
        b = _scalar(args.field)
        chi33 = _scalar(args.state_chi33).data
        dbp = _scalar(args.state_dbp).data if args.state_dbp else np.zeros_like(chi33)
        X = ReconState(chi33, dbp)
        report["consistency"] = {
            "l1": metrics.phase_consistency(X, b.data, mask, b.grid.voxel_size),
            "channels": "chi33+dbp" if args.state_dbp else "chi33",
        }
    if not report:
        raise ValueError("nothing to compute: give --x/--ref and/or --consistency")
    _emit(report, args.out)
    return EXIT_OK


def cmd_slice(args):
    vol = read_qvol(args.input)
    data = vol.data[args.channel] if vol.channels == 6 else vol.data
    qvol.export_slice(data, args.axis, args.index, tuple(args.window), args.out)
    print(json.dumps({"slice": str(args.out), "axis": args.axis, "index": args.index}))
    return EXIT_OK


# --------------------------------------------------------------------------
# demo


def _check(checks: dict, name: str, ok: bool, **values):
    checks[name] = {"pass": bool(ok), **{k: float(v) for k, v in values.items()}}
    log.info("%s %s %s", "PASS" if ok else "FAIL", name, values)


def run_demo(n: int = 64, seed: int = 0, out_dir=None, lipschitz_iters: int = 300) -> dict:
    """Synthetic end-to-end run: phantom, forward, TKD and PGD inversion, metrics.

    Returns the report dict with a ``checks`` section; writes volumes and a
    few PGM slices when ``out_dir`` is given.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    grid = Grid3((n, n, n))
    checks: dict = {}

    # phantom and forward field
    chi = phantom.random_tensor(grid, phantom.RandomTensorSpec(seed=seed, correlation_length=2.0,
                                                               amplitude=0.05, anisotropy=0.4))
    labels = sti.extract_labels(chi)
    field = dipole.simulate_field_sti(chi)
    op = ForwardOperator(grid)
    decomposition = np.abs(field - op.apply(labels)).max()
    _check(checks, "decomposition_identity", decomposition <= 1e-12, max_abs_error=decomposition)

    # adjoint identity on small random states
    worst = 0.0
    g16 = ForwardOperator(Grid3((16, 16, 16)))
    for _ in range(10):
        X = ReconState(rng.standard_normal((16,) * 3), rng.standard_normal((16,) * 3))
        y = rng.standard_normal((16,) * 3)
        AX = g16.apply(X)
        worst = max(worst, abs(np.vdot(AX, y) - X.vdot(g16.adjoint(y)))
                    / (np.linalg.norm(AX) * np.linalg.norm(y)))
    _check(checks, "adjoint_identity", worst <= 1e-10, max_relative_error=worst)

    # sphere against the analytic field, zero-padded forward
    sgrid = Grid3((n, n, n))
    sph = phantom.SpherePhantom.centered(sgrid, n / 8.0, 1.0)
    sfield = dipole.simulate_field(phantom.sphere_chi(sgrid, sph), pad=2.0)
    ana = phantom.sphere_field_analytic(sgrid, sph)
    shell = np.abs(phantom.sphere_distance(sgrid, sph) - sph.radius) > 2.0
    sphere_err = metrics.nrmse(sfield, ana, shell)
    _check(checks, "sphere_analytic_nrmse", sphere_err <= 5.0, nrmse_percent=sphere_err)

    # TKD
    chi_tkd = inversion.tkd_invert(field)
    D = op.kernel
    keep = np.abs(D) >= inversion.TKD_THRESHOLD
    # TKD divides the whole field, so compare against the spectrum that
    # explains it through D alone: F(field)/D on the kept samples
    spec_err = np.abs(np.fft.fftn(chi_tkd)[keep] - np.fft.fftn(field)[keep] / D[keep]).max()
    spec_err /= np.abs(np.fft.fftn(field)).max()
    _check(checks, "tkd_spectrum_contract", spec_err <= 1e-10, max_relative_error=spec_err)

    # unrolled PGD, K = 3, identity prox, t = 1/L
    L = inversion.lipschitz_estimate(grid, iters=lipschitz_iters)
    rep = inversion.pgd_solve(field, cfg=inversion.SolveConfig(iterations=3, steps=1.0 / L), op=op)
    obj = np.asarray(rep.objectives)
    monotone = bool(np.all(np.diff(obj) <= 1e-12 * obj[0]))
    _check(checks, "pgd_objective_monotone", monotone, first=obj[0], last=obj[-1])
    L16 = inversion.lipschitz_estimate(Grid3((16, 16, 16)), iters=300)
    _check(checks, "lipschitz_13_over_9", abs(L16 - 13 / 9) <= 1e-3, estimate=L16)

    # ordering check: two-channel labels explain the field better than chi33 alone
    two = metrics.phase_consistency(labels, field)
    one = metrics.phase_consistency(ReconState(labels.chi33, np.zeros_like(field)), field)
    _check(checks, "phase_consistency_ordering", two < one, two_channel=two, chi33_only=one)

    ref = labels.chi33
    report = {
        "grid": list(grid.dims),
        "seed": seed,
        "lipschitz": L,
        "metrics": {
            "tkd": metrics.evaluate(chi_tkd, ref).to_dict(),
            "pgd_identity_K3": metrics.evaluate(rep.state.chi33, ref).to_dict(),
        },
        "pgd": rep.to_dict(),
        "phase_consistency": {"chi33+dbp": two, "chi33_only": one},
        "offdiag_to_chi33_field_ratio": float(np.abs(labels.dbp).max()
                                              / np.abs(op.apply(ReconState(ref, 0 * ref))).max()),
        "checks": checks,
    }
    if out_dir is not None:
        out = _ensure_dir(out_dir)
        write_qvol(Volume(chi, grid), out / "chi_tensor.qvol")
        write_qvol(Volume(field, grid), out / "field.qvol")
        write_qvol(Volume(ref, grid), out / "chi33_label.qvol")
        write_qvol(Volume(labels.dbp, grid), out / "dbp_label.qvol")
        write_qvol(Volume(chi_tkd, grid), out / "chi33_tkd.qvol")
        write_qvol(Volume(rep.state.chi33, grid), out / "chi33_pgd.qvol")
        write_qvol(Volume(rep.state.dbp, grid), out / "dbp_pgd.qvol")
        lim = 3 * float(ref.std())
        for name, vol in [("chi33_label", ref), ("chi33_tkd", chi_tkd), ("chi33_pgd", rep.state.chi33)]:
            qvol.export_slice(vol, 2, n // 2, (-lim, lim), out / f"{name}_axial.pgm")
        report["out_dir"] = str(out)
    report["runtime_s"] = time.perf_counter() - t0
    report["all_checks_pass"] = all(c["pass"] for c in checks.values())
    return report


def cmd_demo(args):
    report = run_demo(args.dims, args.seed, args.out_dir, args.lipschitz_iters)
    out = args.report or (str(Path(args.out_dir) / "report.json") if args.out_dir else None)
    _emit(report, out)
    if not report["all_checks_pass"]:
        failed = [k for k, v in report["checks"].items() if not v["pass"]]
        raise CheckFailed(f"demo checks failed: {', '.join(failed)}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qsmtk", description=__doc__.splitlines()[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--threads", type=int, default=1, help="FFT worker threads")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--verbose", "-v", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    def direction_flags(sp):
        sp.add_argument("--H", type=_floats(3), default=[0.0, 0.0, 1.0],
                        help="field direction in the volume frame (normalized)")
        sp.add_argument("--R", type=_floats(9), default=None,
                        help="row-major rotation matrix lab->subject; overrides --H with R @ z")

    sp = sub.add_parser("phantom", help="generate a sphere or random tensor phantom", formatter_class=fmt)
    sp.add_argument("--kind", choices=["sphere", "tensor"], default="sphere")
    sp.add_argument("--dims", type=_dims, required=True, help="N or NX,NY,NZ")
    sp.add_argument("--voxel", type=_voxel, default=(1.0, 1.0, 1.0), help="voxel size in mm")
    sp.add_argument("--radius", type=float, default=8.0, help="sphere radius in mm")
    sp.add_argument("--dchi", type=float, default=1.0, help="sphere susceptibility difference, ppm")
    sp.add_argument("--center", type=_floats(3), default=None, help="sphere centre in mm (default: grid centre)")
    sp.add_argument("--corr-length", type=float, default=2.0, help="tensor correlation length, mm")
    sp.add_argument("--amplitude", type=float, default=0.05, help="tensor channel std, ppm")
    sp.add_argument("--anisotropy", type=float, default=0.3, help="tensor anisotropy fraction")
    sp.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                    help="tensor phantom seed (overrides the global --seed)")
    sp.add_argument("--out-dir", default=".")
    direction_flags(sp)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("forward", help="simulate a field map", formatter_class=fmt)
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--tensor", help="6-channel tensor QVOL (full STI model)")
    src.add_argument("--chi33", help="scalar chi33 QVOL (dipole model)")
    sp.add_argument("--dbp", help="off-diagonal field QVOL to add (two-channel model, H = z)")
    sp.add_argument("--pad", type=float, default=1.0, help="zero-pad factor per axis before the FFT")
    sp.add_argument("--out", required=True, help="output field QVOL")
    sp.add_argument("--manifest", help="append this orientation to a manifest JSON")
    direction_flags(sp)
    sp.set_defaults(func=cmd_forward)

    sp = sub.add_parser("invert", help="dipole inversion (TKD, unrolled PGD, CG)", formatter_class=fmt)
    sp.add_argument("--field", required=True, help="field map QVOL (ppm)")
    sp.add_argument("--method", choices=["tkd", "pgd", "cg"], default="tkd")
    sp.add_argument("--threshold", type=float, default=inversion.TKD_THRESHOLD, help="TKD threshold")
    sp.add_argument("--iters", type=int, default=inversion.UNROLLED_ITERATIONS,
                    help="unrolled PGD iterations")
    sp.add_argument("--prox", default="identity", help="identity | soft:LAM[:chi33|dbp|both]")
    sp.add_argument("--step", default="auto", help="PGD step size, or 'auto' for 1/L")
    sp.add_argument("--lipschitz-iters", type=int, default=300, help="power iterations for --step auto")
    sp.add_argument("--lam", type=float, default=1e-8, help="CG Tikhonov weight")
    sp.add_argument("--cg-tol", type=float, default=1e-10, help="CG relative residual tolerance")
    sp.add_argument("--max-iter", type=int, default=500, help="CG iteration cap")
    sp.add_argument("--patch", type=int, default=0,
                    help="patch-then-stitch with this patch size (typical 48); 0 = full volume")
    sp.add_argument("--overlap", type=_fraction, default=Fraction(1, 3), help="patch overlap fraction")
    sp.add_argument("--out-dir", default=".")
    sp.add_argument("--report", help="report JSON path (default OUT_DIR/report.json)")
    direction_flags(sp)
    sp.set_defaults(func=cmd_invert)

    sp = sub.add_parser("sti", help="fit a tensor (or COSMOS map) from an orientation manifest",
                        formatter_class=fmt)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--cosmos", action="store_true", help="fit a scalar COSMOS map (>= 3 orientations)")
    sp.add_argument("--out-dir", default=".")
    sp.set_defaults(func=cmd_sti)

    sp = sub.add_parser("metrics", help="RMSE/SSIM/HFEN, ROI stats, phase consistency", formatter_class=fmt)
    sp.add_argument("--x", help="reconstruction QVOL")
    sp.add_argument("--ref", help="reference QVOL")
    sp.add_argument("--mask", help="mask QVOL (nonzero = inside)")
    sp.add_argument("--plain-rmse", action="store_true", help="report plain RMSE instead of NRMSE percent")
    sp.add_argument("--roi", help="integer label QVOL; per-label mean/std of --x")
    sp.add_argument("--roi-names", help="JSON object mapping label ids to names")
    sp.add_argument("--consistency", action="store_true",
                    help="report mean |A X - field| for the state given by --state-chi33/--state-dbp")
    sp.add_argument("--field", help="measured field QVOL for the consistency check")
    sp.add_argument("--state-chi33", help="chi33 QVOL of the state to forward-simulate")
    sp.add_argument("--state-dbp", help="dB' QVOL of the state (omit for chi33-only)")
    sp.add_argument("--out", help="write the report JSON here as well")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("slice", help="export one slice as an 8-bit PGM", formatter_class=fmt)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--axis", type=int, choices=[0, 1, 2], default=2)
    sp.add_argument("--index", type=int, required=True)
    sp.add_argument("--window", type=_floats(2), required=True, help="lo,hi")
    sp.add_argument("--channel", type=int, default=5, help="tensor channel for 6-channel inputs")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_slice)

    sp = sub.add_parser("demo", help="phantom -> forward -> invert -> metrics with embedded checks",
                        formatter_class=fmt)
    sp.add_argument("--dims", type=int, default=64, help="cubic grid size")
    sp.add_argument("--out-dir", default=None)
    sp.add_argument("--report", default=None)
    sp.add_argument("--lipschitz-iters", type=int, default=300)
    sp.set_defaults(func=cmd_demo)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with scipy.fft.set_workers(max(1, args.threads)):
            return args.func(args)
    except (QvolError, OSError) as exc:
        print(f"qsmtk: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DivergenceError, RankDeficiencyError, KernelSymmetryError, CheckFailed) as exc:
        print(f"qsmtk: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, IndexError) as exc:
        print(f"qsmtk: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
