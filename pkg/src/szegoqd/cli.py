"""File-driven pipeline: kernels, builds and verification from the shell.

qd kernel|build|verify [--domain PATH] [--point RE,IM] [--order N | --eps E]
                       [--mode sc|mc|double] [--grid N] [--tol T] [--seed S]
                       [--out DIR]

Exit codes: 0 pass, 2 input error, 3 kernel-solver error, 4 build error,
5 verification failure.  Reports are JSON and CSV with floats printed at 17
significant digits; plots are plain-path SVG.  Identical configuration and
seed reproduce identical files.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import builder, verify
from .errors import BuildError, GeometryError, InputError, QdError, SolverError
from .geometry import (annulus_domain, disc_domain, domain_from_dict,
                       domain_to_dict, ellipse_domain, make_curve,
                       validate_domain)
from .kernels import SzegoSolver

EXIT_PASS = 0
EXIT_INPUT = 2
EXIT_SOLVER = 3
EXIT_BUILD = 4
EXIT_VERIFY = 5


def fmt(x):
    """17 significant digits, the round-trip precision of a double."""
    return f"{float(x):.17g}"


def _c2pair(z):
    return [float(np.real(z)), float(np.imag(z))]


def _json_default(obj):
    if isinstance(obj, complex):
        return _c2pair(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def write_json(path, data):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


@dataclass
class RunConfig:
    command: str
    domain_path: str | None = None
    artifact_path: str | None = None
    point: complex = 0.0
    order: int | None = None
    eps: float | None = None
    mode: str = "sc"
    grid: int | None = None
    tol: float = 1e-4
    seed: int = 0
    out_dir: str = "."
    nodes: tuple = ()
    node_orders: tuple = ()
    measure: str = "both"

    def __post_init__(self):
        if self.tol <= 0 or (self.eps is not None and self.eps <= 0):
            raise InputError("tolerances must be positive")
        if self.grid is not None and (self.grid < 4 or self.grid & (self.grid - 1)):
            raise InputError("grid size must be a power of two")


# ---------------------------------------------------------------------------
# SVG output (plain path elements only)

def _svg_path(points, closed=True):
    d = "M " + " L ".join(f"{p.real:.6f} {-p.imag:.6f}" for p in points)
    return d + (" Z" if closed else "")

def write_domain_svg(path, domains, strokes=("black", "#c03030"),
                     overlay=None, size=640):
    zs = np.concatenate([np.concatenate([c.samples for c in d.curves])
                         for d in domains])
    lo = complex(zs.real.min(), zs.imag.min())
    hi = complex(zs.real.max(), zs.imag.max())
    pad = 0.08 * max(hi.real - lo.real, hi.imag - lo.imag)
    view = (lo.real - pad, -(hi.imag + pad),
            hi.real - lo.real + 2 * pad, hi.imag - lo.imag + 2 * pad)
    width = 0.004 * max(view[2], view[3])
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
             f'height="{size}" viewBox="{view[0]:.6f} {view[1]:.6f} '
             f'{view[2]:.6f} {view[3]:.6f}">']
    for dom, stroke in zip(domains, strokes):
        dash = ' stroke-dasharray="0.05 0.03"' if stroke != strokes[0] else ""
        for c in dom.curves:
            lines.append(f'<path d="{_svg_path(c.samples)}" fill="none" '
                         f'stroke="{stroke}" stroke-width="{width:.6f}"{dash}/>')
    if overlay is not None:
        for pts in overlay:
            lines.append(f'<path d="{_svg_path(pts, closed=False)}" fill="none" '
                         f'stroke="#3050c0" stroke-width="{width:.6f}"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# kernel command

def cmd_kernel(config):
    domain = _load_domain(config)
    a = config.point
    max_order = config.order if config.order is not None else 0
    solver = SzegoSolver(domain, max_order=max_order)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for m in range(max_order + 1):
        S, L = solver.boundary_kernels(a, m)
        fname = out / f"kernel_m{m}.csv"
        with open(fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["curve_index", "t", "re_S", "im_S", "re_L", "im_L"])
            for ci, (sl, curve) in enumerate(zip(domain.slices, domain.curves)):
                for t, s_val, l_val in zip(curve.t, S[sl], L[sl]):
                    w.writerow([ci, fmt(t), fmt(s_val.real), fmt(s_val.imag),
                                fmt(l_val.real), fmt(l_val.imag)])
        files.append(str(fname))
    S0, _ = solver.boundary_kernels(a, 0)
    overlay = []
    for sl in domain.slices:
        normal = -1j * domain.tangent[sl]
        scale = 0.25 * domain.diameter / max(np.abs(S0).max(), 1e-30)
        overlay.append(domain.nodes[sl] + scale * np.abs(S0[sl]) * normal)
    svg = Path(config.out_dir) / "kernel_abs_S.svg"
    write_domain_svg(svg, [domain], overlay=overlay)
    files.append(str(svg))
    return files


# ---------------------------------------------------------------------------
# build command

def _load_domain(config):
    if config.domain_path is None:
        raise InputError("a --domain file is required")
    try:
        with open(config.domain_path) as fh:
            data = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read domain file: {exc}") from exc
    try:
        domain = domain_from_dict(data)
    except GeometryError as exc:
        raise InputError(str(exc)) from exc
    if config.grid is not None:
        curves = [make_curve(c.coeffs, config.grid) for c in domain.curves]
        domain = validate_domain(curves, domain.hole_points)
    return domain


def _quadrature_to_dict(qd):
    return {
        "measure": qd.measure,
        "nodes": [_c2pair(w) for w in qd.nodes],
        "orders": [int(n) for n in qd.orders],
        "coefficients": [[_c2pair(c) for c in cj] for cj in qd.coefficients],
        "fit_residual": float(qd.fit_residual),
    }


def _quadrature_from_dict(data):
    return verify.QuadratureData(
        measure=data["measure"],
        nodes=np.array([complex(re, im) for re, im in data["nodes"]]),
        orders=np.array(data["orders"], dtype=int),
        coefficients=tuple(np.array([complex(re, im) for re, im in cj])
                           for cj in data["coefficients"]),
        fit_residual=float(data.get("fit_residual", float("nan"))))


def cmd_build(config):
    domain = _load_domain(config)
    mode = config.mode
    notes = []
    if mode == "double" and domain.connectivity == 1:
        notes.append("NOTE: simply connected input; double build degenerates "
                     "to the sc pipeline")
    kwargs = {}
    if config.eps is not None:
        kwargs["eps"] = config.eps
    if config.order is not None:
        kwargs["order"] = config.order
    if mode == "sc":
        cmap = builder.build_sc(domain, a=config.point, **kwargs)
    elif mode == "mc":
        cmap = builder.build_mc_arclength(domain, a=config.point, **kwargs)
    elif mode == "double":
        cmap = builder.build_double(domain, a0=config.point, **kwargs)
    else:
        raise InputError(f"unknown mode {mode!r}")
    image = builder.image_domain(cmap)

    quadratures = {}
    if len(cmap.base_points()) == 1 and cmap.mode == "sc":
        quadratures["arclength"] = _quadrature_to_dict(
            verify.extract_quadrature_sc(cmap))
    else:
        quadratures["arclength"] = _quadrature_to_dict(
            verify.quadrature_from_map(cmap, image, verify.ARC))
    if cmap.mode in ("sc", "double"):
        quadratures["area"] = _quadrature_to_dict(
            verify.quadrature_from_map(cmap, image, verify.AREA))

    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    artifact = {
        "mode": cmap.mode,
        "seed": config.seed,
        "base_point": _c2pair(cmap.base_point),
        "bases": [[_c2pair(a)[0], _c2pair(a)[1], int(m)]
                  for a, m in cmap.element.bases],
        "coefficients": [_c2pair(c) for c in cmap.element.coeffs],
        "domain": domain_to_dict(domain),
        "image_domain": domain_to_dict(image),
        "f_boundary": [_c2pair(w) for w in cmap.f_boundary.values],
        "sigma_taylor": [_c2pair(c) for c in cmap.sigma_taylor],
        "f_taylor": [_c2pair(c) for c in cmap.f_taylor],
        "period_residuals": [_c2pair(r) for r in cmap.period_residuals],
        "certificate": cmap.certificate,
        "fit_residual": cmap.fit_residual,
        "deviation_sup": cmap.deviation_sup,
        "quadrature": quadratures,
        "notes": notes,
    }
    artifact_path = out / "map_artifact.json"
    write_json(artifact_path, artifact)
    svg = out / "build_before_after.svg"
    write_domain_svg(svg, [domain, image])
    for note in notes:
        print(note)
    return [str(artifact_path), str(svg)], artifact


# ---------------------------------------------------------------------------
# verify command

def cmd_verify(config):
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config.artifact_path is not None:
        try:
            with open(config.artifact_path) as fh:
                artifact = json.load(fh)
            image = domain_from_dict(artifact["image_domain"])
            quads = {name: _quadrature_from_dict(data)
                     for name, data in artifact["quadrature"].items()}
        except (OSError, json.JSONDecodeError, KeyError, GeometryError) as exc:
            raise InputError(f"cannot read artifact: {exc}") from exc
    else:
        image = _load_domain(config)
        if not len(config.nodes):
            raise InputError("verification needs --artifact or --nodes")
        measures = ([verify.ARC, verify.AREA] if config.measure == "both"
                    else [config.measure])
        quads = {}
        for ms in measures:
            quads[ms] = verify.fit_quadrature(image, np.array(config.nodes),
                                              np.array(config.node_orders),
                                              measure=ms)
    reports = {}
    all_pass = True
    for name, qd in quads.items():
        if config.measure != "both" and name != config.measure:
            continue
        _, report = verify.verify_quadrature(image, qd, tol=config.tol,
                                             seed=config.seed)
        reports[name] = report
        all_pass = all_pass and report["passed"]
        csv_path = out / f"residuals_{name}.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["function", "re_moment", "im_moment",
                        "re_functional", "im_functional", "residual"])
            for row in report["functions"]:
                w.writerow([row["name"],
                            fmt(row["moment"].real), fmt(row["moment"].imag),
                            fmt(row["functional"].real), fmt(row["functional"].imag),
                            fmt(row["residual"])])
    report_path = out / "verification_report.json"
    write_json(report_path, {"seed": config.seed, "tolerance": config.tol,
                             "passed": all_pass, "reports": reports})
    return all_pass, reports


# ---------------------------------------------------------------------------
# argument parsing

def _parse_point(text):
    try:
        re_s, im_s = text.split(",")
        return complex(float(re_s), float(im_s))
    except ValueError as exc:
        raise InputError(f"cannot parse point {text!r}; expected RE,IM") from exc


def _parse_nodes(text):
    nodes = []
    for part in text.split(";"):
        part = part.strip()
        if part:
            nodes.append(_parse_point(part))
    return tuple(nodes)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="qd",
        description="Szego coordinates and quadrature-domain certification")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("kernel", "build", "verify"):
        s = sub.add_parser(name)
        s.add_argument("--domain", dest="domain_path")
        s.add_argument("--artifact", dest="artifact_path")
        s.add_argument("--point", default="0,0")
        s.add_argument("--order", type=int, default=None)
        s.add_argument("--eps", type=float, default=None)
        s.add_argument("--mode", default="sc", choices=["sc", "mc", "double"])
        s.add_argument("--grid", type=int, default=None)
        s.add_argument("--tol", type=float, default=1e-4)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", dest="out_dir", default=".")
        s.add_argument("--nodes", default="")
        s.add_argument("--orders", default="")
        s.add_argument("--measure", default="both",
                       choices=["both", verify.ARC, verify.AREA])
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = RunConfig(
            command=args.command,
            domain_path=args.domain_path,
            artifact_path=args.artifact_path,
            point=_parse_point(args.point),
            order=args.order,
            eps=args.eps,
            mode=args.mode,
            grid=args.grid,
            tol=args.tol,
            seed=args.seed,
            out_dir=args.out_dir,
            nodes=_parse_nodes(args.nodes),
            node_orders=tuple(int(x) for x in args.orders.split(",") if x.strip()),
            measure=args.measure,
        )
        if config.command == "kernel":
            files = cmd_kernel(config)
            print("\n".join(files))
            return EXIT_PASS
        if config.command == "build":
            files, artifact = cmd_build(config)
            print("\n".join(files))
            return EXIT_PASS
        if config.command == "verify":
            passed, reports = cmd_verify(config)
            for name, rep in sorted(reports.items()):
                print(f"{name}: max residual {fmt(rep['max_residual'])} "
                      f"{'PASS' if rep['passed'] else 'FAIL'}")
            return EXIT_PASS if passed else EXIT_VERIFY
        raise InputError(f"unknown command {config.command!r}")
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (GeometryError,) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except BuildError as exc:
        print(f"build error: {exc}", file=sys.stderr)
        return EXIT_BUILD
    except QdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
