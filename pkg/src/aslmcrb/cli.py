"""Command-line interface.

Subcommands: simulate, fit, bounds, converge, subsets, t1test, plot.
Report subcommands write CSV tables plus SVG figures rendered from the
same tables. Exit codes: 0 success, 1 usage, 2 data/format error,
3 numerical failure affecting all voxels.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from . import __version__
from .bounds import batch_bounds
from .dataset import VoxelDataset, read_dataset, write_dataset
from .errors import (
    AslMcrbError,
    ColumnMissing,
    FormatError,
    IoFailure,
    SizeMismatch,
    VersionUnsupported,
)
from .experiments import (
    REF_FULL_FIT,
    REF_TRUTH,
    convergence_study,
    convergence_table,
    subset_consistency,
    subset_variance_table,
    t1_experiment,
    t1_table,
)
from .figures import PlotOptions, emit_lineplot_svg
from .fitting import BoundsBox, FitOptions, fit_map
from .kinetic import Protocol, default_plds
from .noise import NOISE_KINDS, NoiseSpec
from .phantom import GENERATORS, PhantomSpec, clean_curves, draw_truths, \
    generate_phantom, sigma_for_snr
from .tables import ExperimentTable, emit_table, read_table

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

ORGANS = {
    # f range (mL/min/100g), att range (s), tissue T1 (s)
    "brain": {"f": (0.0, 150.0), "att": (0.0, 2.0), "t1": 1.2},
    "kidney": {"f": (0.0, 900.0), "att": (0.0, 2.0), "t1": 1.4},
}


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the CLI contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    parser = _Parser(prog="aslmcrb",
                     description="Misspecification-aware Cramer-Rao "
                                 "analysis for ASL parameter maps.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="seed for all random streams (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default $ASLMCRB_THREADS or 1)")
    common.add_argument("--config", type=Path, default=None,
                        help="JSON file overriding protocol fields")
    common.add_argument("--out", type=Path, required=True,
                        help="output directory")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("simulate", parents=[common],
                       help="generate a synthetic phantom dataset")
    p.add_argument("--voxels", type=int, default=1000)
    p.add_argument("--m", type=int, default=50, help="repetitions")
    p.add_argument("--organ", choices=sorted(ORGANS), default="brain")
    p.add_argument("--generator", choices=GENERATORS, default="buxton")
    p.add_argument("--snr", type=float, default=20.0,
                   help="peak-signal SNR used to derive sigma")
    p.add_argument("--sigma", type=float, default=None,
                   help="noise sigma in signal units (overrides --snr)")
    p.add_argument("--noise", choices=NOISE_KINDS + ("none",),
                   default="rician")
    p.add_argument("--k-out", type=float, default=0.3,
                   help="outflow rate 1/s (buxton_outflow)")
    p.add_argument("--t1-true", type=float, default=None,
                   help="uniform true T1 (buxton_wrong_t1)")
    p.add_argument("--t1-alt", type=float, default=1.5,
                   help="alternate T1 for the top fraction (buxton_wrong_t1)")
    p.add_argument("--top-fraction", type=float, default=0.10)
    p.add_argument("--mix-w", type=float, default=0.7,
                   help="main-compartment weight (buxton_partial_volume)")
    p.add_argument("--f-b", type=float, default=20.0)
    p.add_argument("--att-b", type=float, default=1.2)

    p = sub.add_parser("fit", parents=[common],
                       help="fit parameter maps for a dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--organ", choices=sorted(ORGANS), default="brain",
                   help="selects the fit box")

    p = sub.add_parser("bounds", parents=[common],
                       help="per-voxel bound reports from dataset + maps")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--maps", type=Path, required=True,
                   help="directory produced by the fit subcommand")

    p = sub.add_parser("converge", parents=[common],
                       help="asymptotic convergence study")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--organ", choices=sorted(ORGANS), default="brain")
    p.add_argument("--k", type=int, default=10, help="bootstrap realizations")
    p.add_argument("--m-min", type=int, default=2)
    p.add_argument("--m-max", type=int, default=None)
    p.add_argument("--m-step", type=int, default=1)
    p.add_argument("--reference", choices=(REF_TRUTH, REF_FULL_FIT),
                   default=None,
                   help="bias reference (default: truth when available)")

    p = sub.add_parser("subsets", parents=[common],
                       help="subset consistency study")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--organ", choices=sorted(ORGANS), default="brain")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--m-max", type=int, default=None)

    p = sub.add_parser("t1test", parents=[common],
                       help="global vs voxelwise T1 eigenvalue comparison")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--organ", choices=sorted(ORGANS), default="brain")
    p.add_argument("--t1-global", type=float, required=True)
    p.add_argument("--t1-alt", type=float, required=True)
    p.add_argument("--top-fraction", type=float, default=0.10)

    p = sub.add_parser("plot", parents=[common],
                       help="render a CSV table to an SVG line plot")
    p.add_argument("--table", type=Path, required=True)
    p.add_argument("--x", required=True, help="x column name")
    p.add_argument("--y", action="append", required=True,
                   help="y column name (repeatable)")
    p.add_argument("--logy", action="store_true")
    p.add_argument("--dotted", action="append", default=[],
                   help="column drawn dotted (repeatable)")
    p.add_argument("--ref-line", type=float, default=None)
    p.add_argument("--name", default="plot.svg", help="output file name")
    return parser


def _apply_config(protocol: Protocol, config_path: Path | None) -> Protocol:
    if config_path is None:
        return protocol
    try:
        overrides = json.loads(config_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"config {config_path}: {exc}") from exc
    allowed = {"plds", "tau", "alpha", "m0b", "lambda_bt", "t1b",
               "t1_tissue", "sigma", "time_convention"}
    unknown = set(overrides) - allowed
    if unknown:
        raise FormatError(f"config has unknown fields {sorted(unknown)}")
    if "plds" in overrides:
        overrides["plds"] = tuple(overrides["plds"])
    return dc_replace(protocol, **overrides)


def _box_for(organ: str) -> BoundsBox:
    spec = ORGANS[organ]
    return BoundsBox(spec["f"][0], spec["f"][1], spec["att"][0],
                     spec["att"][1])


def _load(args) -> tuple[VoxelDataset, Protocol]:
    dataset = read_dataset(args.data)
    protocol = _apply_config(dataset.protocol(), args.config)
    return dataset, protocol


def _write_map(path: Path, array, dtype="<f4"):
    path.write_bytes(np.ascontiguousarray(array, dtype=dtype).tobytes())


def _cmd_simulate(args) -> int:
    organ = ORGANS[args.organ]
    protocol = Protocol(plds=default_plds(), tau=1.5, sigma=1.0,
                        t1_tissue=organ["t1"])
    protocol = _apply_config(protocol, args.config)
    gen_params = {}
    if args.generator == "buxton_outflow":
        gen_params["k_out"] = args.k_out
    elif args.generator == "buxton_wrong_t1":
        if args.t1_true is not None:
            gen_params["t1_true"] = args.t1_true
        else:
            gen_params.update({"t1_global": protocol.t1_tissue,
                               "t1_alt": args.t1_alt,
                               "top_fraction": args.top_fraction})
    elif args.generator == "buxton_partial_volume":
        gen_params.update({"mix_w": args.mix_w, "f_b": args.f_b,
                           "att_b": args.att_b})

    spec = PhantomSpec(n_voxels=args.voxels, f_range=organ["f"],
                       att_range=organ["att"], generator=args.generator,
                       generator_params=gen_params, m_total=args.m,
                       noise=None, seed=args.seed)
    if args.sigma is not None:
        sigma = args.sigma
    else:
        f, att = draw_truths(spec)
        curves, _ = clean_curves(spec, protocol, f, att)
        sigma = sigma_for_snr(curves, args.snr)
    protocol = dc_replace(protocol, sigma=sigma)
    noise = None if args.noise == "none" else NoiseSpec(
        sigma=sigma, kind=args.noise, seed=args.seed)
    spec = dc_replace(spec, noise=noise)
    dataset = generate_phantom(spec, protocol)
    write_dataset(dataset, args.out)
    print(f"wrote {dataset.dims[0]} voxels x {dataset.dims[1]} PLDs x "
          f"{dataset.dims[2]} repetitions to {args.out} (sigma {sigma:.6g})")
    return EXIT_OK


def _cmd_fit(args) -> int:
    dataset, protocol = _load(args)
    box = _box_for(args.organ)
    maps = fit_map(dataset.data, dataset.mask, protocol, box,
                   FitOptions(), threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_map(out / "fit_f.raw", maps.f)
    _write_map(out / "fit_att.raw", maps.att)
    _write_map(out / "fit_sse.raw", maps.sse)
    _write_map(out / "fit_flags.raw", maps.flags, dtype="u1")
    table = ExperimentTable(columns=[
        "voxel (index)", "f (mL/min/100g)", "att (s)",
        "sse (signal^2)", "flags (bitmask)", "n_iterations (count)"])
    for i in range(dataset.dims[0]):
        table.rows.append([i, maps.f[i], maps.att[i], maps.sse[i],
                           int(maps.flags[i]), int(maps.n_iterations[i])])
    emit_table(table, out / "fit_summary.csv")
    n_valid = int(maps.fit_valid.sum())
    print(f"fit {int(dataset.mask.sum())} masked voxels, {n_valid} valid")
    if dataset.mask.any() and n_valid == 0:
        print("error: no voxel produced a valid fit", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


_MAT_FIELDS = ("a_hat", "b_hat", "c_crb_empirical", "c_crb_theoretical",
               "c_mcrb", "p_hat")


def _cmd_bounds(args) -> int:
    dataset, protocol = _load(args)
    v = dataset.dims[0]
    maps_dir = Path(args.maps)
    try:
        f = np.frombuffer((maps_dir / "fit_f.raw").read_bytes(),
                          dtype="<f4").astype(float)
        att = np.frombuffer((maps_dir / "fit_att.raw").read_bytes(),
                            dtype="<f4").astype(float)
        flags = np.frombuffer((maps_dir / "fit_flags.raw").read_bytes(),
                              dtype="u1")
    except OSError as exc:
        raise FormatError(f"maps directory incomplete: {exc}") from exc
    if f.size != v or att.size != v or flags.size != v:
        raise SizeMismatch(
            f"maps hold {f.size} voxels, dataset has {v}")
    eligible = (flags == 0) & dataset.mask
    bnd = batch_bounds(dataset.data, f, att, eligible, protocol,
                       with_components=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_map(out / "lambda_max.raw", np.nan_to_num(bnd.lambda_max))
    _write_map(out / "lambda_min.raw", np.nan_to_num(bnd.lambda_min))
    _write_map(out / "kappa.raw", np.nan_to_num(bnd.kappa))
    _write_map(out / "bounds_status.raw", bnd.status, dtype="u1")

    cols = ["voxel (index)", "status (code)", "m_used (count)"]
    for name in _MAT_FIELDS:
        cols += [f"{name}_11", f"{name}_12", f"{name}_22"]
    cols += ["lambda_max (1)", "lambda_min (1)", "kappa (1)"]
    table = ExperimentTable(columns=cols)

    def cell(x):
        return None if not np.isfinite(x) else float(x)

    for i in range(v):
        row = [i, int(bnd.status[i]), bnd.m_used]
        for name in _MAT_FIELDS:
            row += [cell(x) for x in bnd.components[name][i]]
        row += [cell(bnd.lambda_max[i]), cell(bnd.lambda_min[i]),
                cell(bnd.kappa[i])]
        table.rows.append(row)
    emit_table(table, out / "bounds.csv")
    n_valid = int(bnd.valid.sum())
    print(f"bound reports: {n_valid} valid of {int(eligible.sum())} eligible")
    if eligible.any() and n_valid == 0:
        print("error: no voxel produced a valid bound report",
              file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_converge(args) -> int:
    dataset, protocol = _load(args)
    m_total = dataset.dims[2]
    m_max = args.m_max or m_total
    ms = list(range(args.m_min, m_max + 1, args.m_step))
    if not ms:
        raise FormatError(f"empty m range {args.m_min}..{m_max}")
    reference = args.reference or (
        REF_TRUTH if dataset.truth_f is not None else REF_FULL_FIT)
    rows = convergence_study(dataset, protocol, ms, args.k, args.seed,
                             reference, box=_box_for(args.organ),
                             threads=args.threads)
    table = convergence_table(rows)
    out = Path(args.out)
    emit_table(table, out / "converge.csv")
    emit_lineplot_svg(
        table, "m (count)",
        ["lambda_max_mean (1)", "lambda_min_mean (1)",
         "lambda_max_median (1)", "lambda_min_median (1)"],
        PlotOptions(title="whitened-bound eigenvalues vs repetitions",
                    xlabel="repetitions m", ylabel="eigenvalue",
                    ref_line=1.0,
                    dotted=("lambda_max_median (1)",
                            "lambda_min_median (1)")),
        out / "converge_eigenvalues.svg")
    emit_lineplot_svg(
        table, "m (count)", ["bias_f (mL/min/100g)", "bias_att (s)"],
        PlotOptions(title="median |bias| vs repetitions", logy=True,
                    xlabel="repetitions m", ylabel="|bias|"),
        out / "converge_bias.svg")
    emit_lineplot_svg(
        table, "m (count)",
        ["var_f ((mL/min/100g)^2)", "var_att (s^2)"],
        PlotOptions(title="median bootstrap variance vs repetitions",
                    logy=True, xlabel="repetitions m", ylabel="variance"),
        out / "converge_variance.svg")
    if all(not np.isfinite(r.kappa_mean) for r in rows):
        print("error: no voxel produced a valid bound report in any row",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"wrote {len(rows)} convergence rows to {out / 'converge.csv'}")
    return EXIT_OK


def _cmd_subsets(args) -> int:
    dataset, protocol = _load(args)
    m_total = dataset.dims[2]
    m_max = args.m_max or m_total
    rep = subset_consistency(dataset, protocol, args.k, args.seed,
                             box=_box_for(args.organ), threads=args.threads,
                             ms=range(2, m_max + 1))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    summary = ExperimentTable(columns=[
        "set (1|2)", "plds (s, joined)", "mean_rel_err_f (1)",
        "mean_rel_err_att (1)", "n_valid (count)"])
    joined1 = " ".join(f"{p:g}" for p in rep.set1_plds)
    joined2 = " ".join(f"{p:g}" for p in rep.set2_plds)
    summary.rows.append([1, joined1, rep.mean_relative_error_f,
                         rep.mean_relative_error_att, int(rep.valid.sum())])
    summary.rows.append([2, joined2, rep.mean_relative_error_f,
                         rep.mean_relative_error_att, int(rep.valid.sum())])
    emit_table(summary, out / "subsets_summary.csv")

    per_voxel = ExperimentTable(columns=[
        "voxel (index)", "f_set1 (mL/min/100g)", "f_set2 (mL/min/100g)",
        "att_set1 (s)", "att_set2 (s)", "rel_err_f (1)", "rel_err_att (1)"])
    for i in range(dataset.dims[0]):
        per_voxel.rows.append([
            i, rep.maps_1.f[i], rep.maps_2.f[i], rep.maps_1.att[i],
            rep.maps_2.att[i],
            None if not np.isfinite(rep.relative_error_f[i])
            else rep.relative_error_f[i],
            None if not np.isfinite(rep.relative_error_att[i])
            else rep.relative_error_att[i]])
    emit_table(per_voxel, out / "subsets_relative_error.csv")

    var_table = subset_variance_table(rep.variance_rows)
    emit_table(var_table, out / "subsets_variance.csv")
    if len(var_table.rows) >= 2:
        for subset_id in (1, 2):
            rows = [r for r in rep.variance_rows if r.subset == subset_id]
            if len(rows) < 2:
                continue
            sub_table = subset_variance_table(rows)
            emit_lineplot_svg(
                sub_table, "m (count)",
                ["var_f ((mL/min/100g)^2)", "crb_f ((mL/min/100g)^2)",
                 "var_att (s^2)", "crb_att (s^2)"],
                PlotOptions(title=f"subset {subset_id}: bootstrap variance "
                                  f"vs theoretical bound", logy=True,
                            xlabel="repetitions m",
                            dotted=("crb_f ((mL/min/100g)^2)",
                                    "crb_att (s^2)")),
                out / f"subsets_variance_set{subset_id}.svg")
    print(f"subset sizes {len(rep.set1_plds)}/{len(rep.set2_plds)}, "
          f"mean relative error f={rep.mean_relative_error_f:.4g} "
          f"att={rep.mean_relative_error_att:.4g}")
    if not rep.valid.any():
        print("error: no voxel valid in both subset fits", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_t1test(args) -> int:
    dataset, protocol = _load(args)
    res = t1_experiment(dataset, protocol, args.t1_global, args.t1_alt,
                        args.top_fraction, box=_box_for(args.organ),
                        threads=args.threads)
    out = Path(args.out)
    emit_table(t1_table(res), out / "t1test.csv")

    # sorted per-voxel lambda_max curves make the two arms comparable at a
    # glance without spatial geometry
    ok = res.joint_valid
    lg = np.sort(res.bounds_global.lambda_max[ok])[::-1]
    lv = np.sort(res.bounds_voxelwise.lambda_max[ok])[::-1]
    if lg.size >= 2:
        curve = ExperimentTable(columns=["rank (index)",
                                         "lambda_max_global (1)",
                                         "lambda_max_voxelwise (1)"])
        for i in range(lg.size):
            curve.rows.append([i, lg[i], lv[i]])
        emit_lineplot_svg(
            curve, "rank (index)",
            ["lambda_max_global (1)", "lambda_max_voxelwise (1)"],
            PlotOptions(title="sorted voxel lambda_max: global vs voxelwise T1",
                        xlabel="voxel rank", ref_line=1.0),
            out / "t1test_lambda_max.svg")
    print(f"mean lambda_max global={res.mean_lambda_max_global:.4f} "
          f"voxelwise={res.mean_lambda_max_voxelwise:.4f} "
          f"(n={int(ok.sum())})")
    if not ok.any():
        print("error: no voxel valid in both arms", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def _cmd_plot(args) -> int:
    table = read_table(args.table)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_lineplot_svg(table, args.x, list(args.y),
                      PlotOptions(logy=args.logy,
                                  dotted=tuple(args.dotted),
                                  ref_line=args.ref_line),
                      out / args.name)
    print(f"wrote {out / args.name}")
    return EXIT_OK


_COMMANDS = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "bounds": _cmd_bounds,
    "converge": _cmd_converge,
    "subsets": _cmd_subsets,
    "t1test": _cmd_t1test,
    "plot": _cmd_plot,
}


def cli_main(argv) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (FormatError, SizeMismatch, VersionUnsupported, IoFailure,
            ColumnMissing, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except AslMcrbError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
