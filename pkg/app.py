"""
CorThick - Cortical Thickness from Clinical CT

Command line entry point: fits PSF models from MTF measurements, synthesizes
phantom scans, estimates per-vertex cortical thickness of a specimen and
compares thickness tables.

Exit codes: 0 success, 1 usage error, 2 data error, 3 finished with
non-converged patches.
"""

import argparse
import logging
import sys
from typing import List, Optional

from src.app_manager import PipelineManager
from src.errors import DataError, UsageError
from src.mesh_manager import read_ply
from src.processor.phantom_processor import load_phantom_spec, synthesize_phantom, write_phantom
from src.processor.psf_processor import (fit_mtf, fit_mtf_adaptive, load_psf_model, read_mtf_csv, save_psf_model,
                                         sigma_from_slice_width)
from src.report_manager import VERSION, ReportManager, compare_tables, save_comparison
from src.run_config import RunConfig, load_run_config, with_overrides
from src.volume_manager import calibrate_density, read_metaimage

logger = logging.getLogger("app")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NO_CONVERGENCE = 3


class CliParser(argparse.ArgumentParser):
    """Argument parser that raises UsageError instead of exiting with status 2"""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> CliParser:
    parser = CliParser(prog="corthick", description="Cortical thickness estimation from clinical CT")
    parser.add_argument("--verbose", action="store_true", help="log progress at INFO level")
    parser.add_argument("--debug", action="store_true", help="log MCEM iterations at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    commands.add_parser("version", help="print the package version")

    fit = commands.add_parser("fit-mtf", help="fit a PSF model to a measured MTF")
    fit.add_argument("--mtf", required=True, help="MTF CSV (frequency_per_mm, mtf)")
    fit.add_argument("--out", required=True, help="PSF model JSON to write")
    fit.add_argument("--components", type=int, default=None,
                     help="number of Gaussian components (default: 2, or 3 when 2 fit poorly)")
    fit.add_argument("--slice-width", type=float, default=1.0, help="nominal slice width in mm")
    fit.add_argument("--seed", type=int, default=0)

    phantom = commands.add_parser("phantom", help="synthesize a ground-truth phantom scan")
    phantom.add_argument("--spec", required=True, help="phantom spec JSON")
    phantom.add_argument("--psf-model", required=True, help="PSF model JSON")
    phantom.add_argument("--output-dir", required=True)

    estimate = commands.add_parser("estimate", help="estimate the thickness distribution of a specimen")
    estimate.add_argument("--config", required=True, help="run config JSON")
    estimate.add_argument("--seed", type=int, default=None)
    estimate.add_argument("--threads", type=int, default=None)
    estimate.add_argument("--output-dir", default=None)
    estimate.add_argument("--progress", action="store_true", help="one status line per patch")
    estimate.add_argument("--plots", action="store_true", help="also write diagnostic figures")

    report = commands.add_parser("report", help="compare estimated and reference thickness tables")
    report.add_argument("--estimates", required=True, help="estimated thickness CSV")
    report.add_argument("--reference", required=True, help="reference thickness CSV")
    report.add_argument("--out", required=True, help="comparison JSON to write")
    report.add_argument("--column", default=None, help="thickness column (default thickness_mm or mean_mm)")
    return parser


def configure_logging(args: argparse.Namespace) -> None:
    level = logging.WARNING
    if getattr(args, "progress", False) or args.verbose:
        level = logging.INFO
    if args.debug:
        level = logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s", force=True)


def run_fit_mtf(args: argparse.Namespace) -> int:
    if args.components is not None and args.components < 1:
        raise UsageError("--components must be at least 1")
    if args.slice_width < 0:
        raise UsageError("--slice-width must not be negative")
    samples = read_mtf_csv(args.mtf)
    sigma_z = sigma_from_slice_width(args.slice_width)
    if args.components is None:
        model = fit_mtf_adaptive(samples, args.seed, out_of_plane_sigma=sigma_z)
    else:
        model = fit_mtf(samples, args.components, args.seed, out_of_plane_sigma=sigma_z)
    save_psf_model(model, args.out)
    logger.info(f"Saved {len(model.components)}-component PSF model to {args.out} (RMS {model.fit_rms:.4g})")
    return EXIT_OK


def run_phantom(args: argparse.Namespace) -> int:
    spec = load_phantom_spec(args.spec)
    psf_model = load_psf_model(args.psf_model)
    result = synthesize_phantom(spec, psf_model)
    paths = write_phantom(result, args.output_dir)
    logger.info(f"Wrote phantom files: {', '.join(sorted(paths))}")
    return EXIT_OK


def _psf_for(config: RunConfig):
    if config.paths.psf_model is not None:
        return load_psf_model(config.paths.psf_model)
    samples = read_mtf_csv(config.paths.mtf)
    sigma_z = sigma_from_slice_width(config.psf.slice_width_mm)
    if config.psf.components is None:
        return fit_mtf_adaptive(samples, config.psf.seed, out_of_plane_sigma=sigma_z)
    return fit_mtf(samples, config.psf.components, config.psf.seed, out_of_plane_sigma=sigma_z)


def run_estimate(args: argparse.Namespace) -> int:
    if args.threads is not None and args.threads < 1:
        raise UsageError("--threads must be at least 1")
    config = load_run_config(args.config)
    config = with_overrides(config, seed=args.seed, threads=args.threads, output_dir=args.output_dir,
                            plots=args.plots)

    volume = read_metaimage(config.paths.volume)
    volume = calibrate_density(volume, config.calibration.slope, config.calibration.intercept)
    mesh = read_ply(config.paths.mesh)
    psf_model = _psf_for(config)
    prior = config.prior.build()

    pipeline = PipelineManager(psf_model, prior, config)
    model = pipeline.estimate_specimen(volume, mesh)

    threshold = config.baseline.threshold
    if threshold is None:
        threshold = (prior.rho_ct.mu0 + prior.rho_tr.mu0) / 2.0
    reports = ReportManager(config.paths.output_dir)
    outputs = reports.build_outputs(model, config.to_record(), threshold, config.baseline.tmd,
                                    kernels=pipeline.kernels, dump_profiles=config.dump_profiles,
                                    plots=config.plots)
    reports.write_outputs(outputs)

    if model.no_convergence:
        logger.warning("Some patches did not converge; see summary.json")
        return EXIT_NO_CONVERGENCE
    return EXIT_OK


def run_report(args: argparse.Namespace) -> int:
    report = compare_tables(args.estimates, args.reference, args.column)
    save_comparison(report, args.out)
    logger.info(f"Compared {report['n']} rows: mean deviation {report['meanDeviationMm']:.4f} mm, "
                f"r2 {report['r2']:.3f}")
    return EXIT_OK


COMMANDS = {
    "fit-mtf": run_fit_mtf,
    "phantom": run_phantom,
    "estimate": run_estimate,
    "report": run_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args)
        if args.command == "version":
            print(f"corthick {VERSION}")
            return EXIT_OK
        return COMMANDS[args.command](args)
    except UsageError as e:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except (DataError, ValueError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
