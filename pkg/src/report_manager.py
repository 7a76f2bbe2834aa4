"""
Report Manager Module
Builds and saves the outputs of a specimen run (patch table, vertex thickness,
summary, diagnostics, mesh and optional profile dumps) and reads thickness
tables back for comparison reports.
"""

import csv
import io
import json
import logging
import math
import os
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import matplotlib.pyplot as plt

from src.analyzer import latent_state_of
from src.app_manager import ThicknessModel
from src.bone_model import profile_fit_rows
from src.errors import DataError, LengthMismatchError
from src.mesh_manager import format_ply
from src.processor.psf_processor import KernelBank
from src.utils.helper_functions import (ComparisonReport, apparent_thickness_baseline, atomic_write_bytes,
                                        compare_to_reference, density_weighted_baseline,
                                        visualize_patch_thickness, visualize_profile_fit)

logger = logging.getLogger("report_manager")

VERSION = "1.0.0"
DEFAULT_COLUMNS = ("thickness_mm", "mean_mm")


def _finite_or_none(value: Any) -> Any:
    """Replace non-finite floats so the JSON stays standard"""
    if isinstance(value, dict):
        return {k: _finite_or_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_finite_or_none(v) for v in value]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def to_json(record: Dict[str, Any]) -> str:
    return json.dumps(_finite_or_none(record), indent=2, ensure_ascii=False) + "\n"


def _cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return repr(value) if math.isfinite(value) else "nan"
    return value


def _table(header: List[str], rows: List[List[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buffer.getvalue()


def _figure_bytes(fig: plt.Figure) -> bytes:
    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", metadata={"Software": None})
    plt.close(fig)
    return buffer.getvalue()


class ReportManager:
    def __init__(self, output_dir: str = "output"):
        """Initialize the report manager"""
        self.output_dir = output_dir

    def patches_csv(self, model: ThicknessModel) -> str:
        header = ["patch_id", "mean_mm", "sd_mm", "ess", "iterations", "median_mm", "profiles", "no_convergence"]
        rows = [[e.patch_id, e.thickness_mean, e.thickness_sd, e.ess, e.iterations, e.thickness_median,
                 e.profile_count, int(e.no_convergence)] for e in model.patch_estimates]
        return _table(header, rows)

    def vertex_csv(self, model: ThicknessModel) -> str:
        thickness = model.mesh.thickness
        return _table(["vertex_id", "thickness_mm", "multiplicity"],
                      [[i, float(thickness[i]), int(model.coverage[i])] for i in range(model.mesh.vertex_count)])

    def diagnostics_jsonl(self, model: ThicknessModel) -> str:
        lines = [json.dumps(_finite_or_none(dict(record)), ensure_ascii=False)
                 for estimate in model.patch_estimates for record in estimate.trace]
        return "".join(line + "\n" for line in lines)

    def summary(self, model: ThicknessModel, config_record: Dict[str, Any],
                baseline_threshold: float, tmd: float) -> Dict[str, Any]:
        """
        Summary record of a run

        Args:
            model: Estimated thickness model
            config_record: Fully resolved run configuration
            baseline_threshold: Density threshold of the apparent-thickness baseline
            tmd: Tissue mineral density of the density-weighted baseline

        Returns:
            Dict ready for JSON
        """
        profiles = [p for pid in sorted(model.profile_sets) for p in model.profile_sets[pid]]
        apparent = apparent_thickness_baseline(profiles, baseline_threshold)
        weighted = density_weighted_baseline(profiles, baseline_threshold, tmd)
        return {
            "version": VERSION,
            "specimen": {
                "mean_mm": model.specimen_mean,
                "sd_mm": model.specimen_sd,
                "patches": len(model.patches),
                "successful_patches": len(model.patch_estimates),
                "failed_patches": {str(k): v for k, v in sorted(model.failures.items())},
                "no_convergence_patches": [e.patch_id for e in model.patch_estimates if e.no_convergence],
            },
            "noise": {"sigma_eps": model.noise.sigma_eps, "sigma_xi": model.noise.sigma_xi,
                      "sigma_grid": model.noise.sigma_grid},
            "baseline": {
                "threshold": baseline_threshold,
                "apparent_mean_mm": float(np.mean(apparent)) if apparent.size else None,
                "apparent_sd_mm": float(np.std(apparent, ddof=1)) if apparent.size > 1 else None,
                "density_weighted_mean_mm": float(np.mean(weighted)) if weighted.size else None,
            },
            "patch_estimates": [e.to_record() for e in model.patch_estimates],
            "patch_weights": {str(k): v for k, v in sorted(model.patch_weights.items())},
            "config": config_record,
        }

    def profile_dumps(self, model: ThicknessModel, kernels: KernelBank, plots: bool = False) -> Dict[str, bytes]:
        """Measured vs synthesized profiles of every successful patch at its posterior mean latents"""
        outputs = {}
        estimates = {e.patch_id: e for e in model.patch_estimates}
        for patch_id, profiles in sorted(model.profile_sets.items()):
            x = latent_state_of(estimates[patch_id])
            for index, profile in enumerate(profiles):
                rows = profile_fit_rows(profile, x, kernels.kernel(profile.alpha), index)
                name = os.path.join("profiles", f"patch_{patch_id:03d}_vertex_{profile.vertex_id}")
                outputs[name + ".csv"] = _table(["t_mm", "measured", "mean", "residual"],
                                                [list(map(float, row)) for row in rows]).encode("utf-8")
                if plots:
                    fig = visualize_profile_fit(rows[:, 0], rows[:, 1], rows[:, 2],
                                                title=f"Patch {patch_id}, vertex {profile.vertex_id}, "
                                                      f"alpha {profile.alpha:.0f} deg")
                    outputs[name + ".png"] = _figure_bytes(fig)
        return outputs

    def build_outputs(self, model: ThicknessModel, config_record: Dict[str, Any], baseline_threshold: float,
                      tmd: float, kernels: Optional[KernelBank] = None, dump_profiles: bool = False,
                      plots: bool = False) -> Dict[str, bytes]:
        """Render every output file in memory; nothing is written yet"""
        outputs: Dict[str, bytes] = {
            "patches.csv": self.patches_csv(model).encode("utf-8"),
            "vertex_thickness.csv": self.vertex_csv(model).encode("utf-8"),
            "summary.json": to_json(self.summary(model, config_record, baseline_threshold, tmd)).encode("utf-8"),
            "diagnostics.jsonl": self.diagnostics_jsonl(model).encode("utf-8"),
            "thickness.ply": format_ply(model.mesh),
        }
        if dump_profiles and kernels is not None:
            outputs.update(self.profile_dumps(model, kernels, plots))
        if plots:
            fig = visualize_patch_thickness([e.patch_id for e in model.patch_estimates],
                                            [e.thickness_mean for e in model.patch_estimates],
                                            [e.thickness_sd for e in model.patch_estimates])
            outputs["patch_thickness.png"] = _figure_bytes(fig)
        return outputs

    def write_outputs(self, outputs: Dict[str, Union[bytes, str]]) -> List[str]:
        """Write every rendered output atomically; returns the written paths"""
        written = []
        for name in sorted(outputs):
            data = outputs[name]
            path = os.path.join(self.output_dir, name)
            atomic_write_bytes(path, data.encode("utf-8") if isinstance(data, str) else data)
            written.append(path)
        logger.info(f"Wrote {len(written)} files to {self.output_dir}")
        return written


def read_thickness_csv(path: str, column: Optional[str] = None) -> np.ndarray:
    """
    Read one thickness column of a CSV table.

    Args:
        path: CSV file with a header row
        column: Column name; defaults to ``thickness_mm`` or else ``mean_mm``

    Returns:
        Column values in row order (NaN for empty or "nan" cells)
    """
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.reader(f)
            header = next(reader, None)
            rows = [row for row in reader if row]
    except OSError as e:
        raise DataError(f"cannot read table: {e}", path=path)
    if not header:
        raise DataError("empty table", path=path)
    header = [h.strip() for h in header]
    if column is None:
        column = next((c for c in DEFAULT_COLUMNS if c in header), None)
        if column is None:
            raise DataError(f"no {' or '.join(DEFAULT_COLUMNS)} column", path=path)
    if column not in header:
        raise DataError("missing column", path=path, field=column)
    index = header.index(column)
    values = []
    for number, row in enumerate(rows, start=2):
        try:
            cell = row[index].strip()
            values.append(float(cell) if cell else float("nan"))
        except (IndexError, ValueError):
            raise DataError(f"malformed value on line {number}", path=path, field=column)
    return np.array(values, dtype=float)


def compare_tables(estimates_path: str, reference_path: str, column: Optional[str] = None) -> ComparisonReport:
    """Compare two thickness tables row by row; rows where either value is missing are skipped"""
    estimates = read_thickness_csv(estimates_path, column)
    reference = read_thickness_csv(reference_path, column)
    if estimates.size != reference.size:
        raise LengthMismatchError(f"{estimates.size} estimate rows but {reference.size} reference rows",
                                  path=estimates_path)
    keep = np.isfinite(estimates) & np.isfinite(reference)
    if not np.all(keep):
        logger.info(f"Skipping {int((~keep).sum())} rows without values")
    try:
        return compare_to_reference(estimates[keep], reference[keep])
    except ValueError as e:
        raise DataError(str(e), path=reference_path)


def comparison_json(report: ComparisonReport) -> str:
    return to_json(dict(report))


def save_comparison(report: ComparisonReport, path: str) -> None:
    atomic_write_bytes(path, comparison_json(report).encode("utf-8"))


def load_summary(path: str) -> Tuple[float, float]:
    """Specimen mean and SD of a summary JSON"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            record = json.load(f)
        return float(record["specimen"]["mean_mm"]), float(record["specimen"]["sd_mm"])
    except (OSError, KeyError, TypeError, ValueError) as e:
        raise DataError(f"invalid summary: {e}", path=path)
