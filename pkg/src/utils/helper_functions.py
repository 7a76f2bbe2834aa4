"""
Helper functions for the cortical thickness toolkit.
Contains utility functions for file output, seeding, comparison statistics,
apparent-thickness baselines and diagnostic plots.
"""

import os
import tempfile
from typing import Dict, List, Optional, Sequence

import numpy as np
import matplotlib.pyplot as plt
from scipy import stats
import typing_extensions as typing

from src.errors import LengthMismatchError

# Tissue mineral density of fully mineralized bone (mg CaHA/cm3)
TMD_REFERENCE = 1200.0


# Schema of the comparison report written by the report command
class ComparisonReport(typing.TypedDict):
    n: int
    meanDeviationMm: float
    sdDeviationMm: float
    meanDeviationPct: float
    sdDeviationPct: float
    r2: float
    pValue: float
    rmseMm: float
    rmsePct: float


def atomic_write_bytes(path: str, data: bytes) -> None:
    """
    Write a file so that readers never see a partial version.

    Args:
        path (str): Destination file
        data (bytes): Full file contents
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle, temp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(handle, "wb") as f:
            f.write(data)
        os.replace(temp_path, path)
    except BaseException:
        if os.path.exists(temp_path):
            os.remove(temp_path)
        raise


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def derive_seed(master_seed: int, *keys: int) -> np.random.SeedSequence:
    """Independent, reproducible seed stream for (master seed, keys...)"""
    return np.random.SeedSequence([int(master_seed), *[int(k) for k in keys]])


def compare_to_reference(estimates: Sequence[float], reference: Sequence[float]) -> ComparisonReport:
    """
    Compares per-unit thickness estimates with a reference.

    Args:
        estimates (Sequence[float]): Estimated thickness per unit (mm)
        reference (Sequence[float]): Reference thickness per unit (mm)

    Returns:
        ComparisonReport: Deviation (mm and % of reference), Pearson r2 with its
        two-sided p-value and RMSE (mm and % of mean reference)
    """
    est = np.asarray(estimates, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if est.shape != ref.shape:
        raise LengthMismatchError(f"{est.size} estimates but {ref.size} reference values")
    n = est.size
    if n < 3:
        raise ValueError("comparison needs at least 3 units")
    if np.any(ref <= 0):
        raise ValueError("reference values must be positive")

    diff = est - ref
    pct = 100.0 * diff / ref
    rmse = float(np.sqrt(np.mean(diff ** 2)))

    if np.array_equal(est, ref):
        r2, p_value = 1.0, 0.0
    elif np.std(est) == 0 or np.std(ref) == 0:
        r2, p_value = 0.0, 1.0
    else:
        r = float(np.clip(np.corrcoef(est, ref)[0, 1], -1.0, 1.0))
        r2 = r * r
        if r2 >= 1.0:
            p_value = 0.0
        else:
            t_stat = r * np.sqrt((n - 2) / (1.0 - r2))
            p_value = float(2.0 * stats.t.sf(abs(t_stat), n - 2))
    return {
        "n": int(n),
        "meanDeviationMm": float(np.mean(diff)),
        "sdDeviationMm": float(np.std(diff, ddof=1)),
        "meanDeviationPct": float(np.mean(pct)),
        "sdDeviationPct": float(np.std(pct, ddof=1)),
        "r2": r2,
        "pValue": p_value,
        "rmseMm": rmse,
        "rmsePct": float(100.0 * rmse / np.mean(ref)),
    }


def _center_run(values: np.ndarray, ts: np.ndarray, threshold: float) -> Optional[slice]:
    """Run of samples above threshold that contains (or lies nearest to) t = 0"""
    above = values > threshold
    if not np.any(above):
        return None
    center = int(np.argmin(np.abs(ts)))
    if not above[center]:
        candidates = np.flatnonzero(above)
        center = int(candidates[np.argmin(np.abs(candidates - center))])
    start = center
    while start > 0 and above[start - 1]:
        start -= 1
    stop = center + 1
    while stop < len(values) and above[stop]:
        stop += 1
    return slice(start, stop)


def apparent_thickness(values: Sequence[float], ts: Sequence[float], threshold: float) -> float:
    """Length (mm) of the contiguous above-threshold run around the profile center; 0 if none"""
    values = np.asarray(values, dtype=float)
    ts = np.asarray(ts, dtype=float)
    run = _center_run(values, ts, threshold)
    if run is None:
        return 0.0
    step = float(ts[1] - ts[0])
    return (run.stop - run.start) * step


def apparent_thickness_baseline(profiles, threshold: float) -> np.ndarray:
    """
    Threshold-based apparent thickness of every profile.

    Args:
        profiles: ProfileSet (or iterable of profiles with ``values`` and ``ts``)
        threshold (float): Density between trabecular and cortical levels

    Returns:
        np.ndarray: Apparent thickness per profile (mm)
    """
    return np.array([apparent_thickness(p.values, p.ts, threshold) for p in profiles])


def density_weighted_baseline(profiles, threshold: float, tmd: float = TMD_REFERENCE) -> np.ndarray:
    """Apparent thickness scaled by the mean density inside the run over the tissue mineral density"""
    result = []
    for p in profiles:
        values = np.asarray(p.values, dtype=float)
        run = _center_run(values, np.asarray(p.ts, dtype=float), threshold)
        if run is None:
            result.append(0.0)
            continue
        step = float(p.ts[1] - p.ts[0])
        result.append((run.stop - run.start) * step * float(np.mean(values[run])) / tmd)
    return np.array(result)


def visualize_profile_fit(ts: np.ndarray, measured: np.ndarray, synthesized: np.ndarray,
                          title: str = "Profile fit") -> plt.Figure:
    """
    Creates a plot of a measured profile against its synthesized mean.

    Args:
        ts (np.ndarray): Sample positions (mm)
        measured (np.ndarray): Measured densities
        synthesized (np.ndarray): Model mean densities

    Returns:
        plt.Figure: Matplotlib figure with the visualization.
    """
    fig, (ax, ax_res) = plt.subplots(2, 1, figsize=(8, 6), sharex=True,
                                     gridspec_kw={"height_ratios": [3, 1]})
    ax.plot(ts, measured, marker=".", linestyle="", color="gray", label="measured")
    ax.plot(ts, synthesized, color="tab:red", label="synthesized")
    ax.set_ylabel("Density [mg CaHA/cm$^3$]")
    ax.set_title(title)
    ax.legend()
    ax.grid(True, alpha=0.3)

    ax_res.plot(ts, np.asarray(measured) - np.asarray(synthesized), color="tab:blue")
    ax_res.axhline(y=0, color="gray", linestyle="--", alpha=0.5)
    ax_res.set_xlabel("Position along profile [mm]")
    ax_res.set_ylabel("Residual")

    plt.tight_layout()
    return fig


def visualize_patch_thickness(patch_ids: List[int], means: List[float], sds: List[float],
                              reference: Optional[Dict[int, float]] = None) -> plt.Figure:
    """
    Creates a bar chart of per-patch thickness estimates.

    Returns:
        plt.Figure: Matplotlib figure with the visualization.
    """
    fig, ax = plt.subplots(figsize=(10, 5))
    ax.bar(patch_ids, means, yerr=sds, color="skyblue", capsize=2, label="estimate")
    if reference:
        ids = sorted(reference)
        ax.plot(ids, [reference[i] for i in ids], "k_", markersize=12, label="reference")
    ax.set_xlabel("Patch")
    ax.set_ylabel("Ct.Th [mm]")
    ax.set_title("Cortical thickness per patch")
    ax.legend()
    plt.tight_layout()
    return fig
