"""
PSF Processor Module
Fits the sum-of-Gaussians MTF model of the scanner's in-plane PSF, models the
out-of-plane PSF and builds the angle-dependent 1-D kernels used along profiles.
"""

import json
import logging
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize, special
import typing_extensions as typing

from src.errors import DataError, FitDivergedError
from src.utils.helper_functions import atomic_write_text

logger = logging.getLogger("psf_processor")

MTF_CSV_HEADER = ("frequency_per_mm", "mtf")
# Below this sin/cos the corresponding PSF factor is treated as a Dirac
DIRAC_LIMIT = 1e-3
# Kernel half-width in standard deviations of its widest Gaussian term
SUPPORT_SIGMAS = 7.0
# CDF table resolution relative to the profile step
CDF_OVERSAMPLING = 100
ADAPTIVE_RMS_LIMIT = 0.01
DEFAULT_STARTS = 16


# Schema of the PSF model JSON file
class PsfComponentRecord(typing.TypedDict):
    a: float
    b: float
    c: float


class PsfModelRecord(typing.TypedDict):
    components: List[PsfComponentRecord]
    out_of_plane_sigma_mm: float
    fit_rms: Optional[float]


@dataclass(frozen=True)
class MtfSamples:
    """Measured MTF; normalized so that the value at f = 0 is 1"""
    freqs: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        freqs = np.asarray(self.freqs, dtype=float).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if freqs.size != values.size or freqs.size < 2:
            raise DataError("MTF needs at least two (frequency, value) pairs")
        if not (np.all(np.isfinite(freqs)) and np.all(np.isfinite(values))):
            raise DataError("MTF samples must be finite")
        if freqs[0] < 0 or np.any(np.diff(freqs) <= 0):
            raise DataError("MTF frequencies must be non-negative and strictly increasing", field="frequency_per_mm")
        if freqs[0] != 0.0:
            raise DataError("MTF must start at frequency 0 for normalization", field="frequency_per_mm")
        if values[0] <= 0:
            raise DataError("MTF value at frequency 0 must be positive", field="mtf")
        values = values / values[0]
        if values.max() > 1.05:
            raise DataError("normalized MTF exceeds 1.05", field="mtf")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "values", values)


def read_mtf_csv(path: str) -> MtfSamples:
    """Read an MTF CSV with header ``frequency_per_mm,mtf``"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
            table = np.loadtxt(f, delimiter=",", ndmin=2)
    except OSError as e:
        raise DataError(f"cannot read MTF: {e}", path=path)
    except ValueError as e:
        raise DataError(f"malformed MTF row: {e}", path=path)
    if tuple(h.strip() for h in header.split(",")) != MTF_CSV_HEADER:
        raise DataError(f"expected header {','.join(MTF_CSV_HEADER)}", path=path, field="header")
    if table.shape[1] != 2:
        raise DataError("expected two columns", path=path)
    try:
        return MtfSamples(freqs=table[:, 0], values=table[:, 1])
    except DataError as e:
        raise DataError(str(e), path=path)


@dataclass(frozen=True)
class PsfComponent:
    a: float
    b: float
    c: float


@dataclass(frozen=True)
class PsfModel:
    """
    In-plane PSF as a sum of Gaussians in frequency, plus a Gaussian
    out-of-plane PSF of standard deviation ``out_of_plane_sigma`` (mm).
    """
    components: Tuple[PsfComponent, ...]
    out_of_plane_sigma: float
    fit_rms: Optional[float] = None

    def __post_init__(self):
        components = tuple(self.components)
        if not components:
            raise ValueError("PSF model needs at least one component")
        if any(not np.isfinite(k.c) or k.c <= 0 for k in components):
            raise ValueError("every component width c must be positive")
        if not np.isfinite(self.out_of_plane_sigma) or self.out_of_plane_sigma < 0:
            raise ValueError("out-of-plane sigma must be non-negative")
        object.__setattr__(self, "components", components)
        if self._denominator() <= 0:
            raise ValueError("PSF model has non-positive total weight")

    def _denominator(self) -> float:
        a, b, c = self.arrays()
        return float(2.0 * np.sum(a * np.exp(-b ** 2 / (2.0 * c ** 2))))

    def arrays(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = np.array([k.a for k in self.components], dtype=float)
        b = np.array([k.b for k in self.components], dtype=float)
        c = np.array([k.c for k in self.components], dtype=float)
        return a, b, c

    @property
    def norm_const(self) -> float:
        return 1.0 / self._denominator()

    def with_out_of_plane_sigma(self, sigma: float) -> "PsfModel":
        return PsfModel(self.components, sigma, self.fit_rms)


def sigma_from_slice_width(width: float) -> float:
    """Gaussian sigma whose FWHM equals the nominal slice width"""
    return float(width) / np.sqrt(8.0 * np.log(2.0))


def _mtf_from_arrays(a, b, c, f) -> np.ndarray:
    f = np.asarray(f, dtype=float)[..., None]
    terms = np.exp(-(f - b) ** 2 / (2.0 * c ** 2)) + np.exp(-(f + b) ** 2 / (2.0 * c ** 2))
    denominator = 2.0 * np.sum(a * np.exp(-b ** 2 / (2.0 * c ** 2)))
    return np.sum(a * terms, axis=-1) / denominator


def mtf(model: PsfModel, f) -> np.ndarray:
    """Modeled MTF at frequencies ``f`` (1/mm); equals 1 at f = 0"""
    return _mtf_from_arrays(*model.arrays(), f)


def in_plane_psf(model: PsfModel, t) -> np.ndarray:
    """In-plane line-spread function at positions ``t`` (mm); integrates to 1"""
    a, b, c = model.arrays()
    t = np.asarray(t, dtype=float)[..., None]
    xi = 2.0 * np.sqrt(2.0 * np.pi) * c * np.exp(-2.0 * np.pi ** 2 * c ** 2 * t ** 2) * np.cos(2.0 * np.pi * b * t)
    return model.norm_const * np.sum(a * xi, axis=-1)


def in_plane_variance(model: PsfModel) -> float:
    """Second moment of the in-plane line-spread function (mm^2)"""
    a, b, c = model.arrays()
    curvature = 2.0 * a * np.exp(-b ** 2 / (2.0 * c ** 2)) * (1.0 / c ** 2 - b ** 2 / c ** 4)
    return float(model.norm_const * np.sum(curvature) / (4.0 * np.pi ** 2))


def _unpack(params: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.concatenate([[1.0], params[:n - 1]])
    b = params[n - 1:2 * n - 1]
    c = np.exp(params[2 * n - 1:])
    return a, b, c


def _half_level_frequency(samples: MtfSamples) -> float:
    below = np.flatnonzero(samples.values < 0.5)
    if below.size == 0:
        return float(samples.freqs[-1])
    i = int(below[0])
    if i == 0:
        return float(samples.freqs[0]) or float(samples.freqs[1])
    f0, f1 = samples.freqs[i - 1], samples.freqs[i]
    v0, v1 = samples.values[i - 1], samples.values[i]
    return float(f0 + (v0 - 0.5) * (f1 - f0) / (v0 - v1))


def fit_mtf(samples: MtfSamples, n_components: int, seed: int,
            out_of_plane_sigma: float = 0.0, n_starts: int = DEFAULT_STARTS) -> PsfModel:
    """
    Least-squares fit of the sum-of-Gaussians MTF model.

    The first weight is fixed to 1 (the model is scale invariant), widths are
    optimized as log c so they stay positive. The first start is deterministic
    (all centers at 0, widths from the half-level frequency); the remaining
    ``n_starts - 1`` starts are drawn from ``seed``.

    Args:
        samples: Normalized MTF samples
        n_components: Number of Gaussian components
        seed: Seed of the random starts
        out_of_plane_sigma: Out-of-plane sigma stored on the returned model (mm)
        n_starts: Number of optimizer starts

    Returns:
        PsfModel with ``fit_rms`` set

    Raises:
        FitDivergedError: if no start beats the constant-model RMS
    """
    if n_components < 1:
        raise ValueError(f"n_components must be at least 1, got {n_components}")
    if samples.freqs.size < 3 * n_components:
        raise DataError(f"{samples.freqs.size} MTF samples are too few for {n_components} components")

    n = n_components
    f, y = samples.freqs, samples.values

    def residuals(params: np.ndarray) -> np.ndarray:
        a, b, c = _unpack(params, n)
        if 2.0 * np.sum(a * np.exp(-b ** 2 / (2.0 * c ** 2))) <= 1e-9:
            return np.full_like(y, 1e3)
        return _mtf_from_arrays(a, b, c, f) - y

    c0 = _half_level_frequency(samples) / np.sqrt(2.0 * np.log(2.0))
    rng = np.random.default_rng(seed)
    starts = [np.concatenate([np.full(n - 1, 0.5), np.zeros(n),
                              np.log(c0 * 1.5 ** np.arange(n))])]
    for _ in range(n_starts - 1):
        starts.append(np.concatenate([
            rng.uniform(0.1, 1.5, n - 1),
            rng.uniform(0.0, 0.5 * f[-1], n),
            np.log(c0) + rng.normal(0.0, 0.5, n),
        ]))

    baseline = float(np.sqrt(np.mean((y - y.mean()) ** 2)))
    best_params, best_rms = None, np.inf
    for start in starts:
        try:
            result = optimize.least_squares(residuals, start, ftol=1e-14, xtol=1e-14, gtol=1e-14, max_nfev=4000)
        except (ValueError, FloatingPointError) as e:
            logger.debug(f"MTF start failed: {e}")
            continue
        rms = float(np.sqrt(np.mean(residuals(result.x) ** 2)))
        if np.isfinite(rms) and rms < best_rms:
            best_params, best_rms = result.x, rms

    if best_params is None or best_rms >= baseline:
        raise FitDivergedError(f"MTF fit RMS {best_rms:.3g} does not beat the constant baseline {baseline:.3g}")

    a, b, c = _unpack(best_params, n)
    order = np.lexsort((c, np.abs(b)))
    components = tuple(PsfComponent(float(a[k]), float(abs(b[k])), float(c[k])) for k in order)
    logger.info(f"Fitted {n}-component MTF model, RMS {best_rms:.3g}")
    return PsfModel(components, out_of_plane_sigma, best_rms)


def fit_mtf_adaptive(samples: MtfSamples, seed: int, out_of_plane_sigma: float = 0.0) -> PsfModel:
    """Fit 2 components and refit with 3 if the residual RMS stays above 0.01"""
    model = fit_mtf(samples, 2, seed, out_of_plane_sigma)
    if model.fit_rms > ADAPTIVE_RMS_LIMIT and samples.freqs.size >= 9:
        logger.warning(f"MTF fit RMS {model.fit_rms:.3g} > {ADAPTIVE_RMS_LIMIT}, refitting with 3 components")
        try:
            refit = fit_mtf(samples, 3, seed, out_of_plane_sigma)
        except FitDivergedError:
            return model
        if refit.fit_rms < model.fit_rms:
            return refit
    return model


def _fourier_terms(model: PsfModel, alpha: float) -> Optional[List[Tuple[float, float, float]]]:
    """
    Gaussian terms (amplitude, center, variance) of the Fourier transform of
    the combined kernel at angle ``alpha`` (degrees); None for a Dirac kernel.
    """
    radians = np.deg2rad(alpha)
    sin_a, cos_a = abs(np.sin(radians)), abs(np.cos(radians))
    in_plane = sin_a >= DIRAC_LIMIT
    out_of_plane = cos_a >= DIRAC_LIMIT and model.out_of_plane_sigma > 0

    if in_plane:
        norm = model.norm_const
        terms = []
        for k in model.components:
            v = (k.c / sin_a) ** 2
            terms.append((norm * k.a, k.b / sin_a, v))
            terms.append((norm * k.a, -k.b / sin_a, v))
    else:
        terms = [(1.0, 0.0, np.inf)]

    if out_of_plane:
        tau_sq = 1.0 / (4.0 * np.pi ** 2 * (cos_a * model.out_of_plane_sigma) ** 2)
        combined = []
        for amplitude, center, v in terms:
            if np.isinf(v):
                combined.append((amplitude, 0.0, tau_sq))
                continue
            v_new = 1.0 / (1.0 / v + 1.0 / tau_sq)
            combined.append((amplitude * np.exp(-center ** 2 / (2.0 * (v + tau_sq))), center * v_new / v, v_new))
        terms = combined
    elif not in_plane:
        return None
    return terms


def combined_psf(model: PsfModel, alpha: float, t) -> np.ndarray:
    """
    Continuous 1-D PSF along a profile at angle ``alpha`` (degrees) to the scanner axis.

    Raises:
        ValueError: for the Dirac limit, which has no density
    """
    terms = _fourier_terms(model, alpha)
    if terms is None:
        raise ValueError("kernel is a Dirac at this angle")
    t = np.asarray(t, dtype=float)
    value = np.zeros_like(t)
    for amplitude, center, v in terms:
        value += amplitude * np.sqrt(2.0 * np.pi * v) * np.exp(-2.0 * np.pi ** 2 * v * t ** 2) * np.cos(2.0 * np.pi * center * t)
    return value


def _combined_cdf(terms, t: np.ndarray) -> np.ndarray:
    value = np.zeros_like(t)
    for amplitude, center, v in terms:
        z = np.sqrt(2.0 * np.pi ** 2 * v) * (t - 1j * center / (2.0 * np.pi * v))
        value += amplitude * np.exp(-center ** 2 / (2.0 * v)) * np.real(0.5 * (1.0 + special.erf(z)))
    return value


@dataclass(frozen=True)
class DiscreteKernel:
    """Combined PSF sampled on a symmetric grid, with its CDF table and autocorrelation"""
    alpha: float
    step: float
    taps: np.ndarray
    support: float
    cdf_ts: np.ndarray
    cdf_values: np.ndarray
    autocorrelation: np.ndarray
    box_widths: Tuple[float, float] = (0.0, 0.0)

    @property
    def ts(self) -> np.ndarray:
        half = (len(self.taps) - 1) // 2
        return np.arange(-half, half + 1) * self.step

    @property
    def energy(self) -> float:
        """Sum of squared taps times step, i.e. (g * g)(0)"""
        return float(np.sum(self.taps ** 2) * self.step)


def voxel_box_widths(voxel_size: Sequence[float], alpha: float) -> Tuple[float, float]:
    """
    Widths of the voxel footprint projected on a profile at angle ``alpha``.

    The in-plane pair of boxes is replaced by one box of equal variance, which
    does not depend on the profile azimuth for square pixels.
    """
    ax, ay, az = (float(v) for v in voxel_size)
    radians = np.deg2rad(alpha)
    in_plane = np.sqrt(0.5 * (ax ** 2 + ay ** 2)) * abs(np.sin(radians))
    return float(in_plane), float(az * abs(np.cos(radians)))


def _box_smooth_cdf(grid: np.ndarray, cdf: np.ndarray, width: float) -> np.ndarray:
    """CDF of the density convolved with a centered box of ``width``; the CDF saturates at the grid ends"""
    h = grid[1] - grid[0]
    pad = int(np.ceil(0.5 * width / h)) + 1
    extended = np.concatenate([grid[0] - h * np.arange(pad, 0, -1), grid, grid[-1] + h * np.arange(1, pad + 1)])
    values = np.concatenate([np.zeros(pad), cdf, np.ones(pad)])
    integral = integrate.cumulative_trapezoid(values, extended, initial=0.0)
    upper = np.interp(grid + 0.5 * width, extended, integral)
    lower = np.interp(grid - 0.5 * width, extended, integral)
    return (upper - lower) / width


def combined_kernel(model: PsfModel, alpha: float, step: float,
                    voxel_size: Optional[Sequence[float]] = None) -> DiscreteKernel:
    """
    Discretize the angle-dependent PSF g_alpha.

    The in-plane line-spread function scaled by sin(alpha) is convolved with the
    out-of-plane Gaussian scaled by cos(alpha); either factor becomes a Dirac
    below sin/cos 1e-3. With ``voxel_size`` the kernel is further convolved with
    the voxel footprint projected on the profile, so that it describes grid
    values rather than point samples of the blurred density. Taps are
    renormalized to unit sum times step.

    Args:
        model: PSF model
        alpha: Angle between the profile and the scanner z-axis (degrees, 0..90)
        step: Tap spacing (mm)
        voxel_size: Grid spacing (mm) averaged by every voxel value, or None
    """
    if not 0.0 <= alpha <= 90.0:
        raise ValueError(f"alpha must lie in [0, 90] degrees, got {alpha}")
    if step <= 0:
        raise ValueError(f"step must be positive, got {step}")

    terms = _fourier_terms(model, alpha)
    fine_step = step / CDF_OVERSAMPLING
    boxes = (0.0, 0.0)
    if voxel_size is not None:
        boxes = tuple(b if b >= fine_step else 0.0 for b in voxel_box_widths(voxel_size, alpha))

    if terms is None and not any(boxes):
        taps = np.array([1.0 / step])
        cdf_ts = np.array([-1e-12, 1e-12])
        cdf_values = np.array([0.0, 1.0])
        return _freeze(DiscreteKernel(alpha, step, taps, 0.0, cdf_ts, cdf_values, taps ** 2 * step, boxes))

    widest = 0.0 if terms is None else max(1.0 / (2.0 * np.pi * np.sqrt(v)) for _, _, v in terms)
    half = max(1, int(np.ceil((SUPPORT_SIGMAS * widest + 0.5 * sum(boxes)) / step)))
    support = half * step
    ts = np.arange(-half, half + 1) * step
    fine = np.linspace(-support, support, 2 * half * CDF_OVERSAMPLING + 1)

    if any(boxes):
        if terms is None:
            cdf = np.heaviside(fine, 0.5)
        else:
            cdf = _combined_cdf(terms, fine)
            cdf = (cdf - cdf[0]) / (cdf[-1] - cdf[0])
        for width in boxes:
            if width > 0:
                cdf = _box_smooth_cdf(fine, cdf, width)
        taps = np.interp(ts, fine, np.gradient(cdf, fine))
    else:
        taps = combined_psf(model, alpha, ts)
        cdf = _combined_cdf(terms, fine)
    taps = 0.5 * (taps + taps[::-1])
    taps /= taps.sum() * step

    cdf = (cdf - cdf[0]) / (cdf[-1] - cdf[0])
    cdf = np.maximum.accumulate(np.clip(cdf, 0.0, 1.0))
    autocorrelation = np.correlate(taps, taps, mode="full")[len(taps) - 1:] * step
    return _freeze(DiscreteKernel(float(alpha), float(step), taps, support, fine, cdf, autocorrelation, boxes))


def _freeze(kernel: DiscreteKernel) -> DiscreteKernel:
    for array in (kernel.taps, kernel.cdf_ts, kernel.cdf_values, kernel.autocorrelation):
        array.setflags(write=False)
    return kernel


def kernel_cdf(kernel: DiscreteKernel, t) -> np.ndarray:
    """Running integral of the kernel; 0 below the support and 1 above"""
    return np.interp(np.asarray(t, dtype=float), kernel.cdf_ts, kernel.cdf_values, left=0.0, right=1.0)


def kernel_autocorrelation(kernel: DiscreteKernel, lags) -> np.ndarray:
    """(g * g)(lag) by discrete summation, linearly interpolated; 0 beyond 2 x support"""
    lags = np.abs(np.asarray(lags, dtype=float))
    grid = np.arange(len(kernel.autocorrelation)) * kernel.step
    if len(grid) == 1:
        return np.where(lags < 0.5 * kernel.step, kernel.autocorrelation[0], 0.0)
    return np.interp(lags, grid, kernel.autocorrelation, right=0.0)


def alpha_bin(alpha: float) -> int:
    """1-degree bin of an angle in [0, 90]"""
    return int(np.clip(np.rint(alpha), 0, 90))


class KernelBank:
    """Lazily built, thread-safe cache of one kernel per 1-degree angle bin"""

    def __init__(self, model: PsfModel, step: float, voxel_size: Optional[Sequence[float]] = None):
        if step <= 0:
            raise ValueError(f"step must be positive, got {step}")
        if voxel_size is not None:
            voxel_size = tuple(float(v) for v in voxel_size)
            if len(voxel_size) != 3 or min(voxel_size) <= 0:
                raise ValueError(f"voxel size must be 3 positive lengths, got {voxel_size}")
        self.model = model
        self.step = float(step)
        self.voxel_size = voxel_size
        self._kernels: Dict[int, DiscreteKernel] = {}
        self._lock = threading.Lock()

    def kernel(self, alpha: float) -> DiscreteKernel:
        key = alpha_bin(alpha)
        with self._lock:
            if key not in self._kernels:
                self._kernels[key] = combined_kernel(self.model, float(key), self.step, self.voxel_size)
            return self._kernels[key]

    @property
    def max_support(self) -> float:
        """Support of the widest kernel over a coarse sweep of angle bins"""
        return max(self.kernel(float(alpha)).support for alpha in range(0, 91, 15))


def psf_model_to_record(model: PsfModel) -> PsfModelRecord:
    return {
        "components": [{"a": k.a, "b": k.b, "c": k.c} for k in model.components],
        "out_of_plane_sigma_mm": model.out_of_plane_sigma,
        "fit_rms": model.fit_rms,
    }


def save_psf_model(model: PsfModel, path: str) -> None:
    atomic_write_text(path, json.dumps(psf_model_to_record(model), indent=2, ensure_ascii=False) + "\n")


def load_psf_model(path: str) -> PsfModel:
    """Load a PSF model JSON file written by ``save_psf_model``"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            record = json.load(f)
    except OSError as e:
        raise DataError(f"cannot read PSF model: {e}", path=path)
    except json.JSONDecodeError as e:
        raise DataError(f"invalid JSON: {e}", path=path)
    try:
        components = tuple(PsfComponent(float(k["a"]), float(k["b"]), float(k["c"])) for k in record["components"])
        sigma = float(record["out_of_plane_sigma_mm"])
        fit_rms = record.get("fit_rms")
        return PsfModel(components, sigma, None if fit_rms is None else float(fit_rms))
    except KeyError as e:
        raise DataError("missing key", path=path, field=str(e.args[0]))
    except (TypeError, ValueError) as e:
        raise DataError(str(e), path=path, field="components")
