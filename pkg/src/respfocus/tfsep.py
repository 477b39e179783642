"""Time-frequency echo separation with a Gaussian-ridge mixture.

A slow-time series is analysed with a Hann STFT. Its spectrogram is modelled
as a mixture of M ridges, each a Gaussian in frequency (fixed width sigma)
centred on a Doppler trajectory

    f_D(t) = Re[c0] + Re[c1 e^{j w t}] + Re[c2 e^{j 2 w t}] + c_lin t

with one angular frequency ``w`` shared by all ridges. Parameters are fitted
by EM on the spectrogram cells, each cell being a sample weighted by its
power. The number of ridges is chosen with a BIC whose penalty is scaled by
``alpha``. The fitted posterior ridge probabilities then serve as soft
time-frequency masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import get_window
from scipy.special import logsumexp

from .errors import ConfigurationError, FitError, ShapeError
from .simulator import SignalCube

DEFAULT_WINDOW_LEN = 100
DEFAULT_HOP = 10
DEFAULT_FFT_LEN = 256
DEFAULT_SIGMA = 0.3
DEFAULT_ALPHA = 32.0
OMEGA_BOUNDS = (2 * np.pi * 0.05, 2 * np.pi * 1.0)
CELL_THRESHOLD = 0.01  # fraction of the peak cell power that makes a cell a sample
N_COEFFS = 6
BURN_IN_ITERS = 25
FULL_SEARCH_EVERY = 10  # EM iterations between searches over the whole omega interval


# --------------------------------------------------------------------------- STFT


def hann(window_len: int) -> np.ndarray:
    return get_window("hann", window_len, fftbins=True)


def is_cola(window: np.ndarray, hop: int, rtol: float = 1e-10) -> bool:
    """True when shifted copies of ``window`` spaced by ``hop`` sum to a constant."""
    n = len(window)
    if hop < 1 or hop > n:
        return False
    acc = np.zeros(hop)
    for start in range(0, n, hop):
        seg = window[start:start + hop]
        acc[: len(seg)] += seg
    return bool(np.ptp(acc) <= rtol * abs(acc.mean())) and acc.mean() > 0


def _check_config(window_len: int, hop: int, fft_len: int) -> np.ndarray:
    if fft_len < window_len:
        raise ConfigurationError("fft_len must be >= window_len")
    w = hann(window_len)
    if not is_cola(w, hop):
        raise ConfigurationError(
            f"Hann window of {window_len} samples is not overlap-add constant at hop {hop}"
        )
    return w


@dataclass(frozen=True)
class Spectrogram:
    """STFT frames (frame, freq) with a zero-centred, ascending frequency axis.

    ``power`` (|values|^2) is the spectrogram S(t, f) used for fitting.
    """

    values: np.ndarray
    window_len: int
    hop: int
    fft_len: int
    frame_times: np.ndarray
    freqs: np.ndarray
    sample_rate: float = 1.0
    n_samples: int = 0
    pad: int = 0

    @property
    def power(self) -> np.ndarray:
        v = self.values
        return v.real**2 + v.imag**2

    def with_values(self, values: np.ndarray) -> "Spectrogram":
        return replace(self, values=values)


def _frames(x: np.ndarray, window: np.ndarray, hop: int, fft_len: int, pad: int) -> np.ndarray:
    n = x.shape[-1]
    n_frames = int(math.ceil((n + 2 * pad - len(window)) / hop)) + 1
    total = (n_frames - 1) * hop + len(window)
    padded = np.zeros(x.shape[:-1] + (total,), dtype=np.complex128)
    padded[..., pad:pad + n] = x
    seg = sliding_window_view(padded, len(window), axis=-1)[..., ::hop, :]
    spec = np.fft.fft(seg * window, n=fft_len, axis=-1)
    return np.fft.fftshift(spec, axes=-1)


def _overlap_add(values: np.ndarray, window: np.ndarray, hop: int, n: int, pad: int) -> np.ndarray:
    frames = np.fft.ifft(np.fft.ifftshift(values, axes=-1), axis=-1)[..., : len(window)]
    n_frames = frames.shape[-2]
    total = (n_frames - 1) * hop + len(window)
    out = np.zeros(frames.shape[:-2] + (total,), dtype=np.complex128)
    wsum = np.zeros(total)
    for k in range(n_frames):
        out[..., k * hop:k * hop + len(window)] += frames[..., k, :]
        wsum[k * hop:k * hop + len(window)] += window
    body = slice(pad, pad + n)
    return out[..., body] / wsum[body]


def stft(
    series, window_len: int = DEFAULT_WINDOW_LEN, hop: int = DEFAULT_HOP,
    fft_len: int = DEFAULT_FFT_LEN, sample_rate: float = 1.0, t_start: float = 0.0,
) -> Spectrogram:
    """Hann-windowed STFT of a 1-D complex series.

    The series is zero-padded by ``window_len - hop`` samples on each side so
    that every original sample lies in the fully overlapped region; the
    inverse is then exact over the whole series. ``frame_times`` are the
    absolute times of the frame centres.
    """
    x = np.asarray(series, dtype=np.complex128)
    if x.ndim != 1:
        raise ShapeError("stft expects a 1-D series")
    if len(x) < window_len:
        raise ShapeError(f"series of {len(x)} samples is shorter than the window ({window_len})")
    w = _check_config(window_len, hop, fft_len)
    pad = window_len - hop
    values = _frames(x, w, hop, fft_len, pad)
    starts = np.arange(values.shape[0]) * hop - pad
    return Spectrogram(
        values=values,
        window_len=window_len,
        hop=hop,
        fft_len=fft_len,
        frame_times=t_start + (starts + (window_len - 1) / 2.0) / sample_rate,
        freqs=np.fft.fftshift(np.fft.fftfreq(fft_len, d=1.0 / sample_rate)),
        sample_rate=sample_rate,
        n_samples=len(x),
        pad=pad,
    )


def istft(spec: Spectrogram) -> np.ndarray:
    """Overlap-add synthesis; inverts :func:`stft` exactly for any COLA setting."""
    w = _check_config(spec.window_len, spec.hop, spec.fft_len)
    return _overlap_add(spec.values, w, spec.hop, spec.n_samples, spec.pad)


# ------------------------------------------------------------------ ridge model


def trajectory_design(t, omega_r: float) -> np.ndarray:
    """Rows [1, cos wt, -sin wt, cos 2wt, -sin 2wt, t] so that f_D = design @ c."""
    t = np.asarray(t, dtype=float)
    wt = omega_r * t
    return np.stack(
        [np.ones_like(t), np.cos(wt), -np.sin(wt), np.cos(2 * wt), -np.sin(2 * wt), t], axis=-1
    )


def doppler_trajectory(omega_r: float, c_m, t):
    c_m = np.asarray(c_m, dtype=float)
    if c_m.shape != (N_COEFFS,):
        raise ShapeError("trajectory coefficients must have 6 entries")
    f = trajectory_design(t, omega_r) @ c_m
    return float(f) if np.ndim(f) == 0 else f


def gaussian_ridge(t, f, omega_r: float, c_m, sigma: float):
    """Unit-area Gaussian in f centred on the trajectory at time t."""
    fd = doppler_trajectory(omega_r, c_m, t)
    g = np.exp(-((np.asarray(f) - fd) ** 2) / (2 * sigma**2)) / (math.sqrt(2 * math.pi) * sigma)
    return float(g) if np.ndim(g) == 0 else g


@dataclass(frozen=True)
class MixtureParams:
    M: int
    pi: np.ndarray
    omega_r: float
    C: np.ndarray  # (M, 6)
    sigma: float = DEFAULT_SIGMA
    loglik: float = float("nan")
    mbic: float = float("nan")
    converged: bool = True
    iterations: int = 0

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float).reshape(-1)
        C = np.asarray(self.C, dtype=float).reshape(-1, N_COEFFS)
        if not (1 <= self.M == len(pi) == len(C)):
            raise ShapeError("M must match the lengths of pi and C")
        if np.any(pi < 0) or abs(pi.sum() - 1.0) > 1e-9:
            raise ConfigurationError("mixture weights must be nonnegative and sum to 1")
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be > 0")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "C", C)

    def trajectories(self, t) -> np.ndarray:
        """f_D for every component, shape (M,) + shape(t)."""
        return np.moveaxis(trajectory_design(t, self.omega_r) @ self.C.T, -1, 0)

    def sorted(self) -> "MixtureParams":
        order = np.argsort(-self.pi, kind="stable")
        return replace(self, pi=self.pi[order], C=self.C[order])

    def to_dict(self) -> dict:
        return {
            "M": self.M,
            "pi": self.pi.tolist(),
            "omega_r_rad_s": self.omega_r,
            "C": self.C.tolist(),
            "sigma_hz": self.sigma,
            "mbic": self.mbic,
            "loglik": self.loglik,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixtureParams":
        return cls(
            M=int(d["M"]), pi=np.array(d["pi"]), omega_r=float(d["omega_r_rad_s"]),
            C=np.array(d["C"]), sigma=float(d["sigma_hz"]),
            loglik=float(d.get("loglik", "nan")), mbic=float(d.get("mbic", "nan")),
        )


@dataclass
class _Cells:
    """Spectrogram cells used as weighted samples."""

    frame: np.ndarray
    t: np.ndarray
    f: np.ndarray
    w: np.ndarray
    frame_times: np.ndarray

    @property
    def n(self) -> int:
        return len(self.w)


def _cells(spec: Spectrogram) -> _Cells:
    p = spec.power
    peak = p.max() if p.size else 0.0
    if not peak > 0 or not np.isfinite(peak):
        raise FitError("spectrogram is all zero; nothing to fit")
    k, j = np.nonzero(p > CELL_THRESHOLD * peak)
    w = p[k, j]
    w = w * (len(w) / w.sum())
    return _Cells(k, spec.frame_times[k], spec.freqs[j], w, spec.frame_times)


def sample_count(spec: Spectrogram) -> int:
    """N_s: number of cells whose power exceeds 1% of the peak."""
    p = spec.power
    return int(np.count_nonzero(p > CELL_THRESHOLD * p.max()))


def _log_density(cells: _Cells, pi, omega_r, C, sigma) -> np.ndarray:
    fd = trajectory_design(cells.t, omega_r) @ np.asarray(C).T  # (S, M)
    with np.errstate(divide="ignore"):
        log_pi = np.log(np.asarray(pi))
    return (
        log_pi[None, :]
        - np.log(math.sqrt(2 * math.pi) * sigma)
        - (cells.f[:, None] - fd) ** 2 / (2 * sigma**2)
    )


def _loglik(cells: _Cells, pi, omega_r, C, sigma) -> float:
    return float(cells.w @ logsumexp(_log_density(cells, pi, omega_r, C, sigma), axis=1))


def _frame_moments(cells: _Cells, resp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per component and frame: responsibility mass and mean frequency."""
    n_frames = len(cells.frame_times)
    M = resp.shape[1]
    W = np.empty((M, n_frames))
    F = np.zeros((M, n_frames))
    for m in range(M):
        wr = cells.w * resp[:, m]
        W[m] = np.bincount(cells.frame, weights=wr, minlength=n_frames)
        num = np.bincount(cells.frame, weights=wr * cells.f, minlength=n_frames)
        np.divide(num, W[m], out=F[m], where=W[m] > 0)
    return W, F


def _profile(W: np.ndarray, F: np.ndarray, frame_times: np.ndarray, omega_r: float,
             C_prev: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted LS trajectory per component at fixed omega; returns (RSS, C)."""
    H = trajectory_design(frame_times, omega_r)
    C = C_prev.copy()
    HW = H[None, :, :] * W[:, :, None]  # (M, K, 6)
    gram = np.einsum("mki,kj->mij", HW, H)
    rhs = np.einsum("mki,mk->mi", HW, F)
    for m in range(W.shape[0]):
        if not W[m].any():
            continue
        try:
            C[m] = np.linalg.solve(gram[m], rhs[m])
        except np.linalg.LinAlgError:
            keep = W[m] > 0
            sw = np.sqrt(W[m, keep])
            C[m] = np.linalg.lstsq(H[keep] * sw[:, None], F[m, keep] * sw, rcond=None)[0]
    resid = F - C @ H.T
    return float(np.sum(W * resid**2)), C


def golden_section(fn: Callable[[float], float], lo: float, hi: float,
                   tol: float = 1e-6, max_iter: int = 60) -> tuple[float, float]:
    """Minimise a unimodal ``fn`` on [lo, hi]; returns (x, fn(x))."""
    inv_phi = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = fn(c), fn(d)
    for _ in range(max_iter):
        if b - a <= tol * (abs(a) + abs(b)):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = fn(d)
    return (c, fc) if fc < fd else (d, fd)


def _update_omega(W, F, frame_times, omega, C, bounds, full_search) -> tuple[float, np.ndarray]:
    """Pick the omega minimising the profiled residual; never worse than ``omega``.

    A golden-section search brackets the current value; ``full_search`` adds a
    second search over the whole admissible interval.
    """
    def rss(om):
        return _profile(W, F, frame_times, om, C)[0]

    best = (rss(omega), omega)
    lo, hi = bounds
    brackets = [(max(lo, omega / 1.15), min(hi, omega * 1.15))]
    if full_search:
        brackets.append((lo, hi))
    for a, b in brackets:
        if b > a:
            x, fx = golden_section(rss, a, b, tol=1e-5)
            best = min(best, (fx, x))
    omega = best[1]
    return omega, _profile(W, F, frame_times, omega, C)[1]


def _run_em(cells, pi, omega, C, sigma, max_iter, tol, bounds, trace):
    pi = np.asarray(pi, float).copy()
    C = np.asarray(C, float).copy()
    L = _loglik(cells, pi, omega, C, sigma)
    if trace is not None:
        trace.append(L)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        logp = _log_density(cells, pi, omega, C, sigma)
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        pi = (cells.w @ resp) / cells.w.sum()
        pi = pi / pi.sum()
        W, F = _frame_moments(cells, resp)
        omega, C = _update_omega(W, F, cells.frame_times, omega, C, bounds,
                                 full_search=(it % FULL_SEARCH_EVERY == 1))
        L_new = _loglik(cells, pi, omega, C, sigma)
        if trace is not None:
            trace.append(L_new)
        done = abs(L_new - L) <= tol * abs(L_new)
        L = L_new
        if done:
            converged = True
            break
    return pi, omega, C, L, converged, it


def _initial_single(cells: _Cells, bounds) -> tuple[float, np.ndarray]:
    """Global power-weighted centroid regression, omega from a coarse scan."""
    resp = np.ones((cells.n, 1))
    W, F = _frame_moments(cells, resp)
    C0 = np.zeros((1, N_COEFFS))
    grid = np.linspace(bounds[0], bounds[1], 96)
    scores = [_profile(W, F, cells.frame_times, om, C0)[0] for om in grid]
    k = int(np.argmin(scores))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    omega, _ = golden_section(lambda om: _profile(W, F, cells.frame_times, om, C0)[0], lo, hi)
    return omega, _profile(W, F, cells.frame_times, omega, C0)[1]


def _split_inits(omega, c, sigma, spread, restarts, seed):
    """Deterministic +-sigma split followed by seeded random perturbations."""
    rot = np.array([[np.cos(0.3), -np.sin(0.3)], [np.sin(0.3), np.cos(0.3)]])
    a, b = c.copy(), c.copy()
    a[0] += sigma
    b[0] -= sigma
    a[1:3] = rot @ c[1:3]
    b[1:3] = rot.T @ c[1:3]
    yield np.stack([a, b])
    amp = max(float(np.hypot(c[1], c[2])), spread)
    for r in range(restarts):
        rng = np.random.default_rng([seed, r])
        C = np.repeat(c[None, :], 2, axis=0)
        C[:, 0] += rng.uniform(-2, 2, size=2) * spread
        C[:, 1:5] += rng.normal(scale=amp, size=(2, 4)) * np.array([1, 1, 0.3, 0.3])
        yield C


def em_fit(
    spec: Spectrogram, M: int, sigma: float = DEFAULT_SIGMA, init: MixtureParams | None = None,
    *, max_iter: int = 200, tol: float = 1e-6, restarts: int = 5, seed: int = 0,
    omega_bounds: tuple[float, float] = OMEGA_BOUNDS, trace: list | None = None,
) -> tuple[MixtureParams, float]:
    """Fit an M-ridge mixture to ``spec`` by EM.

    Each spectrogram cell above 1% of the peak power is a sample whose weight
    is its power, rescaled so the weights sum to the number of such cells.
    The log pseudo-likelihood ``sum w log sum_m pi_m G_m`` never decreases
    across iterations. Without ``init``, M = 1 starts from a centroid
    regression and M = 2 from a split of the M = 1 fit plus ``restarts``
    seeded perturbations; the highest-likelihood run is kept. ``trace``, if
    given, receives the likelihood after every iteration of the kept run.
    """
    if not 1 <= M <= 2:
        raise ConfigurationError("M must be 1 or 2")
    if not sigma > 0:
        raise ConfigurationError("sigma must be > 0")
    cells = _cells(spec)

    if init is not None:
        starts = [(init.pi, init.omega_r, init.C)]
    else:
        omega1, C1 = _initial_single(cells, omega_bounds)
        if M == 1:
            starts = [(np.ones(1), omega1, C1)]
        else:
            p1, om1, c1, *_ = _run_em(cells, np.ones(1), omega1, C1, sigma, max_iter, tol,
                                      omega_bounds, None)
            resid = cells.f - trajectory_design(cells.t, om1) @ c1[0]
            spread = math.sqrt(float(cells.w @ resid**2) / cells.w.sum())
            starts = [(np.full(2, 0.5), om1, C) for C in
                      _split_inits(om1, c1[0], sigma, spread, restarts, seed)]

    # short-run EM: every start gets a brief burn-in, only the leader runs to convergence
    burn = max_iter if len(starts) == 1 else min(BURN_IN_ITERS, max_iter)
    best = None
    for pi0, om0, C0 in starts:
        run_trace: list = []
        result = _run_em(cells, pi0, om0, C0, sigma, burn, tol, omega_bounds, run_trace)
        if best is None or result[3] > best[0][3]:
            best = (result, run_trace)
    (pi, omega, C, L, converged, iters), run_trace = best
    if not converged and iters < max_iter:
        more: list = []
        pi, omega, C, L, converged, extra = _run_em(cells, pi, omega, C, sigma, max_iter - iters,
                                                   tol, omega_bounds, more)
        run_trace.extend(more[1:])
        iters += extra
    if trace is not None:
        trace.extend(run_trace)
    params = MixtureParams(M, pi, omega, C, sigma, loglik=L, converged=converged,
                           iterations=iters).sorted()
    return params, L


def mbic(L: float, n_params: int, n_samples: float, alpha: float = DEFAULT_ALPHA) -> float:
    """-2L + alpha * N_p * ln(N_s)."""
    if n_samples < 1:
        raise ConfigurationError("need at least one sample")
    return -2.0 * L + alpha * n_params * math.log(n_samples)


def n_params(M: int) -> int:
    """Trajectories (6 each), free mixture weights (M - 1) and the shared omega."""
    return N_COEFFS * M + (M - 1) + 1


def fit_orders(spec: Spectrogram, sigma: float = DEFAULT_SIGMA, M_max: int = 2,
               alpha: float = DEFAULT_ALPHA, **em_kwargs) -> list[MixtureParams]:
    """EM fits for M = 1..M_max, each annotated with its MBIC."""
    n_s = sample_count(spec)
    fits = []
    for M in range(1, M_max + 1):
        params, L = em_fit(spec, M, sigma, **em_kwargs)
        fits.append(replace(params, mbic=mbic(L, n_params(M), n_s, alpha)))
    return fits


def select_model(spec: Spectrogram, sigma: float = DEFAULT_SIGMA, M_max: int = 2,
                 alpha: float = DEFAULT_ALPHA, **em_kwargs) -> MixtureParams:
    """The MBIC-minimising fit among M = 1..M_max."""
    fits = fit_orders(spec, sigma, M_max, alpha, **em_kwargs)
    return min(fits, key=lambda p: p.mbic)


def tf_weights(params: MixtureParams, t, f) -> np.ndarray:
    """Posterior ridge probabilities, shape (M,) + broadcast(t, f).

    Where every ridge density underflows the cell goes to the ridge with the
    nearest trajectory.
    """
    t, f = np.broadcast_arrays(np.asarray(t, float), np.asarray(f, float))
    fd = params.trajectories(t)
    g = params.pi.reshape((-1,) + (1,) * t.ndim) * np.exp(-((f - fd) ** 2) / (2 * params.sigma**2))
    denom = g.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = g / denom
    dead = ~(denom > 0)
    if np.any(dead):
        nearest = np.argmin(np.abs(f - fd), axis=0)
        hard = (np.arange(params.M).reshape((-1,) + (1,) * t.ndim) == nearest).astype(float)
        w = np.where(dead, hard, w)
    return w


def apply_tf_separation(
    cube_n: SignalCube, params: MixtureParams, window_len: int = DEFAULT_WINDOW_LEN,
    hop: int = DEFAULT_HOP, fft_len: int = DEFAULT_FFT_LEN,
) -> list[SignalCube]:
    """Mask every range/angle bin of ``cube_n`` with each ridge's weights."""
    n = cube_n.num_samples
    if n < window_len:
        raise ShapeError("cube shorter than the STFT window")
    w = _check_config(window_len, hop, fft_len)
    pad = window_len - hop
    X = _frames(cube_n.values, w, hop, fft_len, pad)  # (R, A, frames, F)
    starts = np.arange(X.shape[-2]) * hop - pad
    frame_times = cube_n.t_start + (starts + (window_len - 1) / 2.0) / cube_n.sample_rate
    freqs = np.fft.fftshift(np.fft.fftfreq(fft_len, d=1.0 / cube_n.sample_rate))
    masks = tf_weights(params, frame_times[:, None], freqs[None, :])
    return [
        cube_n.with_values(_overlap_add(X * masks[m], w, hop, n, pad)) for m in range(params.M)
    ]


def peak_series(cube: SignalCube, r: float, theta: float) -> np.ndarray:
    """Slow-time series of the bin nearest to (r, theta)."""
    i = int(np.argmin(np.abs(cube.range_axis - r)))
    j = int(np.argmin(np.abs(cube.angle_grid - theta)))
    return cube.values[i, j, :]


def cube_spectrogram(cube: SignalCube, r: float, theta: float, window_len=DEFAULT_WINDOW_LEN,
                     hop=DEFAULT_HOP, fft_len=DEFAULT_FFT_LEN) -> Spectrogram:
    return stft(peak_series(cube, r, theta), window_len, hop, fft_len,
                sample_rate=cube.sample_rate, t_start=cube.t_start)

