"""Short-time objective intelligibility.

Implements the published correlation-based algorithm: signals are resampled
to 10 kHz, silent frames (more than 40 dB below the loudest reference frame)
are removed, both signals are decomposed into 15 one-third-octave band
envelopes via a 512-point STFT, and the final score is the average linear
correlation between clean and degraded envelopes over 384 ms segments, after
normalizing and clipping the degraded envelopes (SDR floor -15 dB).
"""

from __future__ import annotations

import math

import numpy as np
from scipy.signal import resample_poly

from .errors import ShapeError

FS = 10000            # native analysis rate, Hz
FRAME_LEN = 256       # analysis window, samples at FS
HOP = 128             # 50% overlap
N_FFT = 512
NUM_BANDS = 15
MIN_CF = 150.0        # lowest one-third-octave center frequency, Hz
SEG_FRAMES = 30       # 384 ms intelligibility segments
BETA_DB = -15.0       # lower SDR bound for envelope clipping
DYN_RANGE_DB = 40.0   # silent-frame threshold below the loudest frame
_EPS = np.finfo(np.float64).eps


def _hanning(n: int) -> np.ndarray:
    # Symmetric Hann without the zero endpoints (MATLAB hanning(n)).
    return np.hanning(n + 2)[1:-1]


def third_octave_band_matrix(fs: int = FS, n_fft: int = N_FFT,
                             num_bands: int = NUM_BANDS, min_cf: float = MIN_CF) -> np.ndarray:
    """Boolean [num_bands x (n_fft/2+1)] matrix grouping FFT bins into bands."""
    freqs = np.linspace(0, fs, n_fft + 1)[: n_fft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    f_low = min_cf * 2.0 ** ((2 * k - 1) / 6.0)
    f_high = min_cf * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, freqs.size))
    for i in range(num_bands):
        lo = int(np.argmin(np.square(freqs - f_low[i])))
        hi = int(np.argmin(np.square(freqs - f_high[i])))
        obm[i, lo:hi] = 1.0
    return obm


def _frame(x: np.ndarray, window: np.ndarray) -> np.ndarray:
    n = (len(x) - FRAME_LEN) // HOP + 1
    if n < 1:
        raise ShapeError(f"signal of {len(x)} samples is too short for STOI analysis")
    idx = np.arange(FRAME_LEN)[None, :] + HOP * np.arange(n)[:, None]
    return x[idx] * window


def remove_silent_frames(clean: np.ndarray, degraded: np.ndarray,
                         dyn_range_db: float = DYN_RANGE_DB) -> tuple[np.ndarray, np.ndarray]:
    """Drop frames whose clean energy is > dyn_range_db below the loudest frame.

    The kept windowed frames of both signals are overlap-added back into
    (shorter) time signals; Hann at 50% overlap makes this lossless inside
    runs of kept frames.
    """
    w = _hanning(FRAME_LEN)
    cf = _frame(clean, w)
    df = _frame(degraded, w)
    energies = 20.0 * np.log10(np.linalg.norm(cf, axis=1) + _EPS)
    keep = energies + dyn_range_db - np.max(energies) > 0
    cf, df = cf[keep], df[keep]
    n = cf.shape[0]
    out_len = (n - 1) * HOP + FRAME_LEN if n else 0
    clean_out = np.zeros(out_len)
    degraded_out = np.zeros(out_len)
    for j in range(n):
        clean_out[j * HOP : j * HOP + FRAME_LEN] += cf[j]
        degraded_out[j * HOP : j * HOP + FRAME_LEN] += df[j]
    return clean_out, degraded_out


def _band_envelopes(x: np.ndarray, obm: np.ndarray, window: np.ndarray) -> np.ndarray:
    spec = np.fft.rfft(_frame(x, window), n=N_FFT, axis=1)  # [frames, bins]
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)  # [bands, frames]


def stoi_score(estimate: np.ndarray, reference: np.ndarray, sample_rate: int) -> float:
    """STOI of a degraded estimate against its clean reference, in [0, 1]."""
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if estimate.shape != reference.shape:
        raise ShapeError(f"length mismatch: {estimate.shape} vs {reference.shape}")
    if sample_rate != FS:
        g = math.gcd(FS, sample_rate)
        estimate = resample_poly(estimate, FS // g, sample_rate // g)
        reference = resample_poly(reference, FS // g, sample_rate // g)
    reference, estimate = remove_silent_frames(reference, estimate)
    min_len = (SEG_FRAMES - 1) * HOP + FRAME_LEN
    if len(reference) < min_len:
        raise ShapeError(
            f"only {len(reference)} non-silent samples at {FS} Hz; "
            f"STOI needs at least {min_len} ({SEG_FRAMES} frames)"
        )
    w = _hanning(FRAME_LEN)
    obm = third_octave_band_matrix()
    x = _band_envelopes(reference, obm, w)   # clean  [bands, frames]
    y = _band_envelopes(estimate, obm, w)    # degraded
    n_frames = x.shape[1]
    clip_gain = 10.0 ** (-BETA_DB / 20.0)

    # Sliding 30-frame segments, stacked as [segments, bands, SEG_FRAMES].
    n_seg = n_frames - SEG_FRAMES + 1
    seg_idx = np.arange(SEG_FRAMES)[None, :] + np.arange(n_seg)[:, None]
    xs = x[:, seg_idx].transpose(1, 0, 2)
    ys = y[:, seg_idx].transpose(1, 0, 2)

    alpha = np.linalg.norm(xs, axis=2, keepdims=True) / (
        np.linalg.norm(ys, axis=2, keepdims=True) + _EPS
    )
    ys = np.minimum(alpha * ys, xs * (1.0 + clip_gain))

    xs = xs - xs.mean(axis=2, keepdims=True)
    ys = ys - ys.mean(axis=2, keepdims=True)
    xs = xs / (np.linalg.norm(xs, axis=2, keepdims=True) + _EPS)
    ys = ys / (np.linalg.norm(ys, axis=2, keepdims=True) + _EPS)
    d = float(np.sum(xs * ys) / (NUM_BANDS * n_seg))
    return float(np.clip(d, 0.0, 1.0))
