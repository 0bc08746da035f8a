"""Waveform <-> complex time-frequency conversions.

The time-frequency representation used everywhere in this package is a real
tensor of shape [2F x T]: the first F rows are the real parts of a one-sided
spectrum, the last F rows the imaginary parts. All transforms are implemented
once on torch tensors (differentiable, dtype preserving); thin Waveform-level
wrappers convert from/to numpy for the non-training code paths.

Framing convention: frames start at sample 0, no center padding, a trailing
partial frame is dropped, so T = floor((len - win) / hop) + 1. The FFT size
equals the window length. Synthesis divides the overlap-added frames by the
overlap-added squared window (floored near the signal edges, where coverage
vanishes), so interior samples reconstruct exactly and the first/last partial
window of samples is attenuated rather than amplified.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, ShapeError

_WINDOW_CACHE: dict[tuple[str, int, torch.dtype], torch.Tensor] = {}


@dataclass(frozen=True)
class Waveform:
    """A mono waveform: float64 samples plus its sample rate in Hz."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ShapeError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise ShapeError("waveform contains non-finite samples")
        if not (isinstance(self.sample_rate, (int, np.integer)) and self.sample_rate > 0):
            raise ConfigError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def energy(self) -> float:
        return float(np.sum(self.samples**2))


@dataclass(frozen=True)
class SpectroConfig:
    """STFT geometry and dynamic range compression exponent.

    win_ms / hop_ms must resolve to integer sample counts at sample_rate.
    """

    sample_rate: int
    win_ms: float = 32.0
    hop_ms: float = 8.0
    window: str = "hann"
    beta: float = 0.5

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigError("sample_rate must be positive")
        if self.hop_ms > self.win_ms:
            raise ConfigError(f"hop_ms ({self.hop_ms}) must not exceed win_ms ({self.win_ms})")
        win = self.win_ms * self.sample_rate / 1000.0
        hop = self.hop_ms * self.sample_rate / 1000.0
        if not math.isclose(win, round(win)) or round(win) <= 0:
            raise ConfigError(f"win_ms {self.win_ms} is not an integer sample count at {self.sample_rate} Hz")
        if not math.isclose(hop, round(hop)) or round(hop) <= 0:
            raise ConfigError(f"hop_ms {self.hop_ms} is not an integer sample count at {self.sample_rate} Hz")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigError(f"beta must lie in (0, 1], got {self.beta}")
        if self.window != "hann":
            raise ConfigError(f"unsupported window {self.window!r}")

    @property
    def win_length(self) -> int:
        return round(self.win_ms * self.sample_rate / 1000.0)

    @property
    def hop_length(self) -> int:
        return round(self.hop_ms * self.sample_rate / 1000.0)

    @property
    def n_fft(self) -> int:
        return self.win_length

    @property
    def freq_bins(self) -> int:
        """F: number of one-sided frequency bins."""
        return self.n_fft // 2 + 1

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.win_length:
            raise ShapeError(
                f"signal of {n_samples} samples is shorter than one {self.win_length}-sample window"
            )
        return (n_samples - self.win_length) // self.hop_length + 1


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Real/imag-stacked spectrogram of shape [2F x T]."""

    data: np.ndarray
    config: SpectroConfig = field(repr=False)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] % 2 != 0:
            raise ShapeError(f"spectrogram must be [2F x T], got shape {data.shape}")
        if data.shape[0] != 2 * self.config.freq_bins:
            raise ConfigError(
                f"spectrogram has {data.shape[0]} rows but config implies {2 * self.config.freq_bins}"
            )
        if not np.all(np.isfinite(data)):
            raise ShapeError("spectrogram contains non-finite entries")
        object.__setattr__(self, "data", data)

    @property
    def freq_bins(self) -> int:
        return self.data.shape[0] // 2

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    def to_complex(self) -> np.ndarray:
        f = self.freq_bins
        return self.data[:f] + 1j * self.data[f:]


def _window(cfg: SpectroConfig, dtype: torch.dtype) -> torch.Tensor:
    key = (cfg.window, cfg.win_length, dtype)
    if key not in _WINDOW_CACHE:
        _WINDOW_CACHE[key] = torch.hann_window(cfg.win_length, periodic=True, dtype=dtype)
    return _WINDOW_CACHE[key]


def stft_tensor(x: torch.Tensor, cfg: SpectroConfig) -> torch.Tensor:
    """STFT of [B, L] or [L] float tensors -> [B, 2F, T] (or [2F, T]) stack."""
    squeeze = x.dim() == 1
    if squeeze:
        x = x.unsqueeze(0)
    if x.dim() != 2:
        raise ShapeError(f"expected [L] or [B, L] input, got shape {tuple(x.shape)}")
    if x.shape[-1] < cfg.win_length:
        raise ShapeError(
            f"signal of {x.shape[-1]} samples is shorter than one {cfg.win_length}-sample window"
        )
    frames = x.unfold(-1, cfg.win_length, cfg.hop_length)  # [B, T, win]
    frames = frames * _window(cfg, x.dtype)
    spec = torch.fft.rfft(frames, n=cfg.n_fft, dim=-1)  # [B, T, F]
    out = torch.cat([spec.real, spec.imag], dim=-1).transpose(1, 2)  # [B, 2F, T]
    return out.squeeze(0) if squeeze else out


def istft_tensor(spec: torch.Tensor, cfg: SpectroConfig, out_len: int) -> torch.Tensor:
    """Overlap-add synthesis of [B, 2F, T] or [2F, T] stacks, truncated/padded to out_len."""
    squeeze = spec.dim() == 2
    if squeeze:
        spec = spec.unsqueeze(0)
    if spec.dim() != 3:
        raise ShapeError(f"expected [2F, T] or [B, 2F, T] input, got shape {tuple(spec.shape)}")
    f = cfg.freq_bins
    if spec.shape[1] != 2 * f:
        raise ConfigError(f"spectrogram has {spec.shape[1]} rows but config implies {2 * f}")
    n_frames = spec.shape[2]
    comp = torch.complex(spec[:, :f], spec[:, f:]).transpose(1, 2)  # [B, T, F]
    frames = torch.fft.irfft(comp, n=cfg.n_fft, dim=-1)  # [B, T, win]
    win = _window(cfg, frames.dtype)
    frames = (frames * win).transpose(1, 2)  # [B, win, T]
    full_len = (n_frames - 1) * cfg.hop_length + cfg.win_length
    ola = F.fold(
        frames,
        output_size=(1, full_len),
        kernel_size=(1, cfg.win_length),
        stride=(1, cfg.hop_length),
    ).reshape(frames.shape[0], full_len)
    wsq = (win * win).reshape(1, -1, 1).expand(1, -1, n_frames)
    norm = F.fold(
        wsq,
        output_size=(1, full_len),
        kernel_size=(1, cfg.win_length),
        stride=(1, cfg.hop_length),
    ).reshape(full_len)
    # The squared-window coverage vanishes at the very first/last samples; a
    # floor attenuates them instead of amplifying spectral perturbations there
    # (interior samples sit at full coverage and divide exactly).
    out = ola / torch.clamp(norm, min=norm.max() * 0.1)
    if out_len <= full_len:
        out = out[:, :out_len]
    else:
        out = F.pad(out, (0, out_len - full_len))
    return out.squeeze(0) if squeeze else out


def _magnitude_pow(spec: torch.Tensor, exponent: float) -> torch.Tensor:
    """Raise per-bin magnitudes of a [.., 2F, T] stack to a power, keep phase.

    Zero bins map to exactly zero and carry zero gradient (subgradient choice).
    """
    f = spec.shape[-2] // 2
    re, im = spec[..., :f, :], spec[..., f:, :]
    mag_sq = re * re + im * im
    nonzero = mag_sq > 0
    safe = torch.where(nonzero, mag_sq, torch.ones_like(mag_sq))
    # |x|^p * e^{j theta} == x * |x|^(p - 1)
    scale = torch.where(nonzero, safe ** ((exponent - 1.0) / 2.0), torch.zeros_like(mag_sq))
    return torch.cat([re * scale, im * scale], dim=-2)


def drc_compress_tensor(spec: torch.Tensor, beta: float) -> torch.Tensor:
    """Dynamic range compression: magnitudes to the power beta, phase unchanged."""
    if not 0.0 < beta <= 1.0:
        raise ConfigError(f"beta must lie in (0, 1], got {beta}")
    return _magnitude_pow(spec, beta) if beta != 1.0 else spec


def drc_expand_tensor(spec: torch.Tensor, beta: float) -> torch.Tensor:
    """Inverse of drc_compress_tensor: magnitudes to the power 1/beta."""
    if not 0.0 < beta <= 1.0:
        raise ConfigError(f"beta must lie in (0, 1], got {beta}")
    return _magnitude_pow(spec, 1.0 / beta) if beta != 1.0 else spec


def stft(w: Waveform, cfg: SpectroConfig) -> ComplexSpectrogram:
    """Analysis transform of a Waveform under cfg."""
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}")
    data = stft_tensor(torch.from_numpy(w.samples), cfg).numpy()
    return ComplexSpectrogram(data, cfg)


def istft(spec: ComplexSpectrogram, cfg: SpectroConfig, out_len: int) -> Waveform:
    """Synthesis transform back to a Waveform of out_len samples."""
    if spec.config.win_length != cfg.win_length or spec.config.hop_length != cfg.hop_length:
        raise ConfigError("spectrogram geometry does not match the synthesis config")
    samples = istft_tensor(torch.from_numpy(spec.data), cfg, out_len).numpy()
    return Waveform(samples, cfg.sample_rate)


def drc_compress(spec: ComplexSpectrogram, beta: float | None = None) -> ComplexSpectrogram:
    beta = spec.config.beta if beta is None else beta
    data = drc_compress_tensor(torch.from_numpy(spec.data), beta).numpy()
    return ComplexSpectrogram(data, spec.config)


def drc_expand(spec: ComplexSpectrogram, beta: float | None = None) -> ComplexSpectrogram:
    beta = spec.config.beta if beta is None else beta
    data = drc_expand_tensor(torch.from_numpy(spec.data), beta).numpy()
    return ComplexSpectrogram(data, spec.config)


def write_wav(path, w: Waveform) -> None:
    """Write a mono 16-bit PCM WAV file; samples are clipped to [-1, 1)."""
    from scipy.io import wavfile

    pcm = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
    wavfile.write(path, w.sample_rate, (pcm * 32768.0).round().astype(np.int16))


def read_wav(path, expected_rate: int | None = None) -> Waveform:
    """Read a mono 16-bit PCM WAV file, optionally validating the header rate."""
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ShapeError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype != np.int16:
        raise ConfigError(f"{path}: expected 16-bit PCM, got dtype {data.dtype}")
    if expected_rate is not None and rate != expected_rate:
        raise ConfigError(f"{path}: header rate {rate} != expected {expected_rate}")
    return Waveform(data.astype(np.float64) / 32768.0, int(rate))
