"""Objective quality/intelligibility metrics for supervision checks and reports."""

from __future__ import annotations

import logging
import os
import shlex
import subprocess
from dataclasses import dataclass

import numpy as np

from .dsp import Waveform
from .errors import ConfigError, DomainError, ShapeError
from .stoi import stoi_score

log = logging.getLogger(__name__)

SI_SDR_CLAMP_DB = 60.0
PESQ_CMD_ENV = "XTSE_PESQ_CMD"


@dataclass(frozen=True)
class MetricRow:
    """Per-condition metric aggregate: SI-SDR in dB, STOI in percent, optional PESQ."""

    condition: str
    si_sdr: float
    stoi: float
    n_items: int
    pesq: float | None = None

    def __post_init__(self):
        if self.n_items < 1:
            raise ConfigError(f"n_items must be >= 1, got {self.n_items}")
        if not np.isfinite(self.si_sdr):
            raise ConfigError(f"si_sdr must be finite, got {self.si_sdr}")
        if not 0.0 <= self.stoi <= 100.0:
            raise ConfigError(f"stoi must be a percentage in [0, 100], got {self.stoi}")
        if self.pesq is not None and not -0.5 <= self.pesq <= 4.5:
            raise ConfigError(f"pesq must lie in [-0.5, 4.5], got {self.pesq}")


def _paired_samples(estimate, reference) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(estimate, Waveform) and isinstance(reference, Waveform):
        if estimate.sample_rate != reference.sample_rate:
            raise ConfigError(
                f"sample rates differ: {estimate.sample_rate} vs {reference.sample_rate}"
            )
    est = estimate.samples if isinstance(estimate, Waveform) else np.asarray(estimate, dtype=np.float64)
    ref = reference.samples if isinstance(reference, Waveform) else np.asarray(reference, dtype=np.float64)
    if est.shape != ref.shape:
        raise ShapeError(f"length mismatch: {est.shape} vs {ref.shape}")
    return est, ref


def si_sdr(estimate, reference, clamp_db: float = SI_SDR_CLAMP_DB) -> float:
    """Scale-invariant SDR in dB: 10*log10(||a s||^2 / ||a s - e||^2), a = <e,s>/||s||^2.

    No mean removal. The result is clamped to [-clamp_db, +clamp_db] so that
    perfect (or perfectly scaled) estimates report a finite value.
    """
    est, ref = _paired_samples(estimate, reference)
    ref_energy = float(np.dot(ref, ref))
    if ref_energy == 0.0:
        raise DomainError("reference signal is identically zero")
    alpha = float(np.dot(est, ref)) / ref_energy
    target = alpha * ref
    target_energy = float(np.dot(target, target))
    err = est - target
    err_energy = float(np.dot(err, err))
    if err_energy == 0.0:
        return clamp_db
    if target_energy == 0.0:
        return -clamp_db
    value = 10.0 * np.log10(target_energy / err_energy)
    return float(np.clip(value, -clamp_db, clamp_db))


def stoi(estimate, reference) -> float:
    """Short-time objective intelligibility score in [0, 1].

    Both signals are resampled internally to the algorithm's native 10 kHz.
    """
    est, ref = _paired_samples(estimate, reference)
    if isinstance(estimate, Waveform):
        rate = estimate.sample_rate
    elif isinstance(reference, Waveform):
        rate = reference.sample_rate
    else:
        raise ConfigError("stoi needs at least one Waveform argument to know the sample rate")
    return stoi_score(est, ref, rate)


def pesq_external(estimate_path, reference_path, command: str | None = None) -> float | None:
    """Run a user-provided PESQ evaluator on two audio files.

    ``command`` is a template (defaulting to the XTSE_PESQ_CMD environment
    variable) whose ``{estimate}``/``{reference}`` placeholders are replaced by
    the file paths; without placeholders the paths are appended (reference
    first). The score is parsed from the last non-empty line of stdout. Any
    failure yields None with a warning: PESQ never fails an evaluation run.
    """
    command = command if command is not None else os.environ.get(PESQ_CMD_ENV)
    if not command:
        return None
    if not (os.path.exists(estimate_path) and os.path.exists(reference_path)):
        log.warning("pesq hook skipped: %s or %s missing", estimate_path, reference_path)
        return None
    if "{estimate}" in command or "{reference}" in command:
        argv = shlex.split(command.format(estimate=str(estimate_path), reference=str(reference_path)))
    else:
        argv = shlex.split(command) + [str(reference_path), str(estimate_path)]
    try:
        proc = subprocess.run(argv, capture_output=True, text=True, timeout=120)
    except (OSError, subprocess.TimeoutExpired) as exc:
        log.warning("pesq hook failed to run: %s", exc)
        return None
    if proc.returncode != 0:
        log.warning("pesq hook exited %d: %s", proc.returncode, proc.stderr.strip()[:200])
        return None
    lines = [ln.strip() for ln in proc.stdout.splitlines() if ln.strip()]
    if not lines:
        log.warning("pesq hook produced no output")
        return None
    try:
        return float(lines[-1].split()[-1])
    except ValueError:
        log.warning("pesq hook output not parseable: %r", lines[-1])
        return None
