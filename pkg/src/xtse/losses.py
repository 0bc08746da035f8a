"""Training objectives: SI-SDR supervision plus the cross-condition consistency term.

All functions operate on torch tensors (Waveforms/arrays are converted on the
way in), accept either single signals [T] or batches [B, T], and return 0-dim
tensors suitable for backward(). Batch handling: SI-SDR terms are summed over
estimates as written and averaged over batch rows; the consistency term is a
mean over all samples, which coincides with the per-item mean for the
equal-length signals a batch requires.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import COND_BOTH, COND_SINGLE, MODE_CONDITION_WISE, MODE_SHUFFLED, MODE_TRIPLEC, TrainingMode
from .dsp import Waveform
from .errors import ConfigError, DomainError, ShapeError

SI_SDR_EPS_REL = 1e-8  # error-denominator guard, relative to projected-target energy
CONSISTENCY_PAIR = (COND_SINGLE, COND_BOTH)


def as_signal_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        t = x
    elif isinstance(x, Waveform):
        t = torch.from_numpy(x.samples)
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if t.dim() not in (1, 2):
        raise ShapeError(f"expected [T] or [B, T] signal, got shape {tuple(t.shape)}")
    return t


@dataclass
class LossBundle:
    """Decomposed objective for one batch: l_total == l_sisdr + l_triplec exactly."""

    l_sisdr: torch.Tensor
    l_triplec: torch.Tensor
    l_total: torch.Tensor
    w: float
    pair: tuple[str, str] | None
    per_condition: dict[str, float]

    def scalars(self) -> dict[str, float]:
        return {
            "l_sisdr": float(self.l_sisdr.detach()),
            "l_triplec": float(self.l_triplec.detach()),
            "l_total": float(self.l_total.detach()),
        }


def consistency_loss(s1_hat, s2_hat, weight: float = 50.0) -> torch.Tensor:
    """Weighted mean absolute difference between two extracted signals."""
    a = as_signal_tensor(s1_hat)
    b = as_signal_tensor(s2_hat)
    if a.shape != b.shape:
        raise ShapeError(f"estimate shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.numel() == 0:
        raise ShapeError("cannot compare empty signals")
    return weight * (a - b).abs().mean()


def si_sdr_ratio_db(estimate: torch.Tensor, target: torch.Tensor,
                    eps_rel: float = SI_SDR_EPS_REL) -> torch.Tensor:
    """Row-wise scale-invariant SDR in dB, guarded for the perfect-estimate case.

    The error-energy denominator carries an eps_rel fraction of the projected
    target's energy, keeping the value (and gradient) finite when the estimate
    is an exact rescaling of the target; this also keeps the guarded value
    exactly scale invariant.
    """
    squeeze = estimate.dim() == 1
    est = estimate.unsqueeze(0) if squeeze else estimate
    tgt = target.unsqueeze(0) if squeeze else target
    if est.shape != tgt.shape:
        raise ShapeError(f"shape mismatch: {tuple(est.shape)} vs {tuple(tgt.shape)}")
    tgt_energy = (tgt * tgt).sum(dim=-1)
    if bool((tgt_energy == 0).any()):
        raise DomainError("target signal is identically zero")
    alpha = (est * tgt).sum(dim=-1) / tgt_energy
    proj = alpha.unsqueeze(-1) * tgt
    proj_energy = (proj * proj).sum(dim=-1)
    err = est - proj
    err_energy = (err * err).sum(dim=-1)
    val = 10.0 * torch.log10(proj_energy / (err_energy + eps_rel * proj_energy))
    return val.squeeze(0) if squeeze else val


def si_sdr_loss(estimates, target, eps_rel: float = SI_SDR_EPS_REL) -> torch.Tensor:
    """Negated SI-SDR summed over the given estimates (batch rows averaged)."""
    if isinstance(estimates, (torch.Tensor, Waveform, np.ndarray)):
        estimates = [estimates]
    if not estimates:
        raise ShapeError("need at least one estimate")
    tgt = as_signal_tensor(target)
    total = None
    for est in estimates:
        term = -si_sdr_ratio_db(as_signal_tensor(est), tgt, eps_rel).mean()
        total = term if total is None else total + term
    return total


def total_loss(outputs: dict[str, torch.Tensor], target, mode: TrainingMode,
               w: float = 50.0) -> LossBundle:
    """Combine supervision and consistency terms according to the training mode.

    condition-wise / shuffled: one estimate, no consistency. triplec: both
    noisy conditions supervised, consistency between them. triplec-parallel:
    all three conditions supervised, consistency still only between the two
    noisy ones.
    """
    if not outputs:
        raise ConfigError("no outputs to score")
    tgt = as_signal_tensor(target)

    if mode.kind in (MODE_CONDITION_WISE, MODE_SHUFFLED):
        if len(outputs) != 1:
            raise ConfigError(f"mode {mode.kind} expects exactly one output, got {sorted(outputs)}")
        (cond, est), = outputs.items()
        if mode.kind == MODE_CONDITION_WISE and cond != mode.condition:
            raise ConfigError(f"mode is fixed to {mode.condition!r} but output is {cond!r}")
        used = [cond]
        pair = None
    elif mode.kind == MODE_TRIPLEC:
        missing = [c for c in CONSISTENCY_PAIR if c not in outputs]
        if missing or len(outputs) != 2:
            raise ConfigError(f"triplec mode needs outputs exactly for {CONSISTENCY_PAIR}, got {sorted(outputs)}")
        used = list(CONSISTENCY_PAIR)
        pair = CONSISTENCY_PAIR
    else:  # triplec-parallel
        from .data import ALL_CONDITIONS

        missing = [c for c in ALL_CONDITIONS if c not in outputs]
        if missing:
            raise ConfigError(f"triplec-parallel mode needs all three conditions, missing {missing}")
        used = list(ALL_CONDITIONS)
        pair = CONSISTENCY_PAIR

    per_condition = {}
    l_sisdr = None
    for cond in used:
        term = -si_sdr_ratio_db(as_signal_tensor(outputs[cond]), tgt).mean()
        per_condition[cond] = float(term.detach())
        l_sisdr = term if l_sisdr is None else l_sisdr + term

    if pair is None:
        l_triplec = torch.zeros((), dtype=l_sisdr.dtype)
    else:
        l_triplec = consistency_loss(outputs[pair[0]], outputs[pair[1]], w)

    return LossBundle(
        l_sisdr=l_sisdr,
        l_triplec=l_triplec,
        l_total=l_sisdr + l_triplec,
        w=w,
        pair=pair,
        per_condition=per_condition,
    )
