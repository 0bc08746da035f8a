"""Optimization orchestration: staged pretrain+finetune runs, the four batch
modes, the two-phase learning-rate decay, gradient clipping, and resumable
epoch checkpoints.

Determinism contract: model init is seeded once, every batch is drawn from a
seed derived from (run seed, stage, epoch, batch index), and the optimizer
state round-trips exactly through checkpoints, so a resumed run replays the
same loss trajectory as an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import COND_SINGLE, BatchItem, ConditionTriplet, TrainingMode, sample_batch
from .dsp import SpectroConfig, drc_compress_tensor, drc_expand_tensor, istft_tensor, stft_tensor
from .errors import ConfigError, DomainError, TrainingFailure
from .losses import LossBundle, si_sdr_ratio_db, total_loss
from .model import BackboneParams, DenoiserParams, Extractor, build_extractor, load_state_arrays, state_to_arrays

log = logging.getLogger(__name__)

STAGE_PRETRAIN_DENOISER = "pretrain_denoiser"
STAGE_PRETRAIN_BACKBONE = "pretrain_backbone"
STAGE_FINETUNE = "finetune_joint"
ALL_STAGES = (STAGE_PRETRAIN_DENOISER, STAGE_PRETRAIN_BACKBONE, STAGE_FINETUNE)

CHECKPOINT_VERSION = "1"
MAX_CONSECUTIVE_SKIPS = 3


@dataclass(frozen=True)
class ScheduleConfig:
    """Two-phase exponential decay: decay_a every decay_a_every epochs up to
    phase_a_epochs, then decay_b for the remainder."""

    lr0: float = 5e-4
    decay_a: float = 0.98
    decay_a_every: int = 2
    phase_a_epochs: int = 100
    decay_b: float = 0.9
    decay_b_every: int = 2
    clip_norm: float = 1.0
    epochs_total: int = 120

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        for name in ("decay_a", "decay_b"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        if self.decay_a_every < 1 or self.decay_b_every < 1 or self.epochs_total < 1:
            raise ConfigError("decay cadence and epochs_total must be >= 1")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")


def lr_at(epoch: int, cfg: ScheduleConfig) -> float:
    """Closed-form learning rate for a zero-based epoch index."""
    if not 0 <= epoch < cfg.epochs_total:
        raise DomainError(f"epoch {epoch} outside [0, {cfg.epochs_total})")
    a_steps = min(epoch, cfg.phase_a_epochs) // cfg.decay_a_every
    b_steps = max(epoch - cfg.phase_a_epochs, 0) // cfg.decay_b_every
    return cfg.lr0 * cfg.decay_a**a_steps * cfg.decay_b**b_steps


@dataclass(frozen=True)
class StageConfig:
    """One training stage: objective variant, batch mode, and schedule."""

    name: str
    mode: TrainingMode
    w: float = 50.0
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self):
        if self.name not in ALL_STAGES:
            raise ConfigError(f"unknown stage {self.name!r}; valid: {ALL_STAGES}")
        if self.w < 0:
            raise ConfigError("w must be non-negative")

    @property
    def frozen_components(self) -> frozenset[str]:
        return {
            STAGE_PRETRAIN_DENOISER: frozenset({"backbone"}),
            STAGE_PRETRAIN_BACKBONE: frozenset({"denoiser"}),
            STAGE_FINETUNE: frozenset(),
        }[self.name]


@dataclass
class TrainConfig:
    """Everything a reproducible run needs besides the triplet pool."""

    spectro: SpectroConfig
    denoiser: DenoiserParams = field(default_factory=DenoiserParams)
    backbone: BackboneParams = field(default_factory=BackboneParams)
    stages: list[StageConfig] = field(default_factory=list)
    attn_scale: float = 1.0
    backbone_input: str = "denoised"
    dtype: str = "float32"
    batch_size: int = 4
    seed: int = 0

    def build_model(self) -> Extractor:
        torch.manual_seed(self.seed)
        return Extractor(
            self.spectro,
            self.denoiser,
            self.backbone,
            attn_scale=self.attn_scale,
            backbone_input=self.backbone_input,
            dtype=getattr(torch, self.dtype),
        )


def default_stages(
    mode: TrainingMode,
    w: float = 50.0,
    epochs: tuple[int, int, int] = (8, 10, 12),
    lr0: float = 5e-4,
    decay_a_every: int = 2,
    clip_norm: float = 1.0,
) -> list[StageConfig]:
    """Desk-scale pretrain+pretrain+finetune staging with a shared decay shape."""

    def sched(n_epochs):
        return ScheduleConfig(
            lr0=lr0, decay_a_every=decay_a_every, clip_norm=clip_norm, epochs_total=n_epochs
        )

    return [
        StageConfig(STAGE_PRETRAIN_DENOISER, mode, w, sched(epochs[0])),
        StageConfig(STAGE_PRETRAIN_BACKBONE, mode, w, sched(epochs[1])),
        StageConfig(STAGE_FINETUNE, mode, w, sched(epochs[2])),
    ]


def clip_gradients(grads, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most max_norm.

    Returns the pre-clip global norm. Non-finite gradients raise DomainError.
    """
    gs = [g for g in grads if g is not None]
    if not gs:
        return 0.0
    for g in gs:
        if not bool(torch.isfinite(g).all()):
            raise DomainError("non-finite gradient encountered")
    norm = float(torch.sqrt(sum((g.detach() ** 2).sum() for g in gs)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in gs:
            g.detach().mul_(scale)
    return norm


@dataclass
class StepReport:
    losses: dict[str, float]
    per_condition: dict[str, float]
    grad_norm: float          # pre-clip global L2
    grad_norm_clipped: float  # re-measured after scaling
    lr: float
    skipped: bool
    batch_conditions: list[list[str]]


def denoise_target(trip: ConditionTriplet, condition: str):
    """What the front-end should reconstruct: the mixture without its noise."""
    return trip.target if condition == COND_SINGLE else trip.y_clean2


def _stack(waves, dtype) -> torch.Tensor:
    return torch.stack([torch.from_numpy(w.samples).to(dtype) for w in waves])


def _uniform_geometry(batch: list[BatchItem]) -> bool:
    conds = {tuple(sorted(item.mixtures)) for item in batch}
    mix_lens = {len(w) for item in batch for w in item.mixtures.values()}
    enr_lens = {len(item.enrollment) for item in batch}
    tgt_lens = {len(item.target) for item in batch}
    return len(conds) == 1 and len(mix_lens) == 1 and len(enr_lens) == 1 and len(tgt_lens) == 1


def _denoised_waveform(model: Extractor, mix: torch.Tensor) -> torch.Tensor:
    cfg = model.spectro
    spec = drc_compress_tensor(stft_tensor(mix, cfg), cfg.beta)
    den = model.denoiser(spec)
    return istft_tensor(drc_expand_tensor(den, cfg.beta), cfg, mix.shape[-1])


def _denoiser_stage_loss(model, batch, pool, dtype):
    """Mean over items of the per-condition negated denoising SI-SDR sum."""
    pairs = []  # (condition, mixture, reference)
    for item in batch:
        trip = pool[item.triplet_index]
        for cond in sorted(item.mixtures):
            pairs.append((cond, item.mixtures[cond], denoise_target(trip, cond)))
    mix = _stack([p[1] for p in pairs], dtype)
    ref = _stack([p[2] for p in pairs], dtype)
    den = _denoised_waveform(model, mix)
    vals = si_sdr_ratio_db(den, ref)
    per_cond: dict[str, list[float]] = {}
    for (cond, _, _), v in zip(pairs, vals):
        per_cond.setdefault(cond, []).append(float(-v.detach()))
    loss = -vals.sum() / len(batch)
    bundle = LossBundle(
        l_sisdr=loss,
        l_triplec=torch.zeros((), dtype=loss.dtype),
        l_total=loss,
        w=0.0,
        pair=None,
        per_condition={c: float(np.mean(v)) for c, v in sorted(per_cond.items())},
    )
    return bundle


def _single_output_loss(model, batch, stage, dtype):
    """Stacked path for one-estimate modes whose conditions may differ per item."""
    conds_per_item = [next(iter(item.mixtures)) for item in batch]
    if stage.mode.kind == "condition-wise":
        bad = [c for c in conds_per_item if c != stage.mode.condition]
        if bad:
            raise ConfigError(f"condition-wise batch contains foreign conditions: {sorted(set(bad))}")
    mixes = _stack([item.mixtures[c] for item, c in zip(batch, conds_per_item)], dtype)
    enrolls = _stack([item.enrollment for item in batch], dtype)
    targets = _stack([item.target for item in batch], dtype)
    vals = si_sdr_ratio_db(model(mixes, enrolls), targets)
    loss = -vals.mean()
    per_cond: dict[str, list[float]] = {}
    for cond, v in zip(conds_per_item, vals):
        per_cond.setdefault(cond, []).append(float(-v.detach()))
    return LossBundle(
        l_sisdr=loss,
        l_triplec=torch.zeros((), dtype=loss.dtype),
        l_total=loss,
        w=stage.w,
        pair=None,
        per_condition={c: float(np.mean(v)) for c, v in sorted(per_cond.items())},
    )


def _extraction_loss(model, batch, stage, dtype):
    single = all(len(item.mixtures) == 1 for item in batch)
    mix_lens = {len(w) for item in batch for w in item.mixtures.values()}
    enr_lens = {len(item.enrollment) for item in batch}
    if single and len(mix_lens) == 1 and len(enr_lens) == 1:
        return _single_output_loss(model, batch, stage, dtype)
    if _uniform_geometry(batch):
        conds = sorted(batch[0].mixtures)
        mixes = _stack([item.mixtures[c] for item in batch for c in conds], dtype)
        enrolls = _stack([item.enrollment for item in batch for _ in conds], dtype)
        targets = _stack([item.target for item in batch], dtype)
        out = model(mixes, enrolls)  # [B*C, L]
        out = out.reshape(len(batch), len(conds), -1)
        outputs = {c: out[:, i] for i, c in enumerate(conds)}
        return total_loss(outputs, targets, stage.mode, stage.w)
    # Fallback: heterogeneous lengths, one triplet at a time.
    bundles = []
    for item in batch:
        enr = torch.from_numpy(item.enrollment.samples).to(dtype)
        tgt = torch.from_numpy(item.target.samples).to(dtype)
        item_conds = sorted(item.mixtures)
        mixes = _stack([item.mixtures[c] for c in item_conds], dtype)
        out = model(mixes, enr.unsqueeze(0).expand(len(item_conds), -1))
        bundles.append(total_loss({c: out[i] for i, c in enumerate(item_conds)}, tgt, stage.mode, stage.w))
    n = len(bundles)
    l_sisdr = sum(b.l_sisdr for b in bundles) / n
    l_triplec = sum(b.l_triplec for b in bundles) / n
    per_condition: dict[str, list[float]] = {}
    for b in bundles:
        for c, v in b.per_condition.items():
            per_condition.setdefault(c, []).append(v)
    return LossBundle(
        l_sisdr=l_sisdr,
        l_triplec=l_triplec,
        l_total=l_sisdr + l_triplec,
        w=stage.w,
        pair=bundles[0].pair,
        per_condition={c: float(np.mean(v)) for c, v in sorted(per_condition.items())},
    )


def train_step(
    model: Extractor,
    batch: list[BatchItem],
    stage: StageConfig,
    optimizer: torch.optim.Optimizer,
    pool: list[ConditionTriplet] | None = None,
    lr: float | None = None,
) -> StepReport:
    """One optimization step; a non-finite loss/gradient skips the update."""
    if not batch:
        raise ConfigError("empty batch")
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    else:
        lr = optimizer.param_groups[0]["lr"]
    dtype = model.dtype

    if stage.name == STAGE_PRETRAIN_DENOISER:
        if pool is None:
            raise ConfigError("denoiser pretraining needs the triplet pool for its references")
        bundle = _denoiser_stage_loss(model, batch, pool, dtype)
    else:
        bundle = _extraction_loss(model, batch, stage, dtype)

    batch_conditions = [sorted(item.mixtures) for item in batch]
    nan = float("nan")
    if not bool(torch.isfinite(bundle.l_total)):
        log.warning("skipping step: non-finite loss %s", bundle.scalars())
        optimizer.zero_grad(set_to_none=True)
        return StepReport(bundle.scalars(), bundle.per_condition, nan, nan, lr, True, batch_conditions)

    optimizer.zero_grad(set_to_none=True)
    bundle.l_total.backward()
    grads = [p.grad for group in optimizer.param_groups for p in group["params"] if p.grad is not None]
    try:
        grad_norm = clip_gradients(grads, stage.schedule.clip_norm)
    except DomainError as exc:
        log.warning("skipping step: %s", exc)
        optimizer.zero_grad(set_to_none=True)
        return StepReport(bundle.scalars(), bundle.per_condition, nan, nan, lr, True, batch_conditions)
    clipped_norm = float(torch.sqrt(sum((g.detach() ** 2).sum() for g in grads))) if grads else 0.0
    optimizer.step()
    return StepReport(
        bundle.scalars(), bundle.per_condition, grad_norm, clipped_norm, lr, False, batch_conditions
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _save_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    import io

    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write_bytes(path, buf.getvalue())


def _optimizer_arrays(optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    sd = optimizer.state_dict()
    arrays = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            arr = value.detach().to(torch.float64).numpy() if isinstance(value, torch.Tensor) else np.asarray(value, dtype=np.float64)
            arrays[f"{idx}.{key}"] = arr
    return arrays


def _load_optimizer_arrays(optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    sd = optimizer.state_dict()
    state: dict[int, dict] = {}
    for name, arr in arrays.items():
        idx_str, key = name.split(".", 1)
        entry = state.setdefault(int(idx_str), {})
        ref_dtype = torch.float32 if key == "step" else None
        tensor = torch.from_numpy(np.asarray(arr))
        entry[key] = tensor.to(ref_dtype) if ref_dtype else tensor
    params = [p for group in optimizer.param_groups for p in group["params"]]
    for idx, entry in state.items():
        for key in ("exp_avg", "exp_avg_sq"):
            if key in entry:
                entry[key] = entry[key].to(params[idx].dtype)
    sd["state"] = state
    optimizer.load_state_dict(sd)


def save_checkpoint(
    directory,
    model: Extractor,
    stage_index: int,
    stage_name: str,
    epoch_completed: int,
    seed: int,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    """Versioned manifest + raw parameter arrays; manifest written last (commit marker)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    params = state_to_arrays(model)
    _save_npz(d / "params.npz", params)
    if optimizer is not None:
        _save_npz(d / "optimizer.npz", _optimizer_arrays(optimizer))
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.config_dict(),
        "stage_index": stage_index,
        "stage_name": stage_name,
        "epoch_completed": epoch_completed,
        "seed": seed,
        "param_shapes": {k: list(v.shape) for k, v in params.items()},
        "has_optimizer": optimizer is not None,
    }
    _atomic_write_bytes(d / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True).encode())


def load_checkpoint(directory) -> tuple[Extractor, dict, dict[str, np.ndarray] | None]:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    major = str(manifest.get("format_version", "")).split(".")[0]
    if major != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    model = build_extractor(manifest["arch"])
    with np.load(d / "params.npz") as npz:
        load_state_arrays(model, dict(npz))
    opt_arrays = None
    if manifest.get("has_optimizer") and (d / "optimizer.npz").exists():
        with np.load(d / "optimizer.npz") as npz:
            opt_arrays = dict(npz)
    return model, manifest, opt_arrays


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Extractor
    final_dir: Path
    latest_dir: Path
    log_path: Path
    stage_dirs: dict[str, Path]
    skipped_steps: int


def _freeze_for_stage(model: Extractor, stage: StageConfig) -> list[torch.nn.Parameter]:
    for name, component in (("denoiser", model.denoiser), ("backbone", model.backbone)):
        requires = name not in stage.frozen_components
        for p in component.parameters():
            p.requires_grad_(requires)
    return [p for p in model.parameters() if p.requires_grad]


def run_training(
    config: TrainConfig,
    pool: list[ConditionTriplet],
    checkpoint_dir,
    resume: bool = False,
) -> TrainResult:
    """Execute the configured stages in order with per-epoch checkpoints."""
    if not config.stages:
        raise ConfigError("config has no stages")
    ckpt = Path(checkpoint_dir)
    try:
        ckpt.mkdir(parents=True, exist_ok=True)
        probe = ckpt / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise TrainingFailure(f"checkpoint dir {ckpt} is not writable: {exc}") from exc

    model = config.build_model()
    start_stage, start_epoch = 0, 0
    resume_opt_arrays = None
    if resume:
        latest = ckpt / "latest"
        if not (latest / "manifest.json").exists():
            raise TrainingFailure(f"--resume requested but no checkpoint at {latest}")
        loaded, manifest, resume_opt_arrays = load_checkpoint(latest)
        if manifest["arch"] != model.config_dict():
            raise ConfigError("checkpoint architecture differs from the requested config")
        model = loaded
        start_stage = manifest["stage_index"]
        start_epoch = manifest["epoch_completed"] + 1
        if start_epoch >= config.stages[start_stage].schedule.epochs_total:
            start_stage += 1
            start_epoch = 0

    log_path = ckpt / "log.jsonl"
    stage_dirs: dict[str, Path] = {}
    skipped_total = 0
    steps_per_epoch = max(1, len(pool) // config.batch_size)

    with open(log_path, "a") as log_fh:
        for stage_index in range(start_stage, len(config.stages)):
            stage = config.stages[stage_index]
            trainable = _freeze_for_stage(model, stage)
            optimizer = torch.optim.Adam(trainable, lr=stage.schedule.lr0, betas=(0.9, 0.999))
            first_epoch = start_epoch if stage_index == start_stage else 0
            if resume_opt_arrays is not None and stage_index == start_stage and first_epoch > 0:
                _load_optimizer_arrays(optimizer, resume_opt_arrays)
            resume_opt_arrays = None

            consecutive_skips = 0
            for epoch in range(first_epoch, stage.schedule.epochs_total):
                lr = lr_at(epoch, stage.schedule)
                for b in range(steps_per_epoch):
                    batch = sample_batch(
                        pool, config.batch_size, stage.mode, rng_seed=[config.seed, stage_index, epoch, b]
                    )
                    report = train_step(model, batch, stage, optimizer, pool=pool, lr=lr)
                    if report.skipped:
                        consecutive_skips += 1
                        skipped_total += 1
                        if consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                            raise TrainingFailure(
                                f"{consecutive_skips} consecutive non-finite steps in stage {stage.name}"
                            )
                    else:
                        consecutive_skips = 0
                    row = {
                        "stage": stage.name,
                        "stage_index": stage_index,
                        "epoch": epoch,
                        "step": b,
                        "lr": lr,
                        "grad_norm": report.grad_norm,
                        "grad_norm_clipped": report.grad_norm_clipped,
                        "skipped": report.skipped,
                        "batch_conditions": report.batch_conditions,
                        **report.losses,
                        "per_condition": report.per_condition,
                    }
                    log_fh.write(json.dumps(row) + "\n")
                log_fh.flush()
                save_checkpoint(
                    ckpt / "latest", model, stage_index, stage.name, epoch, config.seed, optimizer
                )
            stage_dir = ckpt / f"stage_{stage.name}"
            save_checkpoint(stage_dir, model, stage_index, stage.name,
                            stage.schedule.epochs_total - 1, config.seed)
            stage_dirs[stage.name] = stage_dir

    final_dir = ckpt / "final"
    last = config.stages[-1]
    save_checkpoint(final_dir, model, len(config.stages) - 1, last.name,
                    last.schedule.epochs_total - 1, config.seed)
    return TrainResult(model, final_dir, ckpt / "latest", log_path, stage_dirs, skipped_total)
