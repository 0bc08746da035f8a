"""Extraction network: lightweight denoiser, enrollment context interaction,
and a mask-predicting backbone, composed into the end-to-end mapping from a
(mixture, enrollment) pair to the extracted target waveform.

Everything operates on [B, 2F, T] real/imag stacks in the compressed domain.
The denoiser and the backbone's mask head are zero-initialized deltas, so an
untrained model is an exact passthrough: denoiser(Y) == Y and the mask is the
complex identity.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .dsp import (
    SpectroConfig,
    Waveform,
    drc_compress_tensor,
    drc_expand_tensor,
    istft_tensor,
    stft_tensor,
)
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class DenoiserParams:
    """Conv-recurrent encoder/decoder sizes for the front-end denoiser."""

    channels: tuple[int, int] = (6, 10)
    rnn_hidden: int = 24
    param_budget: int = 60_000

    def __post_init__(self):
        if len(self.channels) != 2 or min(self.channels) < 1 or self.rnn_hidden < 1:
            raise ConfigError(f"invalid denoiser sizes: {self}")


@dataclass(frozen=True)
class BackboneParams:
    """Residual conv-recurrent stack sizes and guidance fusion mode.

    mask_limit bounds the mask's deviation from the identity via a tanh
    squash (slope 1 at zero, so initialization stays exactly identity).
    """

    hidden: int = 64
    n_blocks: int = 2
    fusion: str = "concat"  # "concat" | "add"
    mask_limit: float | None = 2.0
    param_budget: int = 600_000

    def __post_init__(self):
        if self.hidden < 1 or self.n_blocks < 0:
            raise ConfigError(f"invalid backbone sizes: {self}")
        if self.fusion not in ("concat", "add"):
            raise ConfigError(f"fusion must be 'concat' or 'add', got {self.fusion!r}")
        if self.mask_limit is not None and self.mask_limit <= 0:
            raise ConfigError(f"mask_limit must be positive or None, got {self.mask_limit}")


def context_interaction(enroll: torch.Tensor, mixture: torch.Tensor,
                        attn_scale: float = 1.0) -> torch.Tensor:
    """Attend the enrollment onto the mixture's time axis.

    enroll [.., 2F, T_e] x mixture [.., 2F, T_y]: logits are the frame-by-frame
    inner products, softmax-normalized over enrollment frames, so every mixture
    frame receives a convex combination of enrollment frames.
    """
    squeeze = enroll.dim() == 2
    e = enroll.unsqueeze(0) if squeeze else enroll
    m = mixture.unsqueeze(0) if squeeze else mixture
    if e.dim() != 3 or m.dim() != 3:
        raise ShapeError("context_interaction expects [2F, T] or [B, 2F, T] inputs")
    if e.shape[0] != m.shape[0] or e.shape[1] != m.shape[1]:
        raise ShapeError(
            f"enrollment {tuple(e.shape)} and mixture {tuple(m.shape)} disagree on batch/frequency"
        )
    logits = torch.einsum("bft,bfu->btu", e, m) * attn_scale  # [B, T_e, T_y]
    attn = torch.softmax(logits, dim=1)
    out = torch.einsum("bft,btu->bfu", e, attn)  # [B, 2F, T_y]
    return out.squeeze(0) if squeeze else out


def apply_complex_mask(mask: torch.Tensor, rep: torch.Tensor) -> torch.Tensor:
    """Per-bin complex multiply of a [.., 2F, T] mask with a [.., 2F, T] stack."""
    f = rep.shape[-2] // 2
    mr, mi = mask[..., :f, :], mask[..., f:, :]
    yr, yi = rep[..., :f, :], rep[..., f:, :]
    return torch.cat([mr * yr - mi * yi, mr * yi + mi * yr], dim=-2)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class Denoiser(nn.Module):
    """Small conv-recurrent encoder/decoder producing a residual correction.

    Two stride-2 convolutions over frequency need (freq_bins - 1) divisible
    by 4; the standard 129/65-bin geometries satisfy this.
    """

    def __init__(self, freq_bins: int, params: DenoiserParams):
        super().__init__()
        if (freq_bins - 1) % 4 != 0:
            raise ConfigError(f"denoiser needs (freq_bins - 1) %% 4 == 0, got F={freq_bins}")
        c1, c2 = params.channels
        f1 = (freq_bins + 1) // 2
        f2 = (f1 + 1) // 2
        self.freq_bins = freq_bins
        self.params = params
        self.enc1 = nn.Conv2d(2, c1, (3, 3), stride=(2, 1), padding=(1, 1))
        self.enc2 = nn.Conv2d(c1, c2, (3, 3), stride=(2, 1), padding=(1, 1))
        self.norm1 = nn.GroupNorm(1, c1)
        self.norm2 = nn.GroupNorm(1, c2)
        self.act1 = nn.PReLU()
        self.act2 = nn.PReLU()
        self.rnn = nn.GRU(c2 * f2, params.rnn_hidden, batch_first=True)
        self.back = nn.Linear(params.rnn_hidden, c2 * f2)
        self.dec1 = nn.ConvTranspose2d(c2, c1, (3, 3), stride=(2, 1), padding=(1, 1))
        self.norm3 = nn.GroupNorm(1, c1)
        self.act3 = nn.PReLU()
        self.dec2 = nn.ConvTranspose2d(c1, 2, (3, 3), stride=(2, 1), padding=(1, 1))
        nn.init.zeros_(self.dec2.weight)
        nn.init.zeros_(self.dec2.bias)
        self._f2 = f2
        self._c2 = c2
        n = count_parameters(self)
        if n > params.param_budget:
            raise ConfigError(f"denoiser has {n} parameters, budget is {params.param_budget}")

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] != 2 * self.freq_bins:
            raise ShapeError(f"expected {2 * self.freq_bins} rows, got {x.shape[-2]}")
        b, _, t = x.shape
        h = x.reshape(b, 2, self.freq_bins, t)
        e1 = self.act1(self.norm1(self.enc1(h)))
        e2 = self.act2(self.norm2(self.enc2(e1)))
        seq = e2.flatten(1, 2).transpose(1, 2)  # [B, T, c2*f2]
        g, _ = self.rnn(seq)
        g = self.back(g).transpose(1, 2).reshape(b, self._c2, self._f2, t)
        d1 = self.act3(self.norm3(self.dec1(e2 + g))) + e1
        delta = self.dec2(d1)
        return x + delta.reshape(b, 2 * self.freq_bins, t)


class _ResidualBlock(nn.Module):
    def __init__(self, hidden: int):
        super().__init__()
        self.conv1 = nn.Conv1d(hidden, hidden, 3, padding=1)
        self.conv2 = nn.Conv1d(hidden, hidden, 3, padding=1)
        self.norm1 = nn.GroupNorm(1, hidden)
        self.norm2 = nn.GroupNorm(1, hidden)
        self.act1 = nn.PReLU()
        self.act2 = nn.PReLU()

    def forward(self, x):
        h = self.act1(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act2(x + h)


class Backbone(nn.Module):
    """Residual conv-recurrent stack mapping (mixture rep, guidance) to a
    complex ratio mask, initialized at the identity mask."""

    def __init__(self, freq_bins: int, params: BackboneParams):
        super().__init__()
        self.freq_bins = freq_bins
        self.params = params
        in_rows = 4 * freq_bins if params.fusion == "concat" else 2 * freq_bins
        h = params.hidden
        self.inp = nn.Conv1d(in_rows, h, 1)
        self.inp_norm = nn.GroupNorm(1, h)
        self.inp_act = nn.PReLU()
        self.blocks = nn.ModuleList(_ResidualBlock(h) for _ in range(params.n_blocks))
        self.rnn = nn.GRU(h, h, batch_first=True)
        self.rnn_proj = nn.Linear(h, h)
        self.head = nn.Conv1d(h, 2 * freq_bins, 1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        n = count_parameters(self)
        if n > params.param_budget:
            raise ConfigError(f"backbone has {n} parameters, budget is {params.param_budget}")

    def forward(self, rep: torch.Tensor, guidance: torch.Tensor) -> torch.Tensor:
        if rep.shape != guidance.shape:
            raise ShapeError(f"rep {tuple(rep.shape)} and guidance {tuple(guidance.shape)} differ")
        x = torch.cat([rep, guidance], dim=1) if self.params.fusion == "concat" else rep + guidance
        h = self.inp_act(self.inp_norm(self.inp(x)))
        for block in self.blocks:
            h = block(h)
        g, _ = self.rnn(h.transpose(1, 2))
        h = h + self.rnn_proj(g).transpose(1, 2)
        delta = self.head(h)
        if self.params.mask_limit is not None:
            k = self.params.mask_limit
            delta = k * torch.tanh(delta / k)
        identity = torch.zeros_like(delta)
        identity[:, : self.freq_bins] = 1.0
        return identity + delta


class Extractor(nn.Module):
    """End-to-end extraction model.

    Pipeline: STFT -> magnitude compression -> denoise -> enrollment context
    interaction -> mask prediction -> complex mask on the mixture
    representation -> magnitude expansion -> iSTFT, output trimmed to the
    input mixture's length.
    """

    def __init__(
        self,
        spectro: SpectroConfig,
        denoiser_params: DenoiserParams = DenoiserParams(),
        backbone_params: BackboneParams = BackboneParams(),
        attn_scale: float = 1.0,
        backbone_input: str = "denoised",
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if backbone_input not in ("denoised", "noisy"):
            raise ConfigError(f"backbone_input must be 'denoised' or 'noisy', got {backbone_input!r}")
        self.spectro = spectro
        self.attn_scale = attn_scale
        self.backbone_input = backbone_input
        self.denoiser = Denoiser(spectro.freq_bins, denoiser_params)
        self.backbone = Backbone(spectro.freq_bins, backbone_params)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def denoise(self, compressed: torch.Tensor) -> torch.Tensor:
        """Front-end pass on an already-compressed [.., 2F, T] stack."""
        squeeze = compressed.dim() == 2
        y = compressed.unsqueeze(0) if squeeze else compressed
        out = self.denoiser(y)
        return out.squeeze(0) if squeeze else out

    def forward(self, mixture: torch.Tensor, enrollment: torch.Tensor) -> torch.Tensor:
        """Extract targets for a batch: [B, L] mixtures + [B, L_e] enrollments -> [B, L]."""
        if mixture.dim() != 2 or enrollment.dim() != 2:
            raise ShapeError("forward expects [B, L] mixtures and [B, L_e] enrollments")
        beta = self.spectro.beta
        mix_c = drc_compress_tensor(stft_tensor(mixture, self.spectro), beta)
        enr_c = drc_compress_tensor(stft_tensor(enrollment, self.spectro), beta)
        denoised = self.denoiser(mix_c)
        guidance = context_interaction(enr_c, denoised, self.attn_scale)
        rep = denoised if self.backbone_input == "denoised" else mix_c
        mask = self.backbone(rep, guidance)
        out_spec = apply_complex_mask(mask, rep)
        return istft_tensor(drc_expand_tensor(out_spec, beta), self.spectro, mixture.shape[-1])

    def extract(self, mixture: Waveform, enrollment: Waveform) -> Waveform:
        """Inference on one (mixture, enrollment) pair."""
        return self.extract_many([mixture], enrollment)[0]

    def extract_many(self, mixtures: list[Waveform], enrollment: Waveform) -> list[Waveform]:
        """Inference on several mixtures sharing one enrollment, batched."""
        if not mixtures:
            return []
        rate = self.spectro.sample_rate
        for w in [*mixtures, enrollment]:
            if w.sample_rate != rate:
                raise ConfigError(f"waveform rate {w.sample_rate} != model rate {rate}")
        lengths = {len(m) for m in mixtures}
        if len(lengths) != 1:
            raise ShapeError(f"mixtures must share length, got {sorted(lengths)}")
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                mix = torch.stack(
                    [torch.from_numpy(m.samples).to(self.dtype) for m in mixtures]
                )
                enr = torch.from_numpy(enrollment.samples).to(self.dtype)
                enr = enr.unsqueeze(0).expand(len(mixtures), -1)
                out = self(mix, enr).to(torch.float64).numpy()
        finally:
            self.train(was_training)
        return [Waveform(out[i], rate) for i in range(len(mixtures))]

    def config_dict(self) -> dict:
        return {
            "spectro": asdict(self.spectro),
            "denoiser": {**asdict(self.denoiser.params), "channels": list(self.denoiser.params.channels)},
            "backbone": asdict(self.backbone.params),
            "attn_scale": self.attn_scale,
            "backbone_input": self.backbone_input,
            "dtype": str(self.dtype).removeprefix("torch."),
        }


def parallel_forward(model: Extractor, mixtures, enrollment) -> list:
    """Run several mixtures of one target through the model in a single batch.

    Accepts Waveforms (inference path, returns Waveforms) or equal-length
    [L] tensors (training path, returns a list of [L] tensors on the graph).
    """
    if not mixtures:
        return []
    if isinstance(mixtures[0], Waveform):
        return model.extract_many(list(mixtures), enrollment)
    lengths = {m.shape[-1] for m in mixtures}
    if len(lengths) != 1:
        raise ShapeError(f"mixtures must share length, got {sorted(lengths)}")
    mix = torch.stack(list(mixtures))
    enr = enrollment.unsqueeze(0).expand(len(mixtures), -1)
    out = model(mix, enr)
    return list(out.unbind(0))


def build_extractor(config: dict) -> Extractor:
    """Reconstruct an Extractor from config_dict() output."""
    spectro = SpectroConfig(**config["spectro"])
    den = dict(config["denoiser"])
    den["channels"] = tuple(den["channels"])
    return Extractor(
        spectro,
        DenoiserParams(**den),
        BackboneParams(**config["backbone"]),
        attn_scale=config.get("attn_scale", 1.0),
        backbone_input=config.get("backbone_input", "denoised"),
        dtype=getattr(torch, config.get("dtype", "float32")),
    )


def state_to_arrays(model: nn.Module) -> dict[str, np.ndarray]:
    return {name: tensor.detach().to(torch.float64).numpy() for name, tensor in model.state_dict().items()}


def load_state_arrays(model: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = sorted(set(state) - set(arrays))
    extra = sorted(set(arrays) - set(state))
    if missing or extra:
        raise ConfigError(f"checkpoint parameter mismatch: missing={missing} extra={extra}")
    model.load_state_dict(
        {name: torch.from_numpy(np.asarray(arr)).to(state[name].dtype) for name, arr in arrays.items()}
    )
