"""Condition-wise evaluation: metric tables, the cross-condition consistency
gap, and the front-end behavior probe with its diagnostic spectrograms."""

from __future__ import annotations

import csv
import io
import json
import logging
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import ALL_CONDITIONS, ConditionTriplet, EvalItem, eval_items_from_pool
from .dsp import Waveform, drc_compress_tensor, drc_expand_tensor, istft_tensor, stft_tensor, write_wav
from .errors import ConfigError, DataError
from .metrics import MetricRow, pesq_external, si_sdr, stoi
from .training import denoise_target

log = logging.getLogger(__name__)

RENDER_FORMATS = ("text", "markdown", "csv")


class IdentityStub:
    """Model stand-in that returns the mixture unchanged (the unprocessed system)."""

    def extract(self, mixture: Waveform, enrollment: Waveform) -> Waveform:
        return mixture


@dataclass
class EvalReport:
    """Per-condition metric rows for a model plus the matching unprocessed rows."""

    rows: dict[str, MetricRow]
    unprocessed: dict[str, MetricRow]
    model_id: str
    corpus_id: str
    metadata: dict = field(default_factory=dict)

    def aggregate(self) -> dict[str, float]:
        """Unweighted mean over conditions (artifact-defined, not a paper metric)."""
        conds = sorted(self.rows)
        return {
            "si_sdr": float(np.mean([self.rows[c].si_sdr for c in conds])),
            "stoi": float(np.mean([self.rows[c].stoi for c in conds])),
        }

    def to_json(self) -> str:
        return json.dumps(
            {
                "rows": {c: asdict(r) for c, r in self.rows.items()},
                "unprocessed": {c: asdict(r) for c, r in self.unprocessed.items()},
                "model_id": self.model_id,
                "corpus_id": self.corpus_id,
                "metadata": self.metadata,
                "aggregate": self.aggregate(),
            },
            indent=2,
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        raw = json.loads(text)
        return cls(
            rows={c: MetricRow(**r) for c, r in raw["rows"].items()},
            unprocessed={c: MetricRow(**r) for c, r in raw["unprocessed"].items()},
            model_id=raw["model_id"],
            corpus_id=raw["corpus_id"],
            metadata=raw.get("metadata", {}),
        )


def _mean_rows(condition: str, per_item: list[dict]) -> MetricRow:
    # Deterministic reduction: items are scored in pool order and summed in order.
    pesq_vals = [d["pesq"] for d in per_item if d.get("pesq") is not None]
    return MetricRow(
        condition=condition,
        si_sdr=float(np.mean([d["si_sdr"] for d in per_item])),
        stoi=float(np.mean([d["stoi"] for d in per_item])),
        n_items=len(per_item),
        pesq=float(np.mean(pesq_vals)) if pesq_vals else None,
    )


def _score_pair(estimate: Waveform, target: Waveform, compute_stoi: bool,
                pesq_cmd: str | None) -> dict:
    out = {"si_sdr": si_sdr(estimate, target)}
    out["stoi"] = 100.0 * stoi(estimate, target) if compute_stoi else 0.0
    if pesq_cmd:
        with tempfile.TemporaryDirectory() as tmp:
            est_path = Path(tmp) / "estimate.wav"
            ref_path = Path(tmp) / "reference.wav"
            write_wav(est_path, estimate)
            write_wav(ref_path, target)
            out["pesq"] = pesq_external(est_path, ref_path, pesq_cmd)
    return out


def evaluate(
    model,
    pool,
    conditions=ALL_CONDITIONS,
    compute_stoi: bool = True,
    pesq_cmd: str | None = None,
    model_id: str = "model",
    corpus_id: str = "pool",
    metadata: dict | None = None,
) -> EvalReport:
    """Extract every item per condition and average metrics against the targets.

    `pool` is either a list of ConditionTriplets or anything with an
    eval_items(condition) accessor. Conditions with no items are skipped with
    a warning; an entirely empty evaluation is an error.
    """
    rows: dict[str, MetricRow] = {}
    unprocessed: dict[str, MetricRow] = {}
    for condition in conditions:
        if condition not in ALL_CONDITIONS:
            raise ConfigError(f"unknown condition {condition!r}")
        items = _items_for(pool, condition)
        if not items:
            log.warning("condition %s has no items; skipped", condition)
            continue
        scored, raw = [], []
        for item in items:
            estimate = model.extract(item.mixture, item.enrollment)
            scored.append(_score_pair(estimate, item.target, compute_stoi, pesq_cmd))
            raw.append(_score_pair(item.mixture, item.target, compute_stoi, pesq_cmd))
        rows[condition] = _mean_rows(condition, scored)
        unprocessed[condition] = _mean_rows(condition, raw)
    if not rows:
        raise DataError("no condition had any evaluation items")
    return EvalReport(rows, unprocessed, model_id, corpus_id, metadata or {})


def _items_for(pool, condition: str) -> list[EvalItem]:
    if hasattr(pool, "eval_items"):
        return pool.eval_items(condition)
    return eval_items_from_pool(pool, condition)


def consistency_gap(model, pool: list[ConditionTriplet]) -> float:
    """Mean L1 distance between the extractions of the two noisy conditions."""
    if not pool:
        raise DataError("consistency_gap needs at least one triplet")
    gaps = []
    for trip in pool:
        s1, s2 = model.extract_many([trip.y_single, trip.y_both], trip.enrollment)
        gaps.append(float(np.mean(np.abs(s1.samples - s2.samples))))
    return float(np.mean(gaps))


def denoiser_probe(model, pool: list[ConditionTriplet], out_dir=None) -> dict[str, dict[str, float]]:
    """Front-end behavior per condition: relative spectral change and SI-SDR
    of the denoised waveform against the mixture-without-noise reference.

    Optionally renders a two-row spectrogram figure (inputs above, denoised
    outputs below) for the first triplet.
    """
    if not pool:
        raise DataError("denoiser_probe needs at least one triplet")
    cfg = model.spectro
    stats: dict[str, list[dict[str, float]]] = {c: [] for c in ALL_CONDITIONS}
    first_specs: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    with torch.no_grad():
        for idx, trip in enumerate(pool):
            for condition in ALL_CONDITIONS:
                mix = trip.mixture(condition)
                ref = denoise_target(trip, condition)
                x = torch.from_numpy(mix.samples).to(model.dtype)
                spec = drc_compress_tensor(stft_tensor(x, cfg), cfg.beta)
                den = model.denoise(spec)
                rel_change = float(torch.linalg.vector_norm(den - spec) / torch.linalg.vector_norm(spec))
                wave = istft_tensor(drc_expand_tensor(den, cfg.beta), cfg, len(mix))
                den_wave = Waveform(wave.to(torch.float64).numpy(), cfg.sample_rate)
                stats[condition].append(
                    {
                        "rel_change": rel_change,
                        "si_sdr_denoised": si_sdr(den_wave, ref),
                        "si_sdr_unprocessed": si_sdr(mix, ref),
                    }
                )
                if idx == 0:
                    first_specs[condition] = (
                        spec.to(torch.float64).numpy(),
                        den.to(torch.float64).numpy(),
                    )
    result = {
        c: {k: float(np.mean([d[k] for d in rows])) for k in rows[0]}
        for c, rows in stats.items()
    }
    if out_dir is not None:
        _render_probe_figure(first_specs, cfg, Path(out_dir) / "denoiser_probe.png")
    return result


def _log_magnitude(stack: np.ndarray, freq_bins: int) -> np.ndarray:
    mag = np.hypot(stack[:freq_bins], stack[freq_bins:])
    db = 20.0 * np.log10(np.maximum(mag, 1e-12))
    return np.clip(db - db.max(), -60.0, 0.0)


def _render_probe_figure(specs: dict, cfg, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    conditions = [c for c in ALL_CONDITIONS if c in specs]
    fig, axes = plt.subplots(2, len(conditions), figsize=(4 * len(conditions), 6), squeeze=False)
    for col, condition in enumerate(conditions):
        mix_spec, den_spec = specs[condition]
        for row, (title, stack) in enumerate((("input", mix_spec), ("denoised", den_spec))):
            ax = axes[row][col]
            ax.imshow(
                _log_magnitude(stack, cfg.freq_bins),
                origin="lower",
                aspect="auto",
                vmin=-60.0,
                vmax=0.0,
                cmap="magma",
            )
            ax.set_title(f"{condition} ({title})", fontsize=9)
            ax.set_xlabel("frame")
            ax.set_ylabel("bin")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata={"Software": "xtse"})
    plt.close(fig)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def _fmt(value, digits=2) -> str:
    if value is None:
        return "—"
    return f"{value:.{digits}f}"


def _table_rows(report: EvalReport) -> list[tuple[str, str, MetricRow]]:
    out = []
    for system, rows in (("unprocessed", report.unprocessed), (report.model_id, report.rows)):
        for condition in sorted(rows):
            out.append((system, condition, rows[condition]))
    return out


def render_report(report: EvalReport, fmt: str = "markdown") -> str:
    """Render per-condition metrics as text/markdown/CSV (PESQ blank when absent)."""
    if fmt not in RENDER_FORMATS:
        raise ConfigError(f"unknown format {fmt!r}; valid: {RENDER_FORMATS}")
    rows = _table_rows(report)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["system", "condition", "n_items", "si_sdr", "pesq", "stoi"])
        for system, condition, row in rows:
            writer.writerow(
                [system, condition, row.n_items,
                 f"{row.si_sdr:.6f}",
                 "" if row.pesq is None else f"{row.pesq:.6f}",
                 f"{row.stoi:.6f}"]
            )
        agg = report.aggregate()
        writer.writerow([report.model_id, "mean", "", f"{agg['si_sdr']:.6f}", "", f"{agg['stoi']:.6f}"])
        return buf.getvalue()

    header = ["System", "Condition", "N", "SI-SDR (dB)", "PESQ", "STOI (%)"]
    body = [
        [system, condition, str(row.n_items), _fmt(row.si_sdr), _fmt(row.pesq), _fmt(row.stoi)]
        for system, condition, row in rows
    ]
    agg = report.aggregate()
    body.append([report.model_id, "mean", "", _fmt(agg["si_sdr"]), "", _fmt(agg["stoi"])])
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        lines += ["| " + " | ".join(r) + " |" for r in body]
        return "\n".join(lines) + "\n"
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(header))]
    lines += ["  ".join(c.ljust(widths[i]) for i, c in enumerate(r)) for r in body]
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> dict[tuple[str, str], dict[str, float]]:
    """Read back render_report(..., 'csv') into {(system, condition): metrics}."""
    out = {}
    for row in csv.DictReader(io.StringIO(text)):
        if row["condition"] == "mean":
            continue
        out[(row["system"], row["condition"])] = {
            "n_items": int(row["n_items"]),
            "si_sdr": float(row["si_sdr"]),
            "stoi": float(row["stoi"]),
            "pesq": float(row["pesq"]) if row["pesq"] else None,
        }
    return out


def compare_reports(a: EvalReport, b: EvalReport) -> dict[str, dict[str, float]]:
    """Per-condition metric deltas (a minus b) over the shared conditions."""
    shared = sorted(set(a.rows) & set(b.rows))
    if not shared:
        raise DataError("reports share no conditions")
    return {
        c: {
            "si_sdr": a.rows[c].si_sdr - b.rows[c].si_sdr,
            "stoi": a.rows[c].stoi - b.rows[c].stoi,
        }
        for c in shared
    }


def render_comparison(delta: dict[str, dict[str, float]], label_a: str, label_b: str) -> str:
    lines = [f"delta = {label_a} - {label_b}"]
    for condition in sorted(delta):
        d = delta[condition]
        lines.append(
            f"  {condition:<12} SI-SDR {d['si_sdr']:+.2f} dB   STOI {d['stoi']:+.2f}"
        )
    return "\n".join(lines) + "\n"
