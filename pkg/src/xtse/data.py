"""Three-condition mixture simulation, triplet batching, and manifest ingestion.

A ConditionTriplet bundles one target speaker's clean speech, an enrollment
utterance, and the three interference conditions built from shared
ingredients: the 1-speaker+noise and 2-speaker+noise mixtures reuse the exact
same scaled noise segment, so the pair differs only by the interferer.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .dsp import Waveform, read_wav, write_wav
from .errors import ConfigError, DataError, DomainError, ShapeError

COND_SINGLE = "1spk+noise"
COND_CLEAN = "2spk"
COND_BOTH = "2spk+noise"
ALL_CONDITIONS = (COND_SINGLE, COND_CLEAN, COND_BOTH)
NOISY_CONDITIONS = (COND_SINGLE, COND_BOTH)

MODE_CONDITION_WISE = "condition-wise"
MODE_TRIPLEC = "triplec"
MODE_TRIPLEC_PARALLEL = "triplec-parallel"
MODE_SHUFFLED = "shuffled"
ALL_MODES = (MODE_CONDITION_WISE, MODE_TRIPLEC, MODE_TRIPLEC_PARALLEL, MODE_SHUFFLED)

# Libri2Mix directory naming for the same three conditions.
_CONDITION_ALIASES = {
    "mix_single": COND_SINGLE,
    "mix_clean": COND_CLEAN,
    "mix_both": COND_BOTH,
}


@dataclass(frozen=True)
class TrainingMode:
    """Which conditions a training batch draws and how outputs are coupled."""

    kind: str
    condition: str | None = None

    def __post_init__(self):
        if self.kind not in ALL_MODES:
            raise ConfigError(f"unknown mode {self.kind!r}; valid modes: {', '.join(ALL_MODES)}")
        if self.kind == MODE_CONDITION_WISE:
            if self.condition not in ALL_CONDITIONS:
                raise ConfigError(
                    f"condition-wise mode needs a condition from {ALL_CONDITIONS}, got {self.condition!r}"
                )
        elif self.condition is not None:
            raise ConfigError(f"mode {self.kind!r} does not take a condition")

    @classmethod
    def condition_wise(cls, condition: str) -> "TrainingMode":
        return cls(MODE_CONDITION_WISE, condition)

    @classmethod
    def triplec(cls) -> "TrainingMode":
        return cls(MODE_TRIPLEC)

    @classmethod
    def triplec_parallel(cls) -> "TrainingMode":
        return cls(MODE_TRIPLEC_PARALLEL)

    @classmethod
    def shuffled(cls) -> "TrainingMode":
        return cls(MODE_SHUFFLED)


@dataclass(frozen=True)
class SourceClip:
    """A raw speech or noise recording."""

    speaker_id: str | None
    waveform: Waveform
    kind: str  # "speech" | "noise"
    utterance_id: str = ""

    def __post_init__(self):
        if self.kind == "speech":
            if not self.speaker_id:
                raise DataError("speech clips must carry a speaker_id")
        elif self.kind != "noise":
            raise DataError(f"clip kind must be 'speech' or 'noise', got {self.kind!r}")


@dataclass(frozen=True)
class ConditionTriplet:
    """One target's clean reference, enrollment, and its three condition mixtures."""

    target: Waveform
    enrollment: Waveform
    y_single: Waveform
    y_clean2: Waveform
    y_both: Waveform
    speaker_id: str
    interferer_id: str
    snr_db: float
    sir_db: float

    def __post_init__(self):
        rates = {
            self.target.sample_rate,
            self.enrollment.sample_rate,
            self.y_single.sample_rate,
            self.y_clean2.sample_rate,
            self.y_both.sample_rate,
        }
        if len(rates) != 1:
            raise ConfigError(f"triplet waveforms disagree on sample rate: {sorted(rates)}")
        lengths = {len(self.target), len(self.y_single), len(self.y_clean2), len(self.y_both)}
        if len(lengths) != 1:
            raise ShapeError(f"target and mixtures must share length (min mode), got {sorted(lengths)}")
        if self.speaker_id == self.interferer_id:
            raise DataError(f"target and interferer must be different speakers ({self.speaker_id})")

    @property
    def sample_rate(self) -> int:
        return self.target.sample_rate

    def mixture(self, condition: str) -> Waveform:
        try:
            return {
                COND_SINGLE: self.y_single,
                COND_CLEAN: self.y_clean2,
                COND_BOTH: self.y_both,
            }[condition]
        except KeyError:
            raise ConfigError(f"unknown condition {condition!r}") from None

    def noise_residual_error(self) -> float:
        """Max abs deviation of (y_both - y_clean2) from the shared noise segment."""
        return float(np.max(np.abs(
            (self.y_both.samples - self.y_clean2.samples)
            - (self.y_single.samples - self.target.samples)
        ), initial=0.0))


@dataclass
class BatchItem:
    """One sampled training example: per-condition mixtures plus shared target/enrollment."""

    mixtures: dict[str, Waveform]
    enrollment: Waveform
    target: Waveform
    speaker_id: str
    triplet_index: int


def _gain_for_level(a: np.ndarray, b: np.ndarray, gain_db: float) -> float:
    ea = float(np.dot(a, a))
    eb = float(np.dot(b, b))
    if eb == 0.0:
        raise DomainError("cannot scale a zero-energy signal to a finite level")
    if ea == 0.0:
        raise DomainError("cannot set a level relative to a zero-energy signal")
    return math.sqrt(ea / (eb * 10.0 ** (gain_db / 10.0)))


def mix_min(a: Waveform, b: Waveform, gain_db: float) -> Waveform:
    """Sum a and b truncated to the shorter length, with b scaled so the
    a-to-b energy ratio on the truncated segment equals gain_db.

    gain_db = -inf disables b entirely (returns the truncated copy of a).
    """
    if a.sample_rate != b.sample_rate:
        raise ConfigError(f"sample rates differ: {a.sample_rate} vs {b.sample_rate}")
    if len(a) == 0 or len(b) == 0:
        raise ShapeError("cannot mix empty signals")
    n = min(len(a), len(b))
    a_cut = a.samples[:n]
    if gain_db == -math.inf:
        return Waveform(a_cut.copy(), a.sample_rate)
    b_cut = b.samples[:n]
    return Waveform(a_cut + _gain_for_level(a_cut, b_cut, gain_db) * b_cut, a.sample_rate)


def make_triplet(
    target_clip: SourceClip,
    enroll_clip: SourceClip,
    interferer_clip: SourceClip,
    noise_clip: SourceClip,
    sir_db: float,
    snr_db: float,
    enroll_duration_s: float | None = None,
) -> ConditionTriplet:
    """Build the three condition mixtures around one target utterance.

    All sources are truncated to the common min length first; the noise
    segment is scaled once (relative to the truncated target) and reused by
    both noisy conditions, so y_both - y_clean2 == y_single - target exactly.
    """
    if target_clip.kind != "speech" or enroll_clip.kind != "speech" or interferer_clip.kind != "speech":
        raise DataError("target, enrollment and interferer must be speech clips")
    if noise_clip.kind != "noise":
        raise DataError("noise_clip must have kind 'noise'")
    if target_clip.speaker_id != enroll_clip.speaker_id:
        raise DataError(
            f"enrollment speaker {enroll_clip.speaker_id} != target speaker {target_clip.speaker_id}"
        )
    if interferer_clip.speaker_id == target_clip.speaker_id:
        raise DataError(f"interferer must differ from target speaker {target_clip.speaker_id}")
    if np.array_equal(target_clip.waveform.samples, enroll_clip.waveform.samples):
        raise DataError("enrollment must be a different utterance than the target")
    rates = {
        target_clip.waveform.sample_rate,
        enroll_clip.waveform.sample_rate,
        interferer_clip.waveform.sample_rate,
        noise_clip.waveform.sample_rate,
    }
    if len(rates) != 1:
        raise ConfigError(f"clips disagree on sample rate: {sorted(rates)}")
    rate = target_clip.waveform.sample_rate

    n = min(len(target_clip.waveform), len(interferer_clip.waveform), len(noise_clip.waveform))
    if n == 0:
        raise ShapeError("cannot mix empty signals")
    s = target_clip.waveform.samples[:n]
    interferer = interferer_clip.waveform.samples[:n]
    noise = noise_clip.waveform.samples[:n]

    scaled_i = np.zeros(n) if sir_db == -math.inf else _gain_for_level(s, interferer, sir_db) * interferer
    scaled_n = np.zeros(n) if snr_db == -math.inf else _gain_for_level(s, noise, snr_db) * noise

    y_clean2 = s + scaled_i
    return ConditionTriplet(
        target=Waveform(s.copy(), rate),
        enrollment=prepare_enrollment(enroll_clip.waveform, enroll_duration_s),
        y_single=Waveform(s + scaled_n, rate),
        y_clean2=Waveform(y_clean2, rate),
        y_both=Waveform(y_clean2 + scaled_n, rate),
        speaker_id=target_clip.speaker_id,
        interferer_id=interferer_clip.speaker_id,
        snr_db=snr_db,
        sir_db=sir_db,
    )


def prepare_enrollment(w: Waveform, duration_s: float | None) -> Waveform:
    """Crop (or tile, for short clips) the enrollment to a fixed duration."""
    if duration_s is None:
        return w
    n = round(duration_s * w.sample_rate)
    if n <= 0:
        raise ConfigError(f"enrollment duration {duration_s}s is empty at {w.sample_rate} Hz")
    if len(w) >= n:
        return Waveform(w.samples[:n].copy(), w.sample_rate)
    reps = -(-n // len(w))
    return Waveform(np.tile(w.samples, reps)[:n], w.sample_rate)


def sample_batch(
    pool: list[ConditionTriplet],
    batch_size: int,
    mode: TrainingMode,
    rng_seed,
) -> list[BatchItem]:
    """Draw a deterministic batch of training items for the given mode."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if len(pool) < batch_size:
        raise DataError(f"pool has {len(pool)} triplets, need at least {batch_size}")
    rng = np.random.default_rng(rng_seed)
    indices = rng.choice(len(pool), size=batch_size, replace=False)
    items = []
    for idx in indices:
        trip = pool[int(idx)]
        if mode.kind == MODE_CONDITION_WISE:
            conds = (mode.condition,)
        elif mode.kind == MODE_SHUFFLED:
            conds = (ALL_CONDITIONS[int(rng.integers(len(ALL_CONDITIONS)))],)
        elif mode.kind == MODE_TRIPLEC:
            conds = NOISY_CONDITIONS
        else:
            conds = ALL_CONDITIONS
        items.append(
            BatchItem(
                mixtures={c: trip.mixture(c) for c in conds},
                enrollment=trip.enrollment,
                target=trip.target,
                speaker_id=trip.speaker_id,
                triplet_index=int(idx),
            )
        )
    return items


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


@dataclass
class SourceCorpus:
    """Generated speech/noise clips plus the per-speaker fundamentals."""

    speech: list[SourceClip]
    noise: list[SourceClip]
    sample_rate: int
    speaker_f0: dict[str, float] = field(default_factory=dict)

    def speakers(self) -> list[str]:
        return sorted({c.speaker_id for c in self.speech})

    def utterances(self, speaker_id: str) -> list[SourceClip]:
        return [c for c in self.speech if c.speaker_id == speaker_id]


def _speaker_name(i: int) -> str:
    return f"spk{i:02d}"


def _pseudo_speech(rng: np.random.Generator, f0: float, tilt: float,
                   duration_s: float, rate: int) -> np.ndarray:
    """Harmonic series with per-utterance amplitude modulation and vibrato."""
    n = round(duration_s * rate)
    t = np.arange(n) / rate
    mod_hz = rng.uniform(2.0, 5.0)
    mod_phase = rng.uniform(0, 2 * np.pi)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * mod_hz * t + mod_phase)
    vib_hz = rng.uniform(4.0, 7.0)
    vib_phase = rng.uniform(0, 2 * np.pi)
    inst_f0 = f0 * (1.0 + 0.02 * np.sin(2 * np.pi * vib_hz * t + vib_phase))
    phase = 2 * np.pi * np.cumsum(inst_f0) / rate
    n_harm = max(2, int(min(3000.0, 0.45 * rate) / f0))
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        x += (h ** -tilt) * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    x *= env
    rms = np.sqrt(np.mean(x**2))
    return 0.08 * x / rms


def _filtered_noise(rng: np.random.Generator, duration_s: float, rate: int) -> np.ndarray:
    n = round(duration_s * rate)
    white = rng.standard_normal(n)
    # Highpass tilt keeps the noise spectrally distinct from the
    # low-frequency-dominated harmonic stacks of the pseudo-speech.
    colored = lfilter([1.0, -0.7], [1.0], white)
    rms = np.sqrt(np.mean(colored**2))
    return 0.08 * colored / rms


def synth_corpus(
    n_speakers: int,
    utts_per_speaker: int,
    duration_s: float,
    sample_rate: int = 8000,
    seed: int = 0,
    n_noise: int | None = None,
) -> SourceCorpus:
    """Deterministic pseudo-speech corpus: one fundamental per speaker,
    harmonic-series utterances, and filtered-noise clips."""
    if n_speakers < 2:
        raise DataError("need at least 2 speakers to build an interfering mixture")
    if utts_per_speaker < 2:
        raise DataError("need at least 2 utterances per speaker (target + enrollment)")
    if n_noise is None:
        n_noise = n_speakers * utts_per_speaker
    speech = []
    speaker_f0 = {}
    for i in range(n_speakers):
        name = _speaker_name(i)
        f0 = 105.0 + 28.0 * i
        tilt = 0.8 + 0.6 * (i % 3) / 2.0
        speaker_f0[name] = f0
        for u in range(utts_per_speaker):
            rng = np.random.default_rng([seed, 1, i, u])
            samples = _pseudo_speech(rng, f0, tilt, duration_s, sample_rate)
            speech.append(SourceClip(name, Waveform(samples, sample_rate), "speech", f"u{u:02d}"))
    noise = []
    for j in range(n_noise):
        rng = np.random.default_rng([seed, 2, j])
        samples = _filtered_noise(rng, duration_s, sample_rate)
        noise.append(SourceClip(None, Waveform(samples, sample_rate), "noise", f"n{j:02d}"))
    return SourceCorpus(speech, noise, sample_rate, speaker_f0)


def build_pool(
    corpus: SourceCorpus,
    n_triplets: int,
    seed: int = 0,
    sir_range: tuple[float, float] = (-5.0, 5.0),
    snr_range: tuple[float, float] = (0.0, 15.0),
    enroll_duration_s: float = 2.0,
) -> list[ConditionTriplet]:
    """Deterministically pair corpus clips into condition triplets."""
    speakers = corpus.speakers()
    if len(speakers) < 2:
        raise DataError("pool construction needs at least 2 speakers")
    rng = np.random.default_rng([seed, 3])
    pool = []
    for _ in range(n_triplets):
        spk = speakers[int(rng.integers(len(speakers)))]
        utts = corpus.utterances(spk)
        t_idx, e_idx = rng.choice(len(utts), size=2, replace=False)
        others = [s for s in speakers if s != spk]
        interferer_spk = others[int(rng.integers(len(others)))]
        int_utts = corpus.utterances(interferer_spk)
        interferer = int_utts[int(rng.integers(len(int_utts)))]
        noise = corpus.noise[int(rng.integers(len(corpus.noise)))]
        pool.append(
            make_triplet(
                utts[int(t_idx)],
                utts[int(e_idx)],
                interferer,
                noise,
                sir_db=float(rng.uniform(*sir_range)),
                snr_db=float(rng.uniform(*snr_range)),
                enroll_duration_s=enroll_duration_s,
            )
        )
    return pool


# ---------------------------------------------------------------------------
# Corpus persistence (WAV tree + JSON index)
# ---------------------------------------------------------------------------


def save_corpus(out_dir, corpus: SourceCorpus, pool_spec: dict) -> None:
    """Persist clips as 16-bit WAVs plus an index describing the triplets."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    clips = []
    for clip in corpus.speech + corpus.noise:
        name = (
            f"{clip.speaker_id}_{clip.utterance_id}.wav"
            if clip.kind == "speech"
            else f"noise_{clip.utterance_id}.wav"
        )
        write_wav(out / "wav" / name, clip.waveform)
        clips.append(
            {
                "path": f"wav/{name}",
                "kind": clip.kind,
                "speaker_id": clip.speaker_id,
                "utterance_id": clip.utterance_id,
            }
        )
    index = {
        "format_version": 1,
        "sample_rate": corpus.sample_rate,
        "speaker_f0": corpus.speaker_f0,
        "clips": clips,
        "pool": pool_spec,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True))


def load_corpus(corpus_dir) -> tuple[SourceCorpus, dict]:
    """Load a persisted corpus; returns (corpus, pool_spec)."""
    root = Path(corpus_dir)
    index_path = root / "index.json"
    if not index_path.exists():
        raise DataError(f"no corpus index at {index_path}")
    index = json.loads(index_path.read_text())
    rate = index["sample_rate"]
    speech, noise = [], []
    for entry in index["clips"]:
        w = read_wav(root / entry["path"], expected_rate=rate)
        clip = SourceClip(entry["speaker_id"], w, entry["kind"], entry["utterance_id"])
        (speech if clip.kind == "speech" else noise).append(clip)
    corpus = SourceCorpus(speech, noise, rate, dict(index.get("speaker_f0", {})))
    return corpus, index.get("pool", {})


def load_pool(corpus_dir) -> list[ConditionTriplet]:
    """Rebuild the triplet pool of a persisted corpus (mixing is deterministic)."""
    corpus, pool_spec = load_corpus(corpus_dir)
    if not pool_spec:
        raise DataError(f"corpus at {corpus_dir} has no pool specification")
    return build_pool(
        corpus,
        n_triplets=pool_spec["n_triplets"],
        seed=pool_spec["seed"],
        sir_range=tuple(pool_spec["sir_range"]),
        snr_range=tuple(pool_spec["snr_range"]),
        enroll_duration_s=pool_spec["enroll_duration_s"],
    )


# ---------------------------------------------------------------------------
# Libri2Mix-style manifest ingestion
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ("condition", "mixture_path", "source1_path", "enrollment_path", "noise_path", "sample_rate")


@dataclass
class EvalItem:
    """One pre-mixed (mixture, target, enrollment) example of a known condition."""

    condition: str
    mixture: Waveform
    target: Waveform
    enrollment: Waveform
    key: str


@dataclass
class ManifestPool:
    """Result of manifest ingestion: per-condition items, full triplets, row errors."""

    items: list[EvalItem]
    triplets: list[ConditionTriplet]
    errors: list[str]

    def eval_items(self, condition: str) -> list[EvalItem]:
        return [it for it in self.items if it.condition == condition]


def load_libri2mix_manifest(path) -> ManifestPool:
    """Load a CSV manifest of pre-mixed condition files.

    Each row references one mixture; the first source is the target speaker.
    Rows with missing/unreadable files are rejected individually and reported,
    never aborting the load. Rows sharing (source1, enrollment) across all
    three conditions are additionally assembled into full triplets.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    items: list[EvalItem] = []
    errors: list[str] = []
    groups: dict[tuple[str, str], dict[str, EvalItem]] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                item = _manifest_row_to_item(row, base, lineno)
            except (DataError, ConfigError, ShapeError, OSError, KeyError, ValueError) as exc:
                errors.append(f"line {lineno}: {exc}")
                continue
            items.append(item)
            key = (row["source1_path"], row["enrollment_path"])
            groups.setdefault(key, {})[item.condition] = item

    triplets: list[ConditionTriplet] = []
    for (src, _enr), by_cond in sorted(groups.items()):
        if set(by_cond) != set(ALL_CONDITIONS):
            continue
        n = min(len(by_cond[c].mixture) for c in ALL_CONDITIONS)
        rate = by_cond[COND_SINGLE].mixture.sample_rate
        try:
            triplets.append(
                ConditionTriplet(
                    target=Waveform(by_cond[COND_SINGLE].target.samples[:n], rate),
                    enrollment=by_cond[COND_SINGLE].enrollment,
                    y_single=Waveform(by_cond[COND_SINGLE].mixture.samples[:n], rate),
                    y_clean2=Waveform(by_cond[COND_CLEAN].mixture.samples[:n], rate),
                    y_both=Waveform(by_cond[COND_BOTH].mixture.samples[:n], rate),
                    speaker_id=Path(src).stem,
                    interferer_id=f"{Path(src).stem}::interferer",
                    snr_db=math.nan,
                    sir_db=math.nan,
                )
            )
        except (ConfigError, ShapeError, DataError) as exc:
            errors.append(f"triplet for {src}: {exc}")
    return ManifestPool(items, triplets, errors)


def _manifest_row_to_item(row: dict, base: Path, lineno: int) -> EvalItem:
    condition = _CONDITION_ALIASES.get(row["condition"], row["condition"])
    if condition not in ALL_CONDITIONS:
        raise DataError(f"unknown condition {row['condition']!r}")
    rate = int(row["sample_rate"])

    def _load(col: str) -> Waveform:
        p = Path(row[col])
        if not p.is_absolute():
            p = base / p
        if not p.exists():
            raise DataError(f"{col} file missing: {p}")
        return read_wav(p, expected_rate=rate)

    mixture = _load("mixture_path")
    source1 = _load("source1_path")
    enrollment = _load("enrollment_path")
    n = min(len(mixture), len(source1))  # min mode
    return EvalItem(
        condition=condition,
        mixture=Waveform(mixture.samples[:n], rate),
        target=Waveform(source1.samples[:n], rate),
        enrollment=enrollment,
        key=f"{row['source1_path']}#{condition}",
    )


def eval_items_from_pool(pool: list[ConditionTriplet], condition: str) -> list[EvalItem]:
    """View a triplet pool as per-condition evaluation items."""
    return [
        EvalItem(
            condition=condition,
            mixture=t.mixture(condition),
            target=t.target,
            enrollment=t.enrollment,
            key=f"triplet{idx}#{condition}",
        )
        for idx, t in enumerate(pool)
    ]
