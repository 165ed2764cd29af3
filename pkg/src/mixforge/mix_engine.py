"""Mixed-audio dataset construction.

Foregrounds (speech) are cross-paired with ``mix_ratio`` distinct
backgrounds (music / environment), the background gain is set from
full-utterance RMS to hit a sampled target SNR, the background is looped
or truncated to the foreground length, and the sum is written out along
with a JSONL manifest. A synthetic toy corpus stands in for real pools.
"""
from __future__ import annotations

import csv
import json
import logging
import shutil
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .audio_io import SAMPLE_RATE, Waveform, read_wav, resample, tile_to_length, write_wav

log = logging.getLogger(__name__)

SNR_SET = (-5, 0, 5, 10, 15, 20)
EPS = 1e-8
ROLES = ("foreground", "background")
AUTHENTICITY = ("real", "fake")
CATEGORIES = ("speech", "music", "environment")
COMBINATIONS = ("RF-RB", "FF-RB", "RF-FB", "FF-FB")
MANIFEST_FIELDS = ("utt_id", "path", "kind", "fg_label", "bg_label", "snr_db", "peak_rescale", "split")
POOL_FIELDS = ("id", "path", "role", "authenticity", "category")

FG_ARTIFACT_HZ = 6500.0
BG_ARTIFACT_HZ = 5000.0


class DegenerateSourceError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SourceEntry:
    id: str
    path: str
    role: str
    authenticity: str
    category: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"{self.id}: bad role {self.role!r}")
        if self.authenticity not in AUTHENTICITY:
            raise ValueError(f"{self.id}: bad authenticity {self.authenticity!r}")
        if self.category not in CATEGORIES:
            raise ValueError(f"{self.id}: bad category {self.category!r}")
        if (self.role == "foreground") != (self.category == "speech"):
            raise ValueError(f"{self.id}: role {self.role} inconsistent with category {self.category}")


@dataclass(frozen=True)
class MixSpec:
    fg_id: str
    bg_id: str
    target_snr_db: int
    fg_label: str
    bg_label: str
    pair_index: int

    @property
    def combination(self) -> str:
        return f"{self.fg_label[0].upper()}F-{self.bg_label[0].upper()}B"


@dataclass
class MixManifest:
    mixtures: list
    singles: list
    split: str = "train"
    seed: int = 0
    mix_ratio: int = 4
    sources: dict = field(default_factory=dict)

    def combination_counts(self) -> dict:
        counts = Counter(m.combination for m in self.mixtures)
        return {c: counts.get(c, 0) for c in COMBINATIONS}

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "seed": self.seed,
            "mix_ratio": self.mix_ratio,
            "mixtures": [asdict(m) for m in self.mixtures],
            "singles": [s.id for s in self.singles],
            "sources": [asdict(s) for s in self.sources.values()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixManifest":
        sources = {s["id"]: SourceEntry(**s) for s in d["sources"]}
        return cls(
            mixtures=[MixSpec(**m) for m in d["mixtures"]],
            singles=[sources[i] for i in d["singles"]],
            split=d["split"],
            seed=d["seed"],
            mix_ratio=d["mix_ratio"],
            sources=sources,
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "MixManifest":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Mixture:
    """Result of :func:`mix`; ``foreground``/``scaled_background`` are pre-rescale components."""
    waveform: Waveform
    gain: float
    peak_rescale: float
    foreground: np.ndarray
    scaled_background: np.ndarray


# pools ----------------------------------------------------------------------
def write_pool_csv(entries, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=POOL_FIELDS, lineterminator="\n")
        w.writeheader()
        for e in entries:
            w.writerow(asdict(e))


def read_pool_csv(path) -> list:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != POOL_FIELDS:
            raise ManifestError(f"{path}: expected header {','.join(POOL_FIELDS)}")
        entries = []
        for row in reader:
            p = Path(row["path"])
            if not p.is_absolute():
                row["path"] = str(path.parent / p)
            entries.append(SourceEntry(**row))
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise ManifestError(f"{path}: duplicate source ids")
    return entries


# toy corpus -----------------------------------------------------------------
@dataclass
class ToyCorpusConfig:
    fg_real: int = 2
    fg_fake: int = 2
    bg_real: int = 2
    bg_fake: int = 2
    sample_rate: int = SAMPLE_RATE
    fg_duration: tuple = (3.0, 5.0)
    bg_duration: tuple = (2.0, 6.0)
    prefix: str = ""


def _envelope(rng, n, sr, rate_hz):
    t = np.arange(n) / sr
    phase = rng.uniform(0, 2 * np.pi)
    return 0.55 + 0.45 * np.sin(2 * np.pi * rate_hz * t + phase) ** 2


def _lowpass_noise(rng, n, sr, cutoff):
    sos = sps.butter(6, cutoff, btype="low", fs=sr, output="sos")
    return sps.sosfilt(sos, rng.standard_normal(n))


def _normalize_rms(x, target):
    return x * (target / max(np.sqrt(np.mean(x * x)), EPS))


def _speech_like(rng, n, sr):
    t = np.arange(n) / sr
    f0 = rng.uniform(100.0, 250.0)
    vib = 1.0 + 0.02 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t)
    phase = 2 * np.pi * np.cumsum(f0 * vib) / sr
    x = np.zeros(n)
    k = 1
    while k * f0 < 3400.0:
        x += np.cos(k * phase + rng.uniform(0, 2 * np.pi)) / k
        k += 1
    x *= _envelope(rng, n, sr, rng.uniform(2.0, 5.0))
    x = _normalize_rms(x, 1.0) + 0.15 * _normalize_rms(_lowpass_noise(rng, n, sr, 4000.0), 1.0)
    return x


def _background_like(rng, n, sr, category):
    t = np.arange(n) / sr
    if category == "music":
        root = rng.uniform(110.0, 330.0)
        x = np.zeros(n)
        for ratio in (1.0, 1.25, 1.5, 2.0):
            for h in (1, 2, 3):
                x += np.cos(2 * np.pi * root * ratio * h * t + rng.uniform(0, 2 * np.pi)) / h
        x *= _envelope(rng, n, sr, rng.uniform(0.5, 2.0))
        x = _normalize_rms(x, 1.0) + 0.1 * _normalize_rms(_lowpass_noise(rng, n, sr, 4000.0), 1.0)
    else:
        x = _lowpass_noise(rng, n, sr, rng.uniform(2500.0, 4000.0))
        x *= _envelope(rng, n, sr, rng.uniform(0.2, 1.0))
    return x


def quantize_4bit(x):
    """Peak-relative 16-level amplitude quantization."""
    peak = max(np.max(np.abs(x)), EPS)
    step = 2.0 * peak / 16.0
    return np.clip(np.round(x / step), -8, 7) * step


def add_artifact(x, sr, tone_hz, rng, tone_level=0.25):
    """Inharmonic tone at *tone_hz* plus 4-bit quantization."""
    rms = np.sqrt(np.mean(x * x))
    t = np.arange(x.size) / sr
    tone = tone_level * rms * np.sqrt(2.0) * np.cos(2 * np.pi * tone_hz * t + rng.uniform(0, 2 * np.pi))
    return quantize_4bit(x + tone)


def synthesize_source(role, authenticity, category, n, sr, rng, level=0.1):
    if role == "foreground":
        x = _speech_like(rng, n, sr)
    else:
        x = _background_like(rng, n, sr, category)
    x = _normalize_rms(x, 1.0)
    if authenticity == "fake":
        x = add_artifact(x, sr, FG_ARTIFACT_HZ if role == "foreground" else BG_ARTIFACT_HZ, rng)
    x = _normalize_rms(x, level)
    return np.clip(x, -1.0, 1.0)


def generate_toy_corpus(config: ToyCorpusConfig, seed: int, out_dir) -> tuple:
    """Write deterministic synthetic source WAVs and pool CSVs.

    Returns ``(fg_pool, bg_pool)`` as lists of :class:`SourceEntry`.
    """
    out_dir = Path(out_dir)
    root = np.random.SeedSequence(seed)
    plan = [
        ("foreground", "real", config.fg_real),
        ("foreground", "fake", config.fg_fake),
        ("background", "real", config.bg_real),
        ("background", "fake", config.bg_fake),
    ]
    pools = {"foreground": [], "background": []}
    children = root.spawn(len(plan))
    for (role, auth, count), child in zip(plan, children):
        if count < 0:
            raise ValueError(f"negative count for {role}/{auth}")
        for i, ss in enumerate(child.spawn(count)):
            rng = np.random.default_rng(ss)
            lo, hi = config.fg_duration if role == "foreground" else config.bg_duration
            n = int(round(rng.uniform(lo, hi) * config.sample_rate))
            if role == "foreground":
                category = "speech"
            else:
                category = ("music", "environment")[i % 2]
            level = 0.1 if role == "foreground" else rng.uniform(0.05, 0.2)
            x = synthesize_source(role, auth, category, n, config.sample_rate, rng, level)
            sid = f"{config.prefix}{'fg' if role == 'foreground' else 'bg'}_{auth}_{i:04d}"
            rel = Path("fg" if role == "foreground" else "bg") / f"{sid}.wav"
            write_wav(Waveform(x, config.sample_rate), out_dir / rel)
            pools[role].append(SourceEntry(sid, str(out_dir / rel), role, auth, category))
    for role, name in (("foreground", "fg_pool.csv"), ("background", "bg_pool.csv")):
        entries = [SourceEntry(e.id, Path(e.path).relative_to(out_dir).as_posix(), e.role, e.authenticity, e.category)
                   for e in pools[role]]
        write_pool_csv(entries, out_dir / name)
    return pools["foreground"], pools["background"]


# pairing ----------------------------------------------------------------------
def plan_pairs(fg_pool, bg_pool, mix_ratio: int = 4, snr_set=SNR_SET, seed: int = 0,
               split: str = "train", include_singles: bool = True) -> MixManifest:
    """Pair every foreground with ``mix_ratio`` distinct backgrounds and sample an SNR per pair.

    When the background pool has at least ``mix_ratio / 2`` entries of each
    authenticity (and ``mix_ratio`` is even) each foreground gets an equal
    number of real and fake backgrounds, so the four authenticity
    combinations stay balanced.
    """
    fg_pool, bg_pool = list(fg_pool), list(bg_pool)
    if not fg_pool or not bg_pool:
        raise ValueError("plan_pairs needs non-empty foreground and background pools")
    if mix_ratio < 1:
        raise ValueError(f"mix_ratio must be >= 1, got {mix_ratio}")
    if len(bg_pool) < mix_ratio:
        raise ValueError(f"background pool has {len(bg_pool)} entries, mix_ratio {mix_ratio} needs more")
    snr_set = tuple(int(s) for s in snr_set)
    if not snr_set:
        raise ValueError("empty snr_set")
    for e in fg_pool:
        if e.role != "foreground":
            raise ValueError(f"{e.id} is not a foreground")
    for e in bg_pool:
        if e.role != "background":
            raise ValueError(f"{e.id} is not a background")

    rng = np.random.default_rng(seed)
    by_auth = {a: [i for i, e in enumerate(bg_pool) if e.authenticity == a] for a in AUTHENTICITY}
    half = mix_ratio // 2
    balanced = mix_ratio % 2 == 0 and all(len(v) >= half for v in by_auth.values())

    mixtures = []
    for fg in fg_pool:
        if balanced:
            picks = np.concatenate([rng.choice(by_auth[a], size=half, replace=False) for a in AUTHENTICITY])
            picks = rng.permutation(picks)
        else:
            picks = rng.choice(len(bg_pool), size=mix_ratio, replace=False)
        for k, bi in enumerate(picks):
            bg = bg_pool[int(bi)]
            mixtures.append(MixSpec(
                fg_id=fg.id, bg_id=bg.id, target_snr_db=int(snr_set[rng.integers(len(snr_set))]),
                fg_label=fg.authenticity, bg_label=bg.authenticity, pair_index=k,
            ))
    sources = {e.id: e for e in fg_pool + bg_pool}
    if len(sources) != len(fg_pool) + len(bg_pool):
        raise ValueError("source ids must be unique across pools")
    singles = fg_pool + bg_pool if include_singles else []
    return MixManifest(mixtures=mixtures, singles=singles, split=split, seed=seed,
                       mix_ratio=mix_ratio, sources=sources)


def audit_pairing(manifest: MixManifest) -> list:
    """Return a list of violated manifest invariants (empty when clean)."""
    problems = []
    per_fg = {}
    for m in manifest.mixtures:
        per_fg.setdefault(m.fg_id, []).append(m.bg_id)
        src_fg, src_bg = manifest.sources.get(m.fg_id), manifest.sources.get(m.bg_id)
        if src_fg is None or src_bg is None:
            problems.append(f"unknown source in {m}")
            continue
        if m.fg_label != src_fg.authenticity or m.bg_label != src_bg.authenticity:
            problems.append(f"label mismatch in {m}")
        if m.target_snr_db not in SNR_SET:
            problems.append(f"SNR {m.target_snr_db} outside {SNR_SET}")
    for fg_id, bgs in per_fg.items():
        if len(bgs) != manifest.mix_ratio:
            problems.append(f"{fg_id} appears {len(bgs)} times, expected {manifest.mix_ratio}")
        if len(set(bgs)) != len(bgs):
            problems.append(f"{fg_id} reuses a background")
    return problems


# gain and mixing ----------------------------------------------------------------
def rms(x) -> float:
    x = np.asarray(getattr(x, "samples", x), dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def snr_gain(fg_rms: float, bg_rms: float, snr_db: float) -> float:
    """Background gain putting the mixture at *snr_db* (full-utterance RMS)."""
    if fg_rms <= EPS or bg_rms <= EPS:
        raise DegenerateSourceError("degenerate source: RMS at or below 1e-8")
    return (fg_rms / bg_rms) * 10.0 ** (-snr_db / 20.0)


def align_background(bg: Waveform, fg_len: int) -> Waveform:
    """Loop *bg* end to end and truncate to exactly *fg_len* samples."""
    if fg_len < 1:
        raise ValueError(f"fg_len must be >= 1, got {fg_len}")
    return Waveform(tile_to_length(bg.samples, fg_len), bg.sample_rate)


def measure_snr(fg, scaled_bg) -> float:
    a = np.asarray(getattr(fg, "samples", fg), dtype=np.float64)
    b = np.asarray(getattr(scaled_bg, "samples", scaled_bg), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"measure_snr needs equal lengths, got {a.shape} and {b.shape}")
    ra, rb = rms(a), rms(b)
    if ra <= EPS or rb <= EPS:
        raise DegenerateSourceError("measure_snr on a silent signal")
    return 20.0 * np.log10(ra / rb)


def mix(fg: Waveform, bg: Waveform, spec: MixSpec) -> Mixture:
    """Add the SNR-scaled, length-aligned background to the foreground.

    If the sum would clip, the whole mixture is divided by its peak and the
    factor is reported as ``peak_rescale`` (1.0 otherwise).
    """
    if fg.sample_rate != bg.sample_rate:
        raise ValueError(f"sample rates differ: {fg.sample_rate} vs {bg.sample_rate}")
    aligned = align_background(bg, len(fg)).samples
    gain = snr_gain(rms(fg), rms(aligned), spec.target_snr_db)
    scaled = gain * aligned
    out = fg.samples + scaled
    peak = float(np.max(np.abs(out)))
    factor = 1.0
    if peak > 1.0:
        factor = 1.0 / peak
        out = out * factor
    return Mixture(Waveform(out, fg.sample_rate), gain, factor, fg.samples.copy(), scaled)


# dataset --------------------------------------------------------------------
def _load_source(entry: SourceEntry, rate: int) -> Waveform:
    if not Path(entry.path).is_file():
        raise FileNotFoundError(f"source file missing: {entry.path}")
    w = read_wav(entry.path)
    return w if w.sample_rate == rate else resample(w, rate)


def build_dataset(manifest: MixManifest, out_dir, sample_rate: int = SAMPLE_RATE, workers: int = 1) -> Path:
    """Render mixtures, copy single-source files and write ``<split>.jsonl``.

    Rows are written in manifest order: mixtures first, then single-source
    entries. Paths inside the JSONL are relative to *out_dir*. Returns the
    JSONL path.
    """
    out_dir = Path(out_dir)
    split = manifest.split
    (out_dir / split / "mixed").mkdir(parents=True, exist_ok=True)
    (out_dir / split / "single").mkdir(parents=True, exist_ok=True)
    for m in manifest.mixtures:
        for sid in (m.fg_id, m.bg_id):
            if sid not in manifest.sources:
                raise ManifestError(f"manifest references unknown source {sid}")
            if not Path(manifest.sources[sid].path).is_file():
                raise FileNotFoundError(f"source file missing: {manifest.sources[sid].path}")

    cache = {}

    def source(sid):
        if sid not in cache:
            cache[sid] = _load_source(manifest.sources[sid], sample_rate)
        return cache[sid]

    def render(idx_spec):
        idx, spec = idx_spec
        res = mix(source(spec.fg_id), source(spec.bg_id), spec)
        rel = Path(split) / "mixed" / f"{split}_mix_{idx:05d}.wav"
        write_wav(res.waveform, out_dir / rel)
        return {
            "utt_id": f"{split}_mix_{idx:05d}",
            "path": rel.as_posix(),
            "kind": "mixed",
            "fg_label": spec.fg_label,
            "bg_label": spec.bg_label,
            "snr_db": spec.target_snr_db,
            "peak_rescale": round(res.peak_rescale, 12),
            "split": split,
        }

    # warm the cache serially so worker threads only read
    for spec in manifest.mixtures:
        source(spec.fg_id)
        source(spec.bg_id)
    items = list(enumerate(manifest.mixtures))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            rows = list(pool.map(render, items))
    else:
        rows = [render(it) for it in items]

    for e in manifest.singles:
        if not Path(e.path).is_file():
            raise FileNotFoundError(f"source file missing: {e.path}")
        rel = Path(split) / "single" / f"{e.id}.wav"
        shutil.copyfile(e.path, out_dir / rel)
        rows.append({
            "utt_id": f"{split}_single_{e.id}",
            "path": rel.as_posix(),
            "kind": "single",
            "fg_label": e.authenticity if e.role == "foreground" else None,
            "bg_label": e.authenticity if e.role == "background" else None,
            "snr_db": None,
            "peak_rescale": None,
            "split": split,
        })

    path = out_dir / f"{split}.jsonl"
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({k: row[k] for k in MANIFEST_FIELDS}) + "\n")
    log.info("wrote %d mixed + %d single rows to %s", len(manifest.mixtures), len(manifest.singles), path)
    return path


def read_manifest(path) -> list:
    """Load a JSONL manifest; adds ``abs_path`` resolved against the file's directory."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            row = json.loads(line)
            missing = [k for k in MANIFEST_FIELDS if k not in row]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing fields {missing}")
            row["abs_path"] = str(path.parent / row["path"])
            rows.append(row)
    return rows
