"""WAV/manifest ingestion and the synthetic cry generator."""
from __future__ import annotations

import csv
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import (EPS, HOP_S, SAMPLE_RATE, WINDOW_S, Waveform, log_mel, mel_power, mix_noise,
                  resample)
from .model import EncoderConfig

log = logging.getLogger(__name__)

CRY_TYPES = ("belly_pain", "burping", "discomfort", "hunger", "tired")
MANIFEST_HEADER = ["sample_id", "path", "cry_type", "domain_id", "intensity"]


# --- WAV ----------------------------------------------------------------------

def read_wav(path: str | Path) -> Waveform:
    """Read a mono 16-bit PCM RIFF file, scaled by 1/32768."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ValueError(f"{path}: not a RIFF/WAVE file")
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate, n = (fh.getnchannels(), fh.getsampwidth(),
                                        fh.getframerate(), fh.getnframes())
            frames = fh.readframes(n)
    except wave.Error as exc:
        raise ValueError(f"{path}: unsupported WAV encoding, PCM required ({exc})") from exc
    except EOFError as exc:
        raise ValueError(f"{path}: truncated file") from exc
    if channels != 1:
        raise ValueError(f"{path}: mono required, file has {channels} channels")
    if width != 2:
        raise ValueError(f"{path}: 16-bit PCM required, file has {8 * width}-bit samples")
    if len(frames) != n * channels * width:
        raise ValueError(f"{path}: truncated file ({len(frames)} of {n * width} data bytes)")
    samples = np.frombuffer(frames, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(samples, rate)


def write_wav(path: str | Path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate_hz)
        fh.writeframes(pcm.tobytes())


# --- manifest -----------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    sample_id: str
    path: Path
    cry_type: str
    domain_id: int
    intensity: float | None = None

    @property
    def label(self) -> int:
        return CRY_TYPES.index(self.cry_type)


def load_manifest(path: str | Path, n_domains: int | None = None) -> list[ManifestEntry]:
    """Parse ``sample_id,path,cry_type,domain_id,intensity`` records.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MANIFEST_HEADER:
            raise ValueError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) not in (4, 5):
                raise ValueError(f"{path}:{lineno}: expected 4 or 5 fields, got {len(row)}")
            sid, rel, cry, dom = (c.strip() for c in row[:4])
            inten = row[4].strip() if len(row) == 5 else ""
            if cry not in CRY_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown cry_type {cry!r}")
            try:
                domain_id = int(dom)
                intensity = float(inten) if inten else None
            except ValueError:
                raise ValueError(f"{path}:{lineno}: malformed domain_id/intensity") from None
            if domain_id < 1 or (n_domains is not None and domain_id > n_domains):
                raise ValueError(f"{path}:{lineno}: domain_id {domain_id} out of range")
            if intensity is not None and not 0.0 <= intensity <= 1.0:
                raise ValueError(f"{path}:{lineno}: intensity {intensity} outside [0, 1]")
            if sid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate sample_id {sid!r}")
            seen.add(sid)
            p = Path(rel)
            entries.append(ManifestEntry(sid, p if p.is_absolute() else path.parent / p, cry,
                                         domain_id, intensity))
    return entries


def write_manifest(path: str | Path, entries: list[ManifestEntry]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            rel = e.path.name if e.path.parent == Path(path).parent else str(e.path)
            w.writerow([e.sample_id, rel, e.cry_type, e.domain_id,
                        "" if e.intensity is None else repr(e.intensity)])


# --- synthetic cries ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    cry_type: int
    f0_start_hz: float
    f0_end_hz: float
    n_harmonics: int
    burst_pattern: tuple[tuple[float, float], ...]
    amplitude: float
    domain_kind: int
    seed: int
    noise_alpha: float = 0.3

    def validate(self, clip_s: float) -> None:
        if not 0 <= self.cry_type < len(CRY_TYPES):
            raise ValueError(f"cry_type index {self.cry_type} out of range")
        for f0 in (self.f0_start_hz, self.f0_end_hz):
            if not 200.0 <= f0 <= 800.0:
                raise ValueError(f"f0 {f0} Hz outside the 200-800 Hz cry range")
        if not 0.0 < self.amplitude <= 1.0:
            raise ValueError(f"amplitude {self.amplitude} outside (0, 1]")
        if self.n_harmonics < 1:
            raise ValueError("need at least one harmonic")
        for onset, dur in self.burst_pattern:
            if onset < 0 or dur <= 0 or onset + dur >= clip_s:
                raise ValueError(f"burst ({onset}, {dur}) does not fit a {clip_s} s clip")


@dataclass
class SynthClip:
    waveform: Waveform
    y: int
    d: int
    salience_frames: np.ndarray
    t: float
    noise: Waveform = field(repr=False)


# (f0 start, f0 end, burst count, burst duration s) per class
PROTOTYPES = {
    0: (520.0, 760.0, 2, 0.30),   # belly_pain: rising, long bursts
    1: (330.0, 330.0, 5, 0.06),   # burping: flat, short rapid bursts
    2: (720.0, 420.0, 3, 0.16),   # discomfort: falling
    3: (450.0, 560.0, 4, 0.10),   # hunger: gently rising, rhythmic
    4: (300.0, 220.0, 1, 0.55),   # tired: low falling, one long burst
}


def domain_nuisance_hz(domain: int) -> float:
    """Centre frequency of the narrowband noise that identifies a domain."""
    return 4000.0 + 1500.0 * domain


def domain_noise(domain: int, n: int, rng: np.random.Generator, sample_rate: int = SAMPLE_RATE,
                 bandwidth_hz: float = 200.0) -> np.ndarray:
    """Unit-RMS stationary band noise around the domain's centre frequency."""
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[np.abs(freqs - domain_nuisance_hz(domain)) > bandwidth_hz / 2] = 0.0
    x = np.fft.irfft(spec, n)
    return x / (np.sqrt(np.mean(x ** 2)) + 1e-12)


def prototype_spec(cry_type: int, domain: int, seed: int, clip_s: float = 1.0,
                   amplitude: float | None = None, n_harmonics: int = 4,
                   alpha_range: tuple[float, float] = (0.1, 0.5)) -> SyntheticSpec:
    """Jittered instance of a class prototype."""
    rng = np.random.default_rng([seed, cry_type, domain])
    f0a, f0b, count, dur = PROTOTYPES[cry_type]
    jitter = rng.uniform(0.93, 1.07)
    f0a = float(np.clip(f0a * jitter, 200.0, 800.0))
    f0b = float(np.clip(f0b * jitter, 200.0, 800.0))
    dur = dur * rng.uniform(0.85, 1.15)
    slot = (clip_s - 0.1) / count
    bursts = []
    for i in range(count):
        lo, hi = 0.05 + i * slot, 0.05 + (i + 1) * slot - dur
        onset = lo if hi <= lo else rng.uniform(lo, hi)
        bursts.append((round(float(onset), 4), round(float(min(dur, clip_s - onset - 0.02)), 4)))
    amp = float(rng.uniform(0.3, 1.0)) if amplitude is None else amplitude
    alpha = float(rng.uniform(*alpha_range))
    return SyntheticSpec(cry_type, f0a, f0b, n_harmonics, tuple(bursts), amp, domain, seed, alpha)


def frame_salience(bursts, n_frames: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    win = int(round(WINDOW_S * sample_rate))
    hop = int(round(HOP_S * sample_rate))
    starts = np.arange(n_frames) * hop
    sal = np.zeros(n_frames, dtype=np.int64)
    for onset, dur in bursts:
        a, b = int(round(onset * sample_rate)), int(round((onset + dur) * sample_rate))
        sal |= ((starts < b) & (starts + win > a)).astype(np.int64)
    return sal


def synth_cry(spec: SyntheticSpec, clip_s: float = 1.0, noise_level: float = 0.05,
              sample_rate: int = SAMPLE_RATE) -> SynthClip:
    """Harmonic f0 contour gated by bursts, plus the domain's narrowband noise."""
    spec.validate(clip_s)
    rng = np.random.default_rng(spec.seed)
    n = int(round(clip_s * sample_rate))
    t = np.arange(n) / sample_rate
    f0 = spec.f0_start_hz + (spec.f0_end_hz - spec.f0_start_hz) * t / clip_s
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    hw = 1.0 / np.arange(1, spec.n_harmonics + 1)
    tone = sum(w * np.sin(h * phase) for h, w in enumerate(hw, start=1)) / hw.sum()
    gate = np.zeros(n)
    ramp = int(0.005 * sample_rate)
    for onset, dur in spec.burst_pattern:
        a, b = int(round(onset * sample_rate)), int(round((onset + dur) * sample_rate))
        g = np.ones(b - a)
        r = min(ramp, (b - a) // 2)
        if r:
            g[:r] = np.linspace(0, 1, r)
            g[-r:] = np.linspace(1, 0, r)
        gate[a:b] = g
    cry = Waveform(spec.amplitude * gate * tone, sample_rate)
    noise = Waveform(noise_level * domain_noise(spec.domain_kind, n, rng, sample_rate), sample_rate)
    mixed = mix_noise(cry, noise, spec.noise_alpha)
    n_frames = 1 + (n - int(round(WINDOW_S * sample_rate))) // int(round(HOP_S * sample_rate))
    sal = frame_salience(spec.burst_pattern, n_frames, sample_rate)
    return SynthClip(mixed, spec.cry_type, spec.domain_kind, sal, spec.amplitude, noise)


def tokens_salience(salience_frames, cfg: EncoderConfig, grid: tuple[int, int]) -> np.ndarray:
    """Per-token 0/1 labels: 1 when at least half the token's frames are salient."""
    sal = np.asarray(salience_frames)
    n_time, n_freq = grid
    expected = (sal.shape[0] - cfg.patch_t) // cfg.stride_t + 1
    if sal.shape[0] < cfg.patch_t or expected != n_time:
        raise ValueError(f"grid mismatch: {sal.shape[0]} frames give {expected} windows, not {n_time}")
    per_window = np.array([sal[i * cfg.stride_t:i * cfg.stride_t + cfg.patch_t].mean() >= 0.5
                           for i in range(n_time)], dtype=np.int64)
    return np.repeat(per_window, n_freq)


# --- dataset ------------------------------------------------------------------

@dataclass
class Sample:
    sample_id: str
    X: np.ndarray  # log-Mel [T, F]
    y: int
    d: int
    t: float
    salience_frames: np.ndarray | None = None
    a: np.ndarray | None = None
    noise_profile: np.ndarray | None = field(default=None, repr=False)


def _attach_salience(s: Sample, cfg: EncoderConfig) -> Sample:
    if s.salience_frames is not None:
        grid = cfg.grid(*s.X.shape)
        s.a = tokens_salience(s.salience_frames, cfg, grid)
        if s.a.shape[0] != grid[0] * grid[1]:
            raise AssertionError("salience length does not match token count")
    return s


def make_synthetic_dataset(n: int, cfg: EncoderConfig, seed: int = 0, clip_s: float = 1.0,
                           n_domains: int | None = None,
                           alpha_range: tuple[float, float] = (0.1, 0.5)) -> list[Sample]:
    """Class-balanced, domain-balanced synthetic set (class cycles fastest)."""
    n_domains = cfg.n_domains if n_domains is None else n_domains
    n_classes = min(cfg.n_classes, len(CRY_TYPES))
    samples = []
    for i in range(n):
        y = i % n_classes
        d = (i // n_classes) % n_domains
        spec = prototype_spec(y, d, seed * 100003 + i, clip_s, alpha_range=alpha_range)
        clip = synth_cry(spec, clip_s)
        X = log_mel(clip.waveform).values
        profile = spec.noise_alpha ** 2 * mel_power(clip.noise).mean(axis=0)
        samples.append(_attach_salience(
            Sample(f"syn{seed}-{i:04d}", X, y, d, clip.t, clip.salience_frames, None, profile), cfg))
    return samples


def load_dataset(entries: list[ManifestEntry], cfg: EncoderConfig, clip_s: float = 1.0
                 ) -> list[Sample]:
    """Resample, crop/zero-pad to ``clip_s`` and convert each manifest entry."""
    n = int(round(clip_s * SAMPLE_RATE))
    out = []
    for e in entries:
        w = read_wav(e.path)
        if w.sample_rate_hz != SAMPLE_RATE:
            w = resample(w, SAMPLE_RATE)
        x = np.zeros(n)
        x[:min(n, len(w))] = w.samples[:n]
        t = e.intensity
        if t is None:
            rms = float(np.sqrt(np.mean(x ** 2)))
            t = min(1.0, rms / 0.5)
            log.warning("%s: no intensity label, using normalised RMS %.3f", e.sample_id, t)
        X = log_mel(Waveform(x, SAMPLE_RATE)).values
        out.append(Sample(e.sample_id, X, e.label, e.domain_id - 1, t))
    return out


__all__ = [
    "CRY_TYPES", "EPS", "ManifestEntry", "Sample", "SynthClip", "SyntheticSpec", "domain_noise",
    "frame_salience", "load_dataset", "load_manifest", "make_synthetic_dataset", "prototype_spec",
    "read_wav", "synth_cry", "tokens_salience", "write_manifest", "write_wav",
]
