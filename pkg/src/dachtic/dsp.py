"""Waveform to log-Mel conversion and spectrogram-level augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from math import gcd
from typing import Literal

import numpy as np
from scipy.signal import resample_poly

SAMPLE_RATE = 16000
N_MELS = 64
N_FFT = 512
WINDOW_S = 0.025
HOP_S = 0.010
EPS = 1e-6

Origin = Literal["clean", "noisy", "augmented", "intervened"]
PERTURBATION_KINDS = ("pitch_shift", "energy_suppress", "noise_subtract", "time_mask", "freq_mask")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate_hz: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate_hz <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(samples)):
            raise ValueError("waveform contains non-finite samples")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # [n_mels, n_bins]
    mel_band_edges_hz: np.ndarray  # n_mels + 2 ascending edge/centre frequencies

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]

    def band_limits_hz(self, band: int) -> tuple[float, float]:
        """Lower and upper Hz edge of one triangular band."""
        e = self.mel_band_edges_hz
        return float(e[band]), float(e[band + 2])


@dataclass(frozen=True)
class Spectrogram:
    values: np.ndarray  # [T_frames, F_mel]
    frame_hop_s: float = HOP_S
    origin: Origin = "clean"
    eps: float = EPS

    @property
    def fill_value(self) -> float:
        return float(np.log(self.eps))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass
class PerturbationSpec:
    """One pseudo-intervention or mask to apply to a spectrogram.

    ``region`` is a boolean [T, F] mask (None = whole grid).  ``noise_profile``
    holds per-band linear Mel power for ``noise_subtract``.
    """

    kind: str
    shift_bins: int = 0
    region: np.ndarray | None = None
    suppress_factor: float = 1.0
    rng_seed: int = 0
    noise_profile: np.ndarray | None = field(default=None, repr=False)

    def validate(self, shape: tuple[int, int]) -> None:
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation kind {self.kind!r}")
        if not 0.0 <= self.suppress_factor <= 1.0:
            raise ValueError(f"suppress_factor must lie in [0, 1], got {self.suppress_factor}")
        if self.region is not None and np.shape(self.region) != tuple(shape):
            raise ValueError(f"region shape {np.shape(self.region)} outside spectrogram {shape}")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float | None = None) -> MelFilterbank:
    """Triangular HTK-scale filters on the rfft bin grid, peak-normalised to 1."""
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lower) / (centre - lower)
    falling = (upper - bins) / (upper - centre)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    # narrow low bands can fall between bin centres; give them their nearest bin
    for m in np.flatnonzero(weights.max(axis=1) <= 0):
        weights[m, np.argmin(np.abs(bins - centre[m, 0]))] = 1.0
    return MelFilterbank(weights, edges)


def resample(w: Waveform, target_hz: int) -> Waveform:
    if len(w) == 0:
        raise ValueError("empty waveform")
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    if target_hz == w.sample_rate_hz:
        return Waveform(w.samples.copy(), target_hz)
    g = gcd(w.sample_rate_hz, target_hz)
    out = resample_poly(w.samples, target_hz // g, w.sample_rate_hz // g, padtype="line")
    return Waveform(out, target_hz)


def frame_power(samples: np.ndarray, win: int, hop: int, n_fft: int) -> np.ndarray:
    """Periodic-Hann STFT power, one row per full frame (no centre padding)."""
    n_frames = 1 + (samples.shape[0] - win) // hop
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:n_frames]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    spec = np.fft.rfft(frames * window, n=n_fft, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel(w: Waveform, fb: MelFilterbank | None = None, window_s: float = WINDOW_S,
            hop_s: float = HOP_S, eps: float = EPS) -> Spectrogram:
    fb = mel_filterbank() if fb is None else fb
    if w.sample_rate_hz != SAMPLE_RATE:
        raise ValueError(f"log_mel expects {SAMPLE_RATE} Hz input, got {w.sample_rate_hz}")
    if eps <= 0 or window_s < hop_s:
        raise ValueError("need eps > 0 and window_s >= hop_s")
    win = int(round(window_s * w.sample_rate_hz))
    hop = int(round(hop_s * w.sample_rate_hz))
    if len(w) < win:
        raise ValueError("signal too short")
    n_fft = 2 * (fb.n_bins - 1)
    if n_fft < win:
        raise ValueError(f"filterbank implies n_fft={n_fft} shorter than the {win}-sample window")
    power = frame_power(w.samples, win, hop, n_fft)
    return Spectrogram(np.log(power @ fb.weights.T + eps), hop_s, "clean", eps)


def mel_power(w: Waveform, fb: MelFilterbank | None = None) -> np.ndarray:
    """Linear Mel power [T, F] with the default framing."""
    fb = mel_filterbank() if fb is None else fb
    win = int(round(WINDOW_S * w.sample_rate_hz))
    hop = int(round(HOP_S * w.sample_rate_hz))
    return frame_power(w.samples, win, hop, 2 * (fb.n_bins - 1)) @ fb.weights.T


def fit_noise(x_n: np.ndarray, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """Crop (at a seeded offset) or tile ``x_n`` to exactly ``n`` samples."""
    if x_n.shape[0] == 0:
        raise ValueError("empty noise waveform")
    if x_n.shape[0] >= n:
        start = 0 if rng is None else int(rng.integers(0, x_n.shape[0] - n + 1))
        return x_n[start:start + n]
    reps = -(-n // x_n.shape[0])
    return np.tile(x_n, reps)[:n]


def mix_noise(x: Waveform, x_n: Waveform, alpha: float,
              rng: np.random.Generator | None = None) -> Waveform:
    if x.sample_rate_hz != x_n.sample_rate_hz:
        raise ValueError("rate mismatch")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    noise = fit_noise(x_n.samples, len(x), rng)
    return Waveform(np.clip(x.samples + alpha * noise, -1.0, 1.0), x.sample_rate_hz)


def spec_augment(X: Spectrogram, n_time_masks: int, max_time_width: int, n_freq_masks: int,
                 max_freq_width: int, rng_seed: int, *, force_full_width: bool = False) -> Spectrogram:
    """SpecAugment-style time and frequency masking filled with the silence floor."""
    T, F = X.shape
    if max_time_width > T or max_freq_width > F:
        raise ValueError(f"mask widths ({max_time_width}, {max_freq_width}) exceed grid {X.shape}")
    rng = np.random.default_rng(rng_seed)
    out = X.values.copy()
    for _ in range(n_time_masks):
        w = max_time_width if force_full_width else int(rng.integers(0, max_time_width + 1))
        t0 = int(rng.integers(0, T - w + 1))
        out[t0:t0 + w, :] = X.fill_value
    for _ in range(n_freq_masks):
        w = max_freq_width if force_full_width else int(rng.integers(0, max_freq_width + 1))
        f0 = int(rng.integers(0, F - w + 1))
        out[:, f0:f0 + w] = X.fill_value
    return replace(X, values=out, origin="augmented")


def pseudo_intervene(X: Spectrogram, spec: PerturbationSpec) -> Spectrogram:
    spec.validate(X.shape)
    fill = X.fill_value
    v = X.values
    region = np.ones(X.shape, dtype=bool) if spec.region is None else np.asarray(spec.region, bool)
    if spec.kind == "pitch_shift":
        s = spec.shift_bins
        F = X.shape[1]
        if abs(s) >= F:
            raise ValueError("shift out of range")
        out = np.full_like(v, fill)
        if s >= 0:
            out[:, s:] = v[:, :F - s]
        else:
            out[:, :F + s] = v[:, -s:]
    elif spec.kind == "energy_suppress":
        out = np.where(region, fill + spec.suppress_factor * (v - fill), v)
    elif spec.kind == "noise_subtract":
        if spec.noise_profile is None:
            raise ValueError("noise_subtract requires a noise profile")
        profile = np.asarray(spec.noise_profile, dtype=np.float64)
        if profile.shape != (X.shape[1],):
            raise ValueError(f"noise profile length {profile.shape} != {X.shape[1]} bands")
        power = np.maximum(np.exp(v) - X.eps, 0.0)
        cleaned = np.log(np.maximum(power - profile, 0.0) + X.eps)
        out = np.where(region, np.maximum(cleaned, fill), v)
    elif spec.kind == "time_mask":
        rows = region.all(axis=1)
        out = v.copy()
        out[rows, :] = fill
    else:  # freq_mask
        cols = region.all(axis=0)
        out = v.copy()
        out[:, cols] = fill
    return replace(X, values=out, origin="intervened")
