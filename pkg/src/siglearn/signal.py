"""Domain types for recordings/windows and deterministic preprocessing.

The pipeline order is: channel selection -> crop -> FIR lowpass -> resample ->
amplitude clip -> windowing -> flat-window rejection -> per-window z-scoring.
Every stage is a pure function of its input plus config, so recordings can be
processed in parallel with schedule-independent results.
"""

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np
from scipy import signal as sps

from .errors import EmptyRecordingError, InvalidArgumentError

ZSCORE_EPS = 1e-8  # sigma guard: constant channels map to zero


@dataclass
class Recording:
    """A multivariate signal (C channels x M samples, microvolts)."""

    id: str
    subject_id: str
    data: np.ndarray            # float32 [C, M]
    rate_hz: float
    channel_names: list
    recording_label: Optional[str] = None
    window_labels: Optional[list] = None  # per non-overlapping window
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise InvalidArgumentError(
                f"recording data must be 2-D [C, M], got {self.data.shape}")
        c, m = self.data.shape
        if c < 1 or m < 1:
            raise InvalidArgumentError(f"empty recording shape {self.data.shape}")
        if self.rate_hz <= 0:
            raise InvalidArgumentError(f"rate_hz must be > 0, got {self.rate_hz}")
        if len(self.channel_names) != c:
            raise InvalidArgumentError(
                f"{len(self.channel_names)} channel names for {c} channels")

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    @property
    def duration_s(self):
        return self.data.shape[1] / self.rate_hz

    def select_channels(self, names):
        """Keep the listed channels, in the listed order."""
        missing = [n for n in names if n not in self.channel_names]
        if missing:
            raise InvalidArgumentError(
                f"recording {self.id} lacks channels {missing}")
        idx = [self.channel_names.index(n) for n in names]
        return replace(self, data=self.data[idx], channel_names=list(names))


@dataclass
class WindowSet:
    """Non-overlapping fixed-length windows cut from one recording."""

    recording_id: str
    window_s: float
    T: int                       # samples per window
    starts: np.ndarray           # int64 [N], starts[i] = i*T
    data: np.ndarray             # float32 [N, C, T]
    rate_hz: float
    labels: Optional[list] = None
    rejected_mask: np.ndarray = None  # bool [N]
    recording_label: Optional[str] = None

    def __post_init__(self):
        if self.rejected_mask is None:
            self.rejected_mask = np.zeros(len(self.starts), dtype=bool)

    @property
    def n_windows(self):
        return self.data.shape[0]

    @property
    def n_channels(self):
        return self.data.shape[1]

    def retained_indices(self):
        return np.flatnonzero(~self.rejected_mask)

    @property
    def n_retained(self):
        return int(np.sum(~self.rejected_mask))


# ---------------------------------------------------------------------------
# Transforms
# ---------------------------------------------------------------------------

def default_num_taps(rate_hz, cutoff_hz):
    """Transition-width heuristic: 8 * (rate / cutoff), rounded up to odd."""
    n = int(math.ceil(8.0 * rate_hz / cutoff_hz))
    return n if n % 2 == 1 else n + 1


def design_lowpass(cutoff_hz, rate_hz, num_taps):
    """Windowed-sinc lowpass taps with a Hamming taper and unit DC gain."""
    if not (0 < cutoff_hz < rate_hz / 2):
        raise InvalidArgumentError(
            f"cutoff {cutoff_hz} Hz must lie in (0, Nyquist={rate_hz / 2}) Hz")
    if num_taps % 2 != 1 or num_taps < 3:
        raise InvalidArgumentError(f"num_taps must be odd >= 3, got {num_taps}")
    return sps.firwin(num_taps, cutoff_hz, window="hamming", fs=rate_hz)


def fir_lowpass(rec, cutoff_hz, num_taps=None):
    """Lowpass filter every channel; delay-compensated, reflection-padded."""
    if num_taps is None:
        num_taps = default_num_taps(rec.rate_hz, cutoff_hz)
    taps = design_lowpass(cutoff_hz, rec.rate_hz, num_taps)
    delay = (num_taps - 1) // 2
    if rec.n_samples < 2:
        raise InvalidArgumentError("recording too short to filter")
    pad = min(delay, rec.n_samples - 1)
    out = np.empty_like(rec.data)
    for c in range(rec.n_channels):
        x = np.pad(rec.data[c].astype(np.float64), delay, mode="reflect") \
            if pad == delay else _pad_short(rec.data[c], delay)
        out[c] = np.convolve(x, taps, mode="valid").astype(np.float32)
    return replace(rec, data=out)


def _pad_short(x, delay):
    # reflect in chunks when the requested pad exceeds the signal length
    x = x.astype(np.float64)
    while delay > 0:
        step = min(delay, len(x) - 1)
        x = np.pad(x, step, mode="reflect")
        delay -= step
    return x


def resample(rec, target_hz):
    """Polyphase rational resampling with an anti-alias lowpass.

    The anti-alias filter cuts at 0.45 * target_hz; the output has exactly
    floor(M * p / q) samples for the reduced ratio p/q.
    """
    if target_hz > rec.rate_hz:
        raise InvalidArgumentError(
            f"target rate {target_hz} exceeds recording rate {rec.rate_hz}")
    frac = Fraction(target_hz / rec.rate_hz).limit_denominator(1024)
    p, q = frac.numerator, frac.denominator
    if p < 1 or abs(p / q - target_hz / rec.rate_hz) > 1e-9:
        raise InvalidArgumentError(
            f"ratio {target_hz}/{rec.rate_hz} not expressible as p/q with "
            f"p, q <= 1024")
    if p == q:
        return replace(rec, rate_hz=float(target_hz))
    num_taps = 20 * max(p, q) + 1
    taps = sps.firwin(num_taps, 0.45 * target_hz, window="hamming",
                      fs=rec.rate_hz * p)
    m = rec.n_samples
    n_out = (m * p) // q
    y = sps.resample_poly(rec.data.astype(np.float64), p, q, axis=1,
                          window=taps)
    out = y[:, :n_out].astype(np.float32)
    if out.shape[1] < 1:
        raise EmptyRecordingError("resampling left no samples")
    return replace(rec, data=out, rate_hz=float(target_hz))


def crop(rec, skip_s, max_s):
    """Drop the first skip_s seconds and retain at most the next max_s."""
    if skip_s < 0 or max_s <= 0:
        raise InvalidArgumentError("skip_s must be >= 0 and max_s > 0")
    start = int(round(skip_s * rec.rate_hz))
    if start >= rec.n_samples:
        raise EmptyRecordingError(
            f"recording {rec.id} ({rec.duration_s:.1f}s) shorter than "
            f"skip of {skip_s}s")
    n = min(rec.n_samples - start, int(round(max_s * rec.rate_hz)))
    # window-aligned label bookkeeping is not possible without the window
    # length, so labels are only kept when nothing is cut from the front
    labels = rec.window_labels if start == 0 else None
    return replace(rec, data=rec.data[:, start:start + n].copy(),
                   window_labels=labels)


def clip_amplitude(rec, limit_uv):
    """Clamp every sample to [-limit_uv, +limit_uv]."""
    if limit_uv <= 0:
        raise InvalidArgumentError(f"limit_uv must be > 0, got {limit_uv}")
    return replace(rec, data=np.clip(rec.data, -limit_uv, limit_uv))


def extract_windows(rec, window_s):
    """Cut non-overlapping windows of window_s seconds; drops the remainder."""
    t_float = window_s * rec.rate_hz
    t = int(round(t_float))
    if abs(t_float - t) > 1e-6 or t < 2:
        raise InvalidArgumentError(
            f"window_s * rate_hz must be an integer >= 2, got {t_float}")
    n = rec.n_samples // t
    data = rec.data[:, :n * t].reshape(rec.n_channels, n, t)
    data = np.ascontiguousarray(data.transpose(1, 0, 2))
    labels = None
    if rec.window_labels is not None:
        if len(rec.window_labels) < n:
            raise InvalidArgumentError(
                f"recording {rec.id}: {len(rec.window_labels)} window labels "
                f"for {n} windows")
        labels = list(rec.window_labels[:n])
    return WindowSet(recording_id=rec.id, window_s=float(window_s), T=t,
                     starts=np.arange(n, dtype=np.int64) * t, data=data,
                     rate_hz=rec.rate_hz, labels=labels,
                     recording_label=rec.recording_label)


def reject_flat(ws, ptp_threshold_uv):
    """Mask out windows whose largest channel peak-to-peak is below threshold.

    Rejected windows stay in the index space (neighbor arithmetic remains
    valid) but are excluded from sampling and training.
    """
    if ptp_threshold_uv < 0:
        raise InvalidArgumentError("threshold must be >= 0")
    if ws.n_windows == 0:
        return ws
    ptp = ws.data.max(axis=2) - ws.data.min(axis=2)   # [N, C]
    flat = ptp.max(axis=1) < ptp_threshold_uv
    return replace(ws, rejected_mask=ws.rejected_mask | flat)


def zscore(ws):
    """Normalize each retained window per channel to zero mean, unit std.

    Population std, guarded by max(sigma, 1e-8): constant channels map to 0.
    """
    if ws.n_windows == 0:
        return ws
    data = ws.data.copy()
    keep = ~ws.rejected_mask
    x = data[keep].astype(np.float64)
    mu = x.mean(axis=2, keepdims=True)
    sigma = np.maximum(x.std(axis=2, keepdims=True), ZSCORE_EPS)
    data[keep] = ((x - mu) / sigma).astype(np.float32)
    return replace(ws, data=data)


# ---------------------------------------------------------------------------
# Pipeline configuration and presets
# ---------------------------------------------------------------------------

@dataclass
class PreprocessConfig:
    window_s: float
    target_hz: Optional[float] = None
    lowpass_hz: Optional[float] = None
    lowpass_taps: Optional[int] = None   # None -> default_num_taps heuristic
    crop_skip_s: float = 0.0
    crop_max_s: Optional[float] = None
    clip_uv: Optional[float] = None
    reject_ptp_uv: float = 1.0
    zscore: bool = True
    channels: Optional[list] = None

    def to_config(self):
        return {
            "window_s": self.window_s, "target_hz": self.target_hz,
            "lowpass_hz": self.lowpass_hz, "lowpass_taps": self.lowpass_taps,
            "crop_skip_s": self.crop_skip_s, "crop_max_s": self.crop_max_s,
            "clip_uv": self.clip_uv, "reject_ptp_uv": self.reject_ptp_uv,
            "zscore": self.zscore, "channels": self.channels,
        }

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg)


def preset(name):
    """Named preprocessing recipes; every value can be overridden."""
    if name == "pc18-style":
        return PreprocessConfig(window_s=30.0, target_hz=100.0,
                                lowpass_hz=30.0, reject_ptp_uv=1.0)
    if name == "tuhab-style":
        return PreprocessConfig(window_s=6.0, target_hz=100.0,
                                crop_skip_s=60.0, crop_max_s=1200.0,
                                clip_uv=800.0, reject_ptp_uv=1.0)
    raise InvalidArgumentError(
        f"unknown preset {name!r} (expected 'pc18-style' or 'tuhab-style')")


def preprocess_recording(rec, cfg):
    """Run the full pipeline on one recording, returning its WindowSet."""
    if cfg.channels is not None:
        rec = rec.select_channels(cfg.channels)
    if cfg.crop_skip_s > 0 or cfg.crop_max_s is not None:
        max_s = cfg.crop_max_s if cfg.crop_max_s is not None else rec.duration_s
        rec = crop(rec, cfg.crop_skip_s, max_s)
    if cfg.lowpass_hz is not None:
        rec = fir_lowpass(rec, cfg.lowpass_hz, cfg.lowpass_taps)
    if cfg.target_hz is not None and cfg.target_hz != rec.rate_hz:
        rec = resample(rec, cfg.target_hz)
    if cfg.clip_uv is not None:
        rec = clip_amplitude(rec, cfg.clip_uv)
    ws = extract_windows(rec, cfg.window_s)
    ws = reject_flat(ws, cfg.reject_ptp_uv)
    if cfg.zscore:
        ws = zscore(ws)
    return ws
