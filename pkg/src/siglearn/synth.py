"""Synthetic multivariate signals with latent Markov states and known labels.

Each recording carries a hidden state sequence that switches only at window
boundaries, so the ground-truth per-window labels align exactly with the
downstream windowing. Window content is 1/f background noise per source plus
a state-specific narrowband component, mixed linearly into channels with
additive sensor noise.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError
from .signal import Recording
from .store import derive_seed


@dataclass
class StateProfile:
    peak_hz: float            # narrowband component frequency
    peak_power: float         # its variance (uV^2) in the source signal
    background_exponent: float = 1.0   # 1/f^beta exponent of the background

    def to_config(self):
        return {"peak_hz": self.peak_hz, "peak_power": self.peak_power,
                "background_exponent": self.background_exponent}


@dataclass
class SynthConfig:
    n_recordings: int
    duration_s: float
    rate_hz: float
    n_channels: int
    n_states: int
    transition: list              # K x K row-stochastic matrix
    states: list                  # K StateProfile entries
    window_s: float
    background_power: float = 30.0   # variance of each source's 1/f noise
    sensor_noise_uv: float = 1.0
    mixing: Optional[list] = None    # C x K; None -> seeded random mixing
    recording_label_rule: Optional[dict] = None
    seed: int = 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        t = np.asarray(self.transition, dtype=np.float64)
        if t.shape != (self.n_states, self.n_states):
            raise InvalidArgumentError(
                f"transition matrix shape {t.shape} != K x K")
        if np.any(t < 0) or not np.allclose(t.sum(axis=1), 1.0, atol=1e-8):
            raise InvalidArgumentError("transition rows must sum to 1")
        if self.n_states < 2:
            raise InvalidArgumentError("need K >= 2 states")
        if len(self.states) != self.n_states:
            raise InvalidArgumentError(
                f"{len(self.states)} state profiles for K={self.n_states}")
        for s in self.states:
            if s.peak_hz >= self.rate_hz / 2:
                raise InvalidArgumentError(
                    f"state peak {s.peak_hz} Hz at or above Nyquist")

    def to_config(self):
        return {
            "n_recordings": self.n_recordings, "duration_s": self.duration_s,
            "rate_hz": self.rate_hz, "n_channels": self.n_channels,
            "n_states": self.n_states,
            "transition": np.asarray(self.transition).tolist(),
            "states": [s.to_config() for s in self.states],
            "window_s": self.window_s,
            "background_power": self.background_power,
            "sensor_noise_uv": self.sensor_noise_uv,
            "mixing": None if self.mixing is None
            else np.asarray(self.mixing).tolist(),
            "recording_label_rule": self.recording_label_rule,
            "seed": self.seed, "metadata": self.metadata,
        }

    @classmethod
    def from_config(cls, cfg):
        cfg = dict(cfg)
        cfg["states"] = [StateProfile(**s) for s in cfg["states"]]
        return cls(**cfg)


def one_over_f_noise(n, exponent, rng):
    """Unit-variance noise with a 1/f^exponent power spectrum."""
    freqs = np.fft.rfftfreq(n)
    amp = np.zeros_like(freqs)
    amp[1:] = freqs[1:] ** (-exponent / 2.0)
    phases = rng.standard_normal(len(freqs)) + 1j * rng.standard_normal(len(freqs))
    x = np.fft.irfft(amp * phases, n=n)
    sd = x.std()
    return x / sd if sd > 0 else x


def default_mixing(n_channels, n_states, seed):
    """Random but reproducible channel mixing with sign diversity."""
    rng = np.random.default_rng(derive_seed(seed, "mixing"))
    mix = rng.uniform(0.4, 1.0, size=(n_channels, n_states))
    mix *= rng.choice([-1.0, 1.0], size=mix.shape)
    return mix


def _state_sequence(cfg, n_windows, rng):
    t = np.asarray(cfg.transition, dtype=np.float64)
    cum = np.cumsum(t, axis=1)
    states = np.empty(n_windows, dtype=np.int64)
    s = int(rng.integers(cfg.n_states))
    for w in range(n_windows):
        states[w] = s
        s = int(np.searchsorted(cum[s], rng.random(), side="right"))
        s = min(s, cfg.n_states - 1)
    return states


def _window_signal(cfg, state, t_samples, mixing, rng):
    k = cfg.n_states
    sources = np.empty((k, t_samples))
    for j in range(k):
        beta = cfg.states[j].background_exponent
        sources[j] = one_over_f_noise(t_samples, beta, rng) * \
            np.sqrt(cfg.background_power)
    prof = cfg.states[state]
    phase = rng.uniform(0, 2 * np.pi)
    freq = prof.peak_hz + rng.uniform(-0.2, 0.2)
    tt = np.arange(t_samples) / cfg.rate_hz
    sources[state] += np.sqrt(2.0 * prof.peak_power) * \
        np.sin(2 * np.pi * freq * tt + phase)
    x = mixing @ sources
    x += cfg.sensor_noise_uv * rng.standard_normal(x.shape)
    return x


def _recording_label(cfg, states):
    rule = cfg.recording_label_rule
    if rule is None:
        return None
    occupancy = float(np.mean(states == rule["state"]))
    labels = rule.get("labels", ["negative", "positive"])
    return labels[1] if occupancy >= rule["threshold"] else labels[0]


def generate(cfg):
    """Generate the configured recordings with ground-truth window labels."""
    t_samples = int(round(cfg.window_s * cfg.rate_hz))
    n_windows = int(cfg.duration_s * cfg.rate_hz) // t_samples
    if n_windows < 1:
        raise InvalidArgumentError("duration shorter than one window")
    mixing = (np.asarray(cfg.mixing, dtype=np.float64)
              if cfg.mixing is not None
              else default_mixing(cfg.n_channels, cfg.n_states, cfg.seed))
    if mixing.shape != (cfg.n_channels, cfg.n_states):
        raise InvalidArgumentError(
            f"mixing shape {mixing.shape} != (C, K)")
    recordings = []
    for i in range(cfg.n_recordings):
        rec_id = f"synth-{i:04d}"
        rng = np.random.default_rng(derive_seed(cfg.seed, rec_id))
        states = _state_sequence(cfg, n_windows, rng)
        data = np.empty((cfg.n_channels, n_windows * t_samples),
                        dtype=np.float32)
        for w in range(n_windows):
            sl = slice(w * t_samples, (w + 1) * t_samples)
            data[:, sl] = _window_signal(cfg, states[w], t_samples, mixing,
                                         rng).astype(np.float32)
        recordings.append(Recording(
            id=rec_id, subject_id=f"subj-{i:04d}", data=data,
            rate_hz=cfg.rate_hz,
            channel_names=[f"ch{c}" for c in range(cfg.n_channels)],
            recording_label=_recording_label(cfg, states),
            window_labels=[int(s) for s in states],
            metadata={"generator": "markov-synth"}))
    return recordings


def stationary_distribution(transition):
    """Stationary distribution of a row-stochastic matrix (power iteration)."""
    t = np.asarray(transition, dtype=np.float64)
    pi = np.full(t.shape[0], 1.0 / t.shape[0])
    for _ in range(10000):
        nxt = pi @ t
        if np.abs(nxt - pi).max() < 1e-14:
            return nxt
        pi = nxt
    return pi


def synth_sleep_config(n_recordings=60, duration_s=1800.0, seed=2024,
                       **overrides):
    """Default desk-scale benchmark: 5 latent states, 2 channels, 100 Hz.

    Structured like an overnight staging problem: states dwell for several
    windows and differ in narrowband peak frequency, on top of a dominant
    shared 1/f background.
    """
    k = 5
    stay = 0.85
    transition = np.full((k, k), (1 - stay) / (k - 1))
    np.fill_diagonal(transition, stay)
    peaks = [2.5, 6.0, 10.0, 14.0, 18.0]
    states = [StateProfile(peak_hz=p, peak_power=12.0,
                           background_exponent=1.0) for p in peaks]
    cfg = dict(
        n_recordings=n_recordings, duration_s=duration_s, rate_hz=100.0,
        n_channels=2, n_states=k, transition=transition.tolist(),
        states=states, window_s=30.0, background_power=30.0,
        sensor_noise_uv=1.0, seed=seed,
        metadata={"benchmark": "synth-sleep"})
    cfg.update(overrides)
    return SynthConfig(**cfg)
