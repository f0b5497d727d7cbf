"""Feature extraction: frozen-embedder features and the handcrafted
per-channel descriptor block, with training-mean imputation.

The handcrafted block computes, per channel: mean, variance, skewness,
kurtosis, standard deviation, log band powers over the edges
(0.5, 4.5, 8.5, 11.5, 15.5, 30) Hz from a Hamming-tapered periodogram, all
ordered pairwise log-power ratios, peak-to-peak amplitude, a rescaled-range
Hurst exponent, approximate entropy (m=2, r=0.2*std) and Hjorth complexity
(34 values per channel); channels are concatenated. Non-finite entries are
recorded as missing (NaN) and imputed feature-wise with training-set means.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import signal as sps
from scipy import stats

from .autodiff import Tensor
from .errors import ConfigError, InvalidArgumentError

BAND_EDGES = (0.5, 4.5, 8.5, 11.5, 15.5, 30.0)


@dataclass
class FeatureMatrix:
    data: np.ndarray                 # float32 [N, F]
    provenance: list                 # (recording_id, window_index) per row
    feature_names: list
    labels: Optional[list] = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if len(self.provenance) != self.data.shape[0]:
            raise InvalidArgumentError("provenance must cover every row")
        if self.labels is not None and len(self.labels) != self.data.shape[0]:
            raise InvalidArgumentError("labels must cover every row")

    @property
    def n_rows(self):
        return self.data.shape[0]

    @property
    def n_features(self):
        return self.data.shape[1]


# ---------------------------------------------------------------------------
# Learned embeddings
# ---------------------------------------------------------------------------

def embed(embedder, window_sets, batch_size=256):
    """Eval-mode forward pass over all retained windows of a split.

    Parameters are untouched; repeated calls are bit-identical.
    """
    items = window_sets.values() if isinstance(window_sets, dict) \
        else list(window_sets)
    items = sorted(items, key=lambda ws: ws.recording_id)
    rows, provenance, labels = [], [], []
    any_labels = False
    for ws in items:
        keep = ws.retained_indices()
        if keep.size == 0:
            continue
        if (ws.data.shape[1], ws.data.shape[2]) != \
                (embedder.cfg.in_channels, embedder.cfg.in_samples):
            raise InvalidArgumentError(
                f"windows of {ws.recording_id} have shape "
                f"{ws.data.shape[1:]}, embedder expects "
                f"{(embedder.cfg.in_channels, embedder.cfg.in_samples)}")
        data = ws.data[keep]
        for lo in range(0, len(data), batch_size):
            out = embedder.forward(Tensor(data[lo:lo + batch_size]),
                                   training=False)
            rows.append(out.data.copy())
        for i in keep:
            provenance.append((ws.recording_id, int(i)))
            if ws.labels is not None:
                labels.append(ws.labels[i])
                any_labels = True
            elif ws.recording_label is not None:
                labels.append(ws.recording_label)
                any_labels = True
            else:
                labels.append(None)
    if not rows:
        raise InvalidArgumentError("no retained windows to embed")
    names = [f"emb_{j}" for j in range(embedder.cfg.out_dim)]
    return FeatureMatrix(np.concatenate(rows), provenance, names,
                         labels if any_labels else None)


# ---------------------------------------------------------------------------
# Handcrafted descriptors
# ---------------------------------------------------------------------------

def band_powers(x, rate_hz, edges=BAND_EDGES):
    """Integrated periodogram power in each band [edges[i], edges[i+1])."""
    freqs, pxx = sps.periodogram(x, fs=rate_hz, window="hamming")
    df = freqs[1] - freqs[0] if len(freqs) > 1 else 1.0
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (freqs >= lo) & (freqs < hi)
        out.append(float(pxx[sel].sum() * df))
    return np.asarray(out)


def hurst_rs(x, min_scale=8):
    """Rescaled-range Hurst exponent: slope of log(R/S) over log(scale)."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    scales, rs_values = [], []
    scale = min_scale
    while scale <= n // 2:
        n_seg = n // scale
        seg = x[:n_seg * scale].reshape(n_seg, scale)
        z = np.cumsum(seg - seg.mean(axis=1, keepdims=True), axis=1)
        r = z.max(axis=1) - z.min(axis=1)
        s = seg.std(axis=1)
        ok = s > 0
        if np.any(ok):
            scales.append(scale)
            rs_values.append(np.mean(r[ok] / s[ok]))
        scale *= 2
    if len(scales) < 2:
        return np.nan
    slope, _ = np.polyfit(np.log(scales), np.log(rs_values), 1)
    return float(slope)


def approx_entropy(x, m=2, r=None):
    """Approximate entropy with Chebyshev distance."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if r is None:
        r = 0.2 * x.std()
    if r <= 0:
        return np.nan

    def phi(mm):
        rows = n - mm + 1
        d = np.abs(x[:rows, None] - x[None, :rows])
        for off in range(1, mm):
            np.maximum(d, np.abs(x[off:off + rows, None]
                                 - x[None, off:off + rows]), out=d)
        counts = np.mean(d <= r, axis=1)
        return np.mean(np.log(counts))

    return float(phi(m) - phi(m + 1))


def hjorth_complexity(x):
    x = np.asarray(x, dtype=np.float64)
    dx = np.diff(x)
    ddx = np.diff(dx)
    vx, vdx, vddx = x.var(), dx.var(), ddx.var()
    if vx <= 0 or vdx <= 0:
        return np.nan
    mobility = np.sqrt(vdx / vx)
    mobility_d = np.sqrt(vddx / vdx)
    return float(mobility_d / mobility)


def channel_feature_names():
    names = ["mean", "variance", "skewness", "kurtosis", "std"]
    nb = len(BAND_EDGES) - 1
    names += [f"logpow_{i}" for i in range(nb)]
    names += [f"bandratio_{i}_{j}" for i in range(nb) for j in range(nb)
              if i != j]
    names += ["ptp", "hurst", "apen", "hjorth_complexity"]
    return names


def handcrafted(window, rate_hz):
    """Per-channel descriptor block for one window (C, T).

    Returns (values, names); non-finite entries are NaN (missing).
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 2:
        raise InvalidArgumentError(f"window must be (C, T), got {window.shape}")
    c, t = window.shape
    if t < 64:
        raise InvalidArgumentError(f"window too short ({t} < 64 samples)")
    per_channel = channel_feature_names()
    values, names = [], []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for ch in range(c):
            x = window[ch]
            feats = [x.mean(), x.var(), stats.skew(x), stats.kurtosis(x),
                     x.std()]
            powers = band_powers(x, rate_hz)
            logp = np.log(np.where(powers > 0, powers, np.nan))
            feats.extend(logp.tolist())
            nb = len(powers)
            feats.extend(logp[i] - logp[j] for i in range(nb)
                         for j in range(nb) if i != j)
            feats.append(np.ptp(x))
            feats.append(hurst_rs(x))
            feats.append(approx_entropy(x))
            feats.append(hjorth_complexity(x))
            values.extend(feats)
            names.extend(f"ch{ch}_{n}" for n in per_channel)
    values = np.asarray(values, dtype=np.float64)
    values[~np.isfinite(values)] = np.nan
    return values.astype(np.float32), names


def handcrafted_matrix(window_sets, rate_hz=None):
    """Handcrafted features over all retained windows of a split."""
    items = window_sets.values() if isinstance(window_sets, dict) \
        else list(window_sets)
    items = sorted(items, key=lambda ws: ws.recording_id)
    rows, provenance, labels = [], [], []
    names = None
    any_labels = False
    for ws in items:
        rate = rate_hz if rate_hz is not None else ws.rate_hz
        for i in ws.retained_indices():
            vals, names = handcrafted(ws.data[i], rate)
            rows.append(vals)
            provenance.append((ws.recording_id, int(i)))
            if ws.labels is not None:
                labels.append(ws.labels[i])
                any_labels = True
            elif ws.recording_label is not None:
                labels.append(ws.recording_label)
                any_labels = True
            else:
                labels.append(None)
    if not rows:
        raise InvalidArgumentError("no retained windows")
    return FeatureMatrix(np.stack(rows), provenance, names,
                         labels if any_labels else None)


# ---------------------------------------------------------------------------
# Imputation
# ---------------------------------------------------------------------------

def feature_means(fm):
    """Column means over non-missing training entries.

    A column that is missing in every training row has no defined mean.
    """
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        means = np.nanmean(fm.data.astype(np.float64), axis=0)
    bad = np.flatnonzero(~np.isfinite(means))
    if bad.size:
        raise ConfigError(
            f"features {[fm.feature_names[j] for j in bad]} are missing in "
            "all training rows; no imputation mean defined")
    return means.astype(np.float32)


def impute(fm, train_means):
    """Replace missing entries of column j with train_means[j]."""
    train_means = np.asarray(train_means, dtype=np.float32)
    if train_means.shape != (fm.n_features,):
        raise InvalidArgumentError(
            f"means shape {train_means.shape} != ({fm.n_features},)")
    data = fm.data.copy()
    missing = ~np.isfinite(data)
    data[missing] = np.broadcast_to(train_means, data.shape)[missing]
    return FeatureMatrix(data, list(fm.provenance), list(fm.feature_names),
                         None if fm.labels is None else list(fm.labels))
