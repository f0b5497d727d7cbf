"""Construction of labeled pretext examples from window indices.

Three example kinds are produced from retained (non-rejected) windows:

* pair tasks: two windows labeled +1 when their start offset is within the
  positive context tau_pos, -1 when beyond the negative context tau_neg;
  pairs falling strictly between the two contexts are never emitted.
* order tasks: two anchor windows at most tau_pos apart plus a middle window
  that either lies strictly between them (+1, chronological) or in the
  negative context of both anchors (-1); each triplet is mirrored with
  probability one half.
* predictive-coding tasks: batches of sequences, each a run of consecutive
  context windows followed by consecutive future windows; the other sequences
  of a batch provide the negatives.

Negative sampling is either restricted to the anchor's own recording or
relaxed to the whole dataset. All sampling is seed-deterministic with
per-recording streams (seed XOR hash(recording_id)), so parallel sampling is
schedule independent. Labels are balanced 50/50 by alternating the target
label per draw and sampling the partner uniformly from the windows valid for
that label.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import InvalidArgumentError
from .store import derive_seed


class SamplingMode(str, Enum):
    SAME_RECORDING = "same-recording"
    ACROSS_RECORDINGS = "across-recordings"


@dataclass
class ContextConfig:
    tau_pos_s: float
    tau_neg_s: float
    mode: SamplingMode = SamplingMode.SAME_RECORDING

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = SamplingMode(self.mode)
        if self.tau_pos_s <= 0:
            raise InvalidArgumentError("tau_pos_s must be > 0")
        if self.tau_neg_s == 0 and self.mode is SamplingMode.SAME_RECORDING:
            raise InvalidArgumentError(
                "tau_neg = 0 (whole-dataset negative context) is only valid "
                "with across-recordings sampling")
        if self.tau_neg_s != 0 and self.tau_neg_s < self.tau_pos_s:
            raise InvalidArgumentError("tau_neg must be >= tau_pos (or 0)")

    def to_config(self):
        return {"tau_pos_s": self.tau_pos_s, "tau_neg_s": self.tau_neg_s,
                "mode": self.mode.value}


@dataclass
class RPPair:
    rec_a: str
    rec_b: str
    t: int          # anchor window start sample
    t_prime: int    # partner window start sample
    y: int          # +1 close, -1 far


@dataclass
class TSTriplet:
    rec_anchor: str
    rec_middle: str
    t: int
    t_prime: int
    t_doubleprime: int
    y: int          # +1 ordered (or mirror-ordered), -1 shuffled


@dataclass
class CPCSequence:
    rec_id: str
    context: list   # N_c consecutive window indices
    future: list    # N_p consecutive window indices


@dataclass
class CPCBatch:
    sequences: list  # N_b + 1 CPCSequence entries


@dataclass
class SamplingReport:
    skipped_recordings: list = field(default_factory=list)

    def skip(self, rec_id, reason):
        self.skipped_recordings.append({"recording": rec_id, "reason": reason})

    @property
    def n_skipped(self):
        return len(self.skipped_recordings)


def _tau_samples(tau_s, rate_hz):
    return int(round(tau_s * rate_hz))


def _sorted_items(windows):
    """dict or list of WindowSets -> list sorted by recording id."""
    if isinstance(windows, dict):
        items = list(windows.values())
    else:
        items = list(windows)
    return sorted(items, key=lambda ws: ws.recording_id)


def _retained_starts(ws):
    return ws.starts[~ws.rejected_mask].astype(np.int64)


def _choice(rng, arr):
    return int(arr[rng.integers(len(arr))])


# ---------------------------------------------------------------------------
# Pair task
# ---------------------------------------------------------------------------

def _pair_partners(starts, t, tau_pos, tau_neg, positive):
    d = np.abs(starts - t)
    if positive:
        return starts[(d > 0) & (d <= tau_pos)]
    return starts[d > tau_neg]


def sample_rp(windows, cfg, n_per_recording, seed):
    """Sample balanced positive/negative window pairs.

    Returns (pairs, SamplingReport). Recordings where no anchor admits a
    positive partner are skipped and counted in the report.
    """
    report = SamplingReport()
    items = _sorted_items(windows)
    pool = _global_pool(items)
    pairs = []
    for ws in items:
        rng = np.random.default_rng(derive_seed(seed, ws.recording_id))
        starts = _retained_starts(ws)
        tau_pos = _tau_samples(cfg.tau_pos_s, ws.rate_hz)
        tau_neg = _tau_samples(cfg.tau_neg_s, ws.rate_hz)
        if tau_pos < ws.T:
            raise InvalidArgumentError(
                "tau_pos shorter than the window length")
        if len(starts) < 2:
            report.skip(ws.recording_id, "fewer than 2 retained windows")
            continue
        anchors_pos = [t for t in starts
                       if len(_pair_partners(starts, t, tau_pos, tau_neg,
                                             True)) > 0]
        same_mode = cfg.mode is SamplingMode.SAME_RECORDING
        anchors_neg = [t for t in starts
                       if len(_pair_partners(starts, t, tau_pos, tau_neg,
                                             False)) > 0] if same_mode else list(starts)
        if not anchors_pos:
            report.skip(ws.recording_id, "no anchor admits a positive partner")
            continue
        if not anchors_neg:
            report.skip(ws.recording_id, "no anchor admits a negative partner")
            continue
        anchors_pos = np.asarray(anchors_pos)
        anchors_neg = np.asarray(anchors_neg)
        for i in range(n_per_recording):
            y = 1 if i % 2 == 0 else -1
            if y == 1:
                t = _choice(rng, anchors_pos)
                tp = _choice(rng, _pair_partners(starts, t, tau_pos, tau_neg,
                                                 True))
                pairs.append(RPPair(ws.recording_id, ws.recording_id, t, tp, 1))
            elif same_mode:
                t = _choice(rng, anchors_neg)
                tp = _choice(rng, _pair_partners(starts, t, tau_pos, tau_neg,
                                                 False))
                pairs.append(RPPair(ws.recording_id, ws.recording_id, t, tp, -1))
            else:
                t = _choice(rng, starts)
                rec_b, tp = _draw_across_negative(
                    rng, pool, ws.recording_id, t, tau_neg)
                pairs.append(RPPair(ws.recording_id, rec_b, t, tp, -1))
    return pairs, report


def _global_pool(items):
    """Flat arrays over every retained window of every recording."""
    rec_ids, starts, rates = [], [], []
    for ws in items:
        s = _retained_starts(ws)
        rec_ids.extend([ws.recording_id] * len(s))
        starts.extend(s.tolist())
        rates.extend([ws.rate_hz] * len(s))
    return {"rec": rec_ids, "start": np.asarray(starts, dtype=np.int64),
            "rate": rates}


def _draw_across_negative(rng, pool, anchor_rec, t, tau_neg, max_tries=10000):
    """Uniform draw over the whole dataset; same-recording hits must still
    clear the negative context (tau_neg = 0 means any other window)."""
    n = len(pool["start"])
    if n == 0:
        raise InvalidArgumentError("empty window pool")
    for _ in range(max_tries):
        j = int(rng.integers(n))
        rec_b, tp = pool["rec"][j], int(pool["start"][j])
        if rec_b != anchor_rec:
            return rec_b, tp
        if abs(tp - t) > tau_neg:
            return rec_b, tp
    raise InvalidArgumentError(
        "could not draw an across-recordings negative (dataset too small)")


# ---------------------------------------------------------------------------
# Order task
# ---------------------------------------------------------------------------

def _ts_negative_middles(starts, t, tpp, tau_neg):
    d1 = np.abs(starts - t)
    d2 = np.abs(starts - tpp)
    return starts[(d1 > tau_neg) & (d2 > tau_neg)]


def sample_ts(windows, cfg, n_per_recording, seed):
    """Sample balanced ordered/shuffled window triplets (with mirroring)."""
    report = SamplingReport()
    items = _sorted_items(windows)
    by_rec = {ws.recording_id: ws for ws in items}
    pairs_pool = _global_pool(items)
    triplets = []
    for ws in items:
        rng = np.random.default_rng(derive_seed(seed, ws.recording_id))
        starts = _retained_starts(ws)
        tau_pos = _tau_samples(cfg.tau_pos_s, ws.rate_hz)
        tau_neg = _tau_samples(cfg.tau_neg_s, ws.rate_hz)
        if tau_pos < ws.T:
            raise InvalidArgumentError("tau_pos shorter than the window length")
        same_mode = cfg.mode is SamplingMode.SAME_RECORDING
        # anchor pairs (t < t'') within tau_pos that leave room in the middle
        anchor_pairs = []
        for a in starts:
            for b in starts[(starts > a) & (starts - a <= tau_pos)]:
                if np.any((starts > a) & (starts < b)):
                    anchor_pairs.append((int(a), int(b)))
        if not anchor_pairs:
            report.skip(ws.recording_id,
                        "no anchor pair admits a middle window")
            continue
        pos_pairs = anchor_pairs
        if same_mode:
            neg_pairs = [(a, b) for a, b in anchor_pairs
                         if len(_ts_negative_middles(starts, a, b,
                                                     tau_neg)) > 0]
        else:
            others = [r for r in by_rec if r != ws.recording_id
                      and by_rec[r].n_retained > 0]
            neg_pairs = anchor_pairs if others else []
        if not neg_pairs:
            report.skip(ws.recording_id, "no negative middle available")
            continue
        for i in range(n_per_recording):
            y = 1 if i % 2 == 0 else -1
            if y == 1:
                t, tpp = pos_pairs[int(rng.integers(len(pos_pairs)))]
                mids = starts[(starts > t) & (starts < tpp)]
                tp = _choice(rng, mids)
                rec_mid = ws.recording_id
            else:
                t, tpp = neg_pairs[int(rng.integers(len(neg_pairs)))]
                if same_mode:
                    tp = _choice(rng, _ts_negative_middles(starts, t, tpp,
                                                           tau_neg))
                    rec_mid = ws.recording_id
                else:
                    rec_mid, tp = _draw_other_recording(
                        rng, pairs_pool, ws.recording_id)
            if rng.random() < 0.5:   # mirror augmentation
                t, tpp = tpp, t
            triplets.append(TSTriplet(ws.recording_id, rec_mid, t, tp, tpp, y))
    return triplets, report


def _draw_other_recording(rng, pool, anchor_rec, max_tries=10000):
    n = len(pool["start"])
    for _ in range(max_tries):
        j = int(rng.integers(n))
        if pool["rec"][j] != anchor_rec:
            return pool["rec"][j], int(pool["start"][j])
    raise InvalidArgumentError(
        "could not draw a middle window from another recording")


# ---------------------------------------------------------------------------
# Predictive-coding task
# ---------------------------------------------------------------------------

def _valid_anchors(ws, n_context, n_future):
    """0-based indices t of the last context window such that the whole run
    [t - N_c + 1, t + N_p] is retained."""
    keep = ~ws.rejected_mask
    n = len(keep)
    run = n_context + n_future
    if n < run:
        return np.empty(0, dtype=np.int64)
    ok = np.ones(n - run + 1, dtype=bool)
    for off in range(run):
        ok &= keep[off:off + n - run + 1]
    return np.flatnonzero(ok) + n_context - 1


def sample_cpc(windows, n_context, n_future, n_negatives, mode, batches_ratio,
               seed):
    """Sample predictive-coding batches of N_b + 1 sequences each.

    Each recording contributes round(batches_ratio * n_retained) batches.
    Same-recording mode takes all sequences of a batch from that recording;
    across-recordings mode draws each sequence's recording with probability
    proportional to its retained window count.
    """
    if n_context < 1 or n_future < 1 or n_negatives < 1:
        raise InvalidArgumentError("N_c, N_p, N_b must all be >= 1")
    if isinstance(mode, str):
        mode = SamplingMode(mode)
    report = SamplingReport()
    items = _sorted_items(windows)
    anchors = {ws.recording_id: _valid_anchors(ws, n_context, n_future)
               for ws in items}
    eligible = [ws for ws in items if len(anchors[ws.recording_id]) > 0]
    weights = np.array([ws.n_retained for ws in eligible], dtype=np.float64)
    if weights.sum() > 0:
        weights = weights / weights.sum()
    batches = []
    for ws in items:
        n_batches = int(round(batches_ratio * ws.n_retained))
        if len(anchors[ws.recording_id]) == 0:
            if n_batches > 0:
                report.skip(ws.recording_id,
                            f"fewer than {n_context + n_future} retained "
                            "consecutive windows")
            continue
        rng = np.random.default_rng(derive_seed(seed, ws.recording_id))
        for _ in range(n_batches):
            seqs = []
            for _ in range(n_negatives + 1):
                if mode is SamplingMode.SAME_RECORDING:
                    src = ws
                else:
                    src = eligible[int(rng.choice(len(eligible), p=weights))]
                t = _choice(rng, anchors[src.recording_id])
                seqs.append(CPCSequence(
                    rec_id=src.recording_id,
                    context=list(range(t - n_context + 1, t + 1)),
                    future=list(range(t + 1, t + n_future + 1))))
            batches.append(CPCBatch(sequences=seqs))
    return batches, report


# ---------------------------------------------------------------------------
# JSONL (de)serialization
# ---------------------------------------------------------------------------

def examples_to_records(examples):
    recs = []
    for ex in examples:
        if isinstance(ex, RPPair):
            recs.append({"kind": "rp", "rec_a": ex.rec_a, "rec_b": ex.rec_b,
                         "t": ex.t, "t_prime": ex.t_prime, "y": ex.y})
        elif isinstance(ex, TSTriplet):
            recs.append({"kind": "ts", "rec_anchor": ex.rec_anchor,
                         "rec_middle": ex.rec_middle, "t": ex.t,
                         "t_prime": ex.t_prime,
                         "t_doubleprime": ex.t_doubleprime, "y": ex.y})
        elif isinstance(ex, CPCBatch):
            recs.append({"kind": "cpc", "sequences": [
                {"rec_id": s.rec_id, "context": s.context, "future": s.future}
                for s in ex.sequences]})
        else:
            raise InvalidArgumentError(f"unknown example type {type(ex)}")
    return recs


def examples_from_records(records):
    out = []
    for r in records:
        kind = r.get("kind")
        if kind == "rp":
            out.append(RPPair(r["rec_a"], r["rec_b"], r["t"], r["t_prime"],
                              r["y"]))
        elif kind == "ts":
            out.append(TSTriplet(r["rec_anchor"], r["rec_middle"], r["t"],
                                 r["t_prime"], r["t_doubleprime"], r["y"]))
        elif kind == "cpc":
            out.append(CPCBatch([CPCSequence(s["rec_id"], list(s["context"]),
                                             list(s["future"]))
                                 for s in r["sequences"]]))
        else:
            raise InvalidArgumentError(f"unknown example record kind {kind!r}")
    return out
