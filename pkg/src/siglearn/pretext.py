"""Contrastive heads and losses, the Adam optimizer, and the training loop
with early stopping on validation loss.

Pair and order tasks use a linear head on (concatenated) elementwise absolute
differences of window embeddings with a binary logistic loss; the
predictive-coding task scores candidate futures against a recurrent context
summary through one bilinear matrix per step and trains with a categorical
cross-entropy over one positive and the co-batched negatives. Baseline
objectives (reconstruction, supervised classification) share the same loop.
"""

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import DivergenceError, InvalidArgumentError
from .sampling import CPCBatch, RPPair, TSTriplet
from .store import append_jsonl, derive_seed

TASKS = ("rp", "ts", "cpc", "ae", "supervised")


# ---------------------------------------------------------------------------
# Heads and losses
# ---------------------------------------------------------------------------

class PairHead:
    """Linear scorer w^T features + w0."""

    def __init__(self, in_dim, seed):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.w = Tensor(nn.he_uniform((in_dim, 1), in_dim, rng),
                        requires_grad=True)
        self.w0 = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)

    def named_params(self):
        return [("w", self.w), ("w0", self.w0)]

    def bn_states(self):
        return []


def rp_logit(h1, h2, head):
    """Scalar pair score: w^T |h1 - h2| + w0. Predicted label is its sign."""
    h1, h2 = np.asarray(h1), np.asarray(h2)
    if h1.shape != h2.shape or h1.shape != (head.in_dim,):
        raise InvalidArgumentError(
            f"expected two ({head.in_dim},) vectors, got {h1.shape} and "
            f"{h2.shape}")
    return float(np.abs(h1 - h2) @ head.w.data[:, 0] + head.w0.data[0])


def ts_logit(h1, h2, h3, head):
    """Scalar triplet score: w^T (|h1 - h2| ++ |h2 - h3|) + w0."""
    h1, h2, h3 = np.asarray(h1), np.asarray(h2), np.asarray(h3)
    if not (h1.shape == h2.shape == h3.shape) or 2 * h1.shape[0] != head.in_dim:
        raise InvalidArgumentError(
            f"expected three ({head.in_dim // 2},) vectors, got {h1.shape}")
    feats = np.concatenate([np.abs(h1 - h2), np.abs(h2 - h3)])
    return float(feats @ head.w.data[:, 0] + head.w0.data[0])


def pair_logits(h_left, h_right, head):
    """Batched pair scores from embedding Tensors (B, D) -> (B,)."""
    d = ad.abs_(ad.add(h_left, ad.mul(h_right, -1.0)))
    return ad.reshape(ad.add(ad.matmul(d, head.w), head.w0), (-1,))


def triplet_logits(h1, h2, h3, head):
    d1 = ad.abs_(ad.add(h1, ad.mul(h2, -1.0)))
    d2 = ad.abs_(ad.add(h2, ad.mul(h3, -1.0)))
    return ad.reshape(ad.add(ad.matmul(ad.concat([d1, d2], axis=1), head.w),
                             head.w0), (-1,))


def rp_loss(logits, y):
    """Mean binary logistic loss log(1 + exp(-y * logit)), stable softplus."""
    logits = logits if isinstance(logits, Tensor) else Tensor(
        np.asarray(logits, dtype=np.float32))
    y = np.asarray(y)
    if y.shape != logits.shape:
        raise InvalidArgumentError(
            f"labels shape {y.shape} != logits shape {logits.shape}")
    return ad.mean(ad.softplus(ad.mul(logits,
                                      (-y).astype(logits.dtype))))


def info_nce(scores, positive=None):
    """Mean over rows of -log softmax(scores)[positive].

    scores: (R, C) Tensor or array; positive: per-row column index
    (default 0, the convention for a single anchor's step-by-candidate
    score matrix). Stabilized by max subtraction.
    """
    scores = scores if isinstance(scores, Tensor) else Tensor(
        np.asarray(scores, dtype=np.float32))
    r = scores.shape[0]
    if positive is None:
        positive = np.zeros(r, dtype=np.int64)
    else:
        positive = np.asarray(positive, dtype=np.int64)
    lse = ad.reshape(ad.logsumexp(scores, axis=1), (-1,))
    pos = ad.gather_rows(scores, positive)
    return ad.mean(ad.add(lse, ad.mul(pos, -1.0)))


def cpc_scores(encoder, batch, embeddings, anchor=0):
    """Step-by-candidate score matrix (N_p, N_b + 1) for one anchor sequence.

    embeddings maps (rec_id, window_index) -> feature vector. Column 0 holds
    the anchor's own future at each step; the remaining columns are the
    step-k futures of the other sequences in batch order.
    """
    seqs = batch.sequences
    ctx = seqs[anchor].context
    ctx_emb = np.stack([embeddings[(seqs[anchor].rec_id, w)] for w in ctx])
    c = nn.gru_forward(encoder.gru, Tensor(ctx_emb)).data
    candidates = [seqs[anchor]] + [s for i, s in enumerate(seqs)
                                   if i != anchor]
    n_steps = len(encoder.w_step)
    out = np.zeros((n_steps, len(candidates)), dtype=np.float64)
    for k in range(n_steps):
        wk = encoder.w_step[k].data
        for j, seq in enumerate(candidates):
            h = embeddings[(seq.rec_id, seq.future[k])]
            out[k, j] = float(h @ wk @ c)
    return out


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 256          # 32 for the predictive-coding task
    weight_decay: float = 1e-3
    max_epochs: int = 150
    patience: int = 10             # 6 for the predictive-coding task
    min_improvement: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if min(self.lr, self.beta1, self.beta2, self.eps,
               self.batch_size, self.max_epochs, self.patience) <= 0:
            raise InvalidArgumentError("training config values must be > 0")
        if self.weight_decay < 0:
            raise InvalidArgumentError("weight_decay must be >= 0")
        if self.patience >= self.max_epochs:
            raise InvalidArgumentError("patience must be < max_epochs")

    def to_config(self):
        return dict(self.__dict__)

    @classmethod
    def from_config(cls, cfg):
        return cls(**cfg)


class AdamState:
    def __init__(self):
        self.t = 0
        self.m = {}
        self.v = {}


def adam_step(named_params, state, cfg):
    """Bias-corrected Adam with decoupled weight decay.

    Parameters are first scaled by (1 - lr * weight_decay), then updated by
    lr * m_hat / (sqrt(v_hat) + eps). Non-finite gradients abort.
    """
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in named_params:
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient in {name!r} at step {state.t}",
                diagnostics={"param": name, "step": state.t,
                             "n_bad": int(np.sum(~np.isfinite(g)))})
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if cfg.weight_decay > 0:
            p.data *= (1.0 - cfg.lr * cfg.weight_decay)
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * (g * g)
        p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# Window lookup
# ---------------------------------------------------------------------------

class WindowStore:
    """Fast window lookup across the WindowSets of a split."""

    def __init__(self, window_sets):
        items = window_sets.values() if isinstance(window_sets, dict) \
            else window_sets
        self.by_rec = {ws.recording_id: ws for ws in items}
        if not self.by_rec:
            raise InvalidArgumentError("empty window store")
        first = next(iter(self.by_rec.values()))
        self.window_shape = first.data.shape[1:]

    def by_start(self, rec_id, start):
        ws = self.by_rec[rec_id]
        idx = int(start) // ws.T
        if idx >= ws.n_windows or int(ws.starts[idx]) != int(start):
            raise InvalidArgumentError(
                f"no window starting at sample {start} in {rec_id}")
        return ws.data[idx]

    def by_index(self, rec_id, idx):
        return self.by_rec[rec_id].data[int(idx)]

    def labeled_window_examples(self):
        """(rec_id, window_index, label) for every retained labeled window."""
        out = []
        for rec_id in sorted(self.by_rec):
            ws = self.by_rec[rec_id]
            for i in ws.retained_indices():
                label = ws.labels[i] if ws.labels is not None \
                    else ws.recording_label
                out.append((rec_id, int(i), label))
        return out

    def window_examples(self):
        return [(r, i) for r, i, _ in self.labeled_window_examples()]


# ---------------------------------------------------------------------------
# Task adapters
# ---------------------------------------------------------------------------

class _TaskBase:
    examples_per_step = None   # None: use cfg.batch_size examples per step

    def named_params(self):
        out = []
        for mod_name, mod in self.modules():
            out.extend((f"{mod_name}.{n}", t) for n, t in mod.named_params())
        return out

    def bn_states(self):
        out = []
        for mod_name, mod in self.modules():
            out.extend((f"{mod_name}.{n}", s) for n, s in mod.bn_states())
        return out


class RPTask(_TaskBase):
    kind = "rp"

    def __init__(self, embedder, seed):
        self.embedder = embedder
        self.head = PairHead(embedder.cfg.out_dim, derive_seed(seed, "head"))

    def modules(self):
        return [("embedder", self.embedder), ("head", self.head)]

    def collate(self, examples, store):
        x1 = np.stack([store.by_start(e.rec_a, e.t) for e in examples])
        x2 = np.stack([store.by_start(e.rec_b, e.t_prime) for e in examples])
        y = np.asarray([e.y for e in examples], dtype=np.float32)
        return x1, x2, y

    def loss(self, arrays, training, rng):
        x1, x2, y = arrays
        b = len(y)
        h = self.embedder.forward(Tensor(np.concatenate([x1, x2])),
                                  training, rng)
        logits = pair_logits(ad.narrow(h, 0, 0, b), ad.narrow(h, 0, b, b),
                             self.head)
        loss = rp_loss(logits, y)
        aux = {"pred_labels": np.where(logits.data >= 0, 1, -1),
               "true_labels": y.astype(np.int64)}
        return loss, aux, b


class TSTask(_TaskBase):
    kind = "ts"

    def __init__(self, embedder, seed):
        self.embedder = embedder
        self.head = PairHead(2 * embedder.cfg.out_dim,
                             derive_seed(seed, "head"))

    def modules(self):
        return [("embedder", self.embedder), ("head", self.head)]

    def collate(self, examples, store):
        x1 = np.stack([store.by_start(e.rec_anchor, e.t) for e in examples])
        x2 = np.stack([store.by_start(e.rec_middle, e.t_prime)
                       for e in examples])
        x3 = np.stack([store.by_start(e.rec_anchor, e.t_doubleprime)
                       for e in examples])
        y = np.asarray([e.y for e in examples], dtype=np.float32)
        return x1, x2, x3, y

    def loss(self, arrays, training, rng):
        x1, x2, x3, y = arrays
        b = len(y)
        h = self.embedder.forward(Tensor(np.concatenate([x1, x2, x3])),
                                  training, rng)
        logits = triplet_logits(ad.narrow(h, 0, 0, b), ad.narrow(h, 0, b, b),
                                ad.narrow(h, 0, 2 * b, b), self.head)
        loss = rp_loss(logits, y)
        aux = {"pred_labels": np.where(logits.data >= 0, 1, -1),
               "true_labels": y.astype(np.int64)}
        return loss, aux, b


class CPCTask(_TaskBase):
    """One sampled batch per optimizer step; every sequence serves once as
    the anchor, with the co-batched sequences as its negatives."""

    kind = "cpc"
    examples_per_step = 1

    def __init__(self, embedder, encoder, seed):
        self.embedder = embedder
        self.encoder = encoder

    def modules(self):
        return [("embedder", self.embedder), ("encoder", self.encoder)]

    def collate(self, examples, store):
        (batch,) = examples
        seqs = batch.sequences
        ctx = np.stack([store.by_index(s.rec_id, w)
                        for s in seqs for w in s.context])
        fut = np.stack([store.by_index(s.rec_id, w)
                        for s in seqs for w in s.future])
        return ctx, fut, len(seqs), len(seqs[0].context), len(seqs[0].future)

    def loss(self, arrays, training, rng):
        ctx, fut, n_seq, n_ctx, n_fut = arrays
        if n_fut != len(self.encoder.w_step):
            raise InvalidArgumentError(
                f"batch predicts {n_fut} steps but encoder has "
                f"{len(self.encoder.w_step)} bilinear matrices")
        h = self.embedder.forward(Tensor(np.concatenate([ctx, fut])),
                                  training, rng)
        n_ctx_rows = n_seq * n_ctx
        h_ctx = ad.reshape(ad.narrow(h, 0, 0, n_ctx_rows),
                           (n_seq, n_ctx, -1))
        h_fut = ad.reshape(ad.narrow(h, 0, n_ctx_rows, n_seq * n_fut),
                           (n_seq, n_fut, -1))
        c = self.encoder.summarize(h_ctx)                 # (A, H)
        score_blocks = []
        for k in range(n_fut):
            hk = ad.reshape(ad.narrow(h_fut, 1, k, 1), (n_seq, -1))
            pk = ad.matmul(c, ad.transpose(self.encoder.w_step[k], (1, 0)))
            score_blocks.append(ad.matmul(pk, ad.transpose(hk, (1, 0))))
        scores = ad.concat(score_blocks, axis=0)          # (N_p*A, A)
        positive = np.tile(np.arange(n_seq), n_fut)
        loss = info_nce(scores, positive)
        hits = int(np.sum(scores.data.argmax(axis=1) == positive))
        aux = {"n_correct": hits, "n_scored": scores.shape[0]}
        return loss, aux, n_seq


class AETask(_TaskBase):
    """Reconstruction with mean squared error through the embedder."""

    kind = "ae"

    def __init__(self, embedder, decoder, seed=None):
        self.embedder = embedder
        self.decoder = decoder

    def modules(self):
        return [("embedder", self.embedder), ("decoder", self.decoder)]

    def collate(self, examples, store):
        x = np.stack([store.by_index(r, i) for r, i in examples])
        return (x,)

    def loss(self, arrays, training, rng):
        (x,) = arrays
        xt = Tensor(x)
        z = self.embedder.forward(xt, training, rng)
        recon = self.decoder.forward(z, training, rng)
        loss = ad.mean(ad.square(ad.add(recon, ad.mul(xt, -1.0))))
        return loss, {}, len(x)


class SupervisedTask(_TaskBase):
    """Embedder plus a linear classifier, class-weighted cross-entropy."""

    kind = "supervised"

    def __init__(self, embedder, classes, class_weights, seed):
        self.embedder = embedder
        self.classes = list(classes)
        self.class_weights = np.asarray(class_weights, dtype=np.float64)
        rng = np.random.default_rng(derive_seed(seed, "classifier"))
        d = embedder.cfg.out_dim
        self.cls_w = Tensor(nn.he_uniform((d, len(classes)), d, rng),
                            requires_grad=True)
        self.cls_b = Tensor(np.zeros(len(classes), dtype=np.float32),
                            requires_grad=True)

    def modules(self):
        return [("embedder", self.embedder), ("classifier", self)]

    def named_params(self):
        out = [(f"embedder.{n}", t) for n, t in self.embedder.named_params()]
        out += [("classifier.w", self.cls_w), ("classifier.b", self.cls_b)]
        return out

    def bn_states(self):
        return [(f"embedder.{n}", s) for n, s in self.embedder.bn_states()]

    def collate(self, examples, store):
        x = np.stack([store.by_index(r, i) for r, i, _ in examples])
        y = np.asarray([self.classes.index(lbl) for _, _, lbl in examples],
                       dtype=np.int64)
        return x, y

    def loss(self, arrays, training, rng):
        x, y = arrays
        z = self.embedder.forward(Tensor(x), training, rng)
        logits = nn.linear(z, self.cls_w, self.cls_b)
        lse = ad.reshape(ad.logsumexp(logits, axis=1), (-1,))
        pos = ad.gather_rows(logits, y)
        ce = ad.add(lse, ad.mul(pos, -1.0))
        w = self.class_weights[y]
        loss = ad.mul(ad.sum_(ad.mul(ce, w.astype(np.float32))),
                      1.0 / float(w.sum()))
        aux = {"pred_labels": logits.data.argmax(axis=1),
               "true_labels": y}
        return loss, aux, len(y)


def compute_class_weights(labels, classes):
    """Balanced scheme: w_c = N_total / (K * N_c)."""
    labels = list(labels)
    counts = np.array([sum(1 for l in labels if l == c) for c in classes],
                      dtype=np.float64)
    if np.any(counts == 0):
        raise InvalidArgumentError("every class needs at least one example")
    return len(labels) / (len(classes) * counts)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    pretext_bal_acc: Optional[float]
    lr: float

    def to_config(self):
        return dict(self.__dict__)


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1
    wall_s: float = 0.0

    def to_config(self):
        return {"epochs": [e.to_config() for e in self.epochs],
                "best_epoch": self.best_epoch,
                "stopped_epoch": self.stopped_epoch, "wall_s": self.wall_s}

    @classmethod
    def from_config(cls, cfg):
        return cls(epochs=[EpochRecord(**e) for e in cfg["epochs"]],
                   best_epoch=cfg["best_epoch"],
                   stopped_epoch=cfg["stopped_epoch"], wall_s=cfg["wall_s"])


def _balanced_accuracy(pred, true):
    classes = np.unique(true)
    recalls = [np.mean(pred[true == c] == c) for c in classes]
    return float(np.mean(recalls))


def _snapshot(task):
    params = [t.data.copy() for _, t in task.named_params()]
    states = [(s.running_mean.copy(), s.running_var.copy())
              for _, s in task.bn_states()]
    return params, states


def _restore(task, snap):
    params, states = snap
    for (_, t), data in zip(task.named_params(), params):
        t.data = data.copy()
    for (_, s), (mean, var) in zip(task.bn_states(), states):
        s.load(mean, var)


def evaluate_task(task, examples, store, batch_size):
    """Eval-mode pass: returns (mean loss, pretext balanced accuracy)."""
    step = task.examples_per_step or batch_size
    tot, wsum = 0.0, 0
    preds, trues = [], []
    n_correct, n_scored = 0, 0
    for lo in range(0, len(examples), step):
        chunk = examples[lo:lo + step]
        arrays = task.collate(chunk, store)
        loss, aux, n = task.loss(arrays, training=False, rng=None)
        tot += float(loss.data) * n
        wsum += n
        if "pred_labels" in aux:
            preds.append(aux["pred_labels"])
            trues.append(aux["true_labels"])
        if "n_correct" in aux:
            n_correct += aux["n_correct"]
            n_scored += aux["n_scored"]
    bal = None
    if preds:
        bal = _balanced_accuracy(np.concatenate(preds), np.concatenate(trues))
    elif n_scored:
        bal = n_correct / n_scored
    return tot / max(wsum, 1), bal


def train_pretext(task, train_examples, valid_examples, store, cfg,
                  log_path=None):
    """Mini-batch training with seeded shuffling and early stopping.

    Stops when the validation loss has not improved by min_improvement for
    `patience` consecutive epochs (or at max_epochs) and restores the
    parameters of the best validation epoch.
    """
    if not train_examples or not valid_examples:
        raise InvalidArgumentError("train and validation sets must be "
                                   "non-empty")
    t0 = time.perf_counter()
    named = task.named_params()
    opt_state = AdamState()
    rng_shuffle = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    rng_dropout = np.random.default_rng(derive_seed(cfg.seed, "dropout"))
    step = task.examples_per_step or cfg.batch_size
    best, best_loss, best_epoch, bad = None, np.inf, -1, 0
    history = TrainHistory()
    for epoch in range(cfg.max_epochs):
        order = rng_shuffle.permutation(len(train_examples))
        tot, wsum = 0.0, 0
        for lo in range(0, len(order), step):
            idx = order[lo:lo + step]
            if len(idx) == 1 and step > 1:
                continue    # batch-norm needs at least two rows
            chunk = [train_examples[i] for i in idx]
            arrays = task.collate(chunk, store)
            for _, p in named:
                p.zero_grad()
            loss, _, n = task.loss(arrays, training=True, rng=rng_dropout)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}",
                    diagnostics={"epoch": epoch, "task": task.kind})
            loss.backward()
            adam_step(named, opt_state, cfg)
            tot += lval * n
            wsum += n
        valid_loss, bal = evaluate_task(task, valid_examples, store,
                                        cfg.batch_size)
        rec = EpochRecord(epoch, tot / max(wsum, 1), valid_loss, bal, cfg.lr)
        history.epochs.append(rec)
        if log_path is not None:
            append_jsonl(log_path, rec.to_config())
        if valid_loss < best_loss - cfg.min_improvement:
            best_loss, best_epoch, bad = valid_loss, epoch, 0
            best = _snapshot(task)
        else:
            bad += 1
        if bad >= cfg.patience:
            break
    if best is not None:
        _restore(task, best)
    history.best_epoch = best_epoch
    history.stopped_epoch = len(history.epochs) - 1
    history.wall_s = time.perf_counter() - t0
    return history


def build_task(kind, embedder, seed, encoder=None, decoder=None,
               classes=None, class_weights=None):
    if kind == "rp":
        return RPTask(embedder, seed)
    if kind == "ts":
        return TSTask(embedder, seed)
    if kind == "cpc":
        if encoder is None:
            raise InvalidArgumentError("cpc task needs a context encoder")
        return CPCTask(embedder, encoder, seed)
    if kind == "ae":
        if decoder is None:
            raise InvalidArgumentError("ae task needs a decoder")
        return AETask(embedder, decoder, seed)
    if kind == "supervised":
        if classes is None or class_weights is None:
            raise InvalidArgumentError(
                "supervised task needs classes and class weights")
        return SupervisedTask(embedder, classes, class_weights, seed)
    raise InvalidArgumentError(f"unknown task {kind!r} (expected {TASKS})")
