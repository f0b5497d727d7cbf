"""Downstream linear evaluation: multinomial logistic regression with an L2
penalty and class weighting, balanced accuracy, recording-level dataset
splits, and the labeled-data-regime protocol.

The probe minimizes  sum_i w_i * CE_i + ||W||^2 / (2C)  (bias unpenalized)
by full-batch gradient descent with a backtracking line search; convexity
makes the solver choice immaterial up to tolerance.
"""

import warnings
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .errors import InvalidArgumentError
from .store import derive_seed


@dataclass
class ProbeModel:
    weights: np.ndarray           # [K, F]
    bias: np.ndarray              # [K]
    classes: list
    c: float
    converged: bool = True
    n_iter: int = 0
    grad_norm: float = 0.0


@dataclass
class RegimeResult:
    regime: Union[int, str]       # examples per class, or "all"
    seed: int
    bal_acc: float
    confusion: np.ndarray         # [K, K], rows = true class

    def to_config(self):
        return {"regime": self.regime, "seed": self.seed,
                "bal_acc": self.bal_acc,
                "confusion": np.asarray(self.confusion).tolist()}


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _objective(w, b, x, y_onehot, sample_w, c):
    logits = x @ w.T + b
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1)) + logits.max(axis=1)
    ce = lse - logits[np.arange(len(x)), y_onehot.argmax(axis=1)]
    return float(sample_w @ ce + 0.5 / c * np.sum(w * w))


def resolve_sample_weights(labels_idx, classes, class_weighted,
                           class_weights=None):
    """Per-example weights: uniform, balanced (N / (K * N_c)), or explicit."""
    n = len(labels_idx)
    k = len(classes)
    if class_weights is not None:
        per_class = np.asarray([class_weights.get(c, 1.0) for c in classes],
                               dtype=np.float64)
    elif class_weighted:
        counts = np.bincount(labels_idx, minlength=k).astype(np.float64)
        per_class = n / (k * counts)
    else:
        per_class = np.ones(k, dtype=np.float64)
    return per_class[labels_idx]


def fit_probe(features, labels, c=1.0, class_weighted=True,
              class_weights=None, max_iter=5000, tol=1e-6, init_seed=None):
    """Fit the linear probe; see the module docstring for the objective.

    class_weights (a class -> weight mapping) overrides the balanced scheme.
    Non-convergence within max_iter is flagged on the model, not fatal.
    """
    x = np.asarray(features, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("features must be finite (impute first)")
    labels = list(labels)
    classes = sorted(set(labels))
    if len(classes) < 2:
        raise InvalidArgumentError(
            f"need at least 2 classes, got {classes}")
    cls_idx = {cl: i for i, cl in enumerate(classes)}
    y = np.asarray([cls_idx[l] for l in labels], dtype=np.int64)
    n, f = x.shape
    k = len(classes)
    y_onehot = np.zeros((n, k))
    y_onehot[np.arange(n), y] = 1.0
    sample_w = resolve_sample_weights(y, classes, class_weighted,
                                      class_weights)
    if init_seed is None:
        w = np.zeros((k, f))
        b = np.zeros(k)
    else:
        rng = np.random.default_rng(init_seed)
        w = rng.normal(scale=0.01, size=(k, f))
        b = rng.normal(scale=0.01, size=k)
    obj = _objective(w, b, x, y_onehot, sample_w, c)
    step = 1.0
    converged = False
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = _softmax(x @ w.T + b)
        resid = (p - y_onehot) * sample_w[:, None]
        gw = resid.T @ x + w / c
        gb = resid.sum(axis=0)
        grad_norm = float(np.sqrt(np.sum(gw * gw) + np.sum(gb * gb)))
        if grad_norm < tol:
            converged = True
            break
        gsq = grad_norm ** 2
        step = min(step * 2.0, 1e6)
        for _ in range(60):
            w_new = w - step * gw
            b_new = b - step * gb
            obj_new = _objective(w_new, b_new, x, y_onehot, sample_w, c)
            if obj_new <= obj - 1e-4 * step * gsq:
                break
            step *= 0.5
        w, b, obj = w_new, b_new, obj_new
    return ProbeModel(weights=w, bias=b, classes=classes, c=c,
                      converged=converged, n_iter=it, grad_norm=grad_norm)


def probe_objective(model, features, labels, class_weighted=True,
                    class_weights=None):
    """Objective value of a fitted model on the given data (for tests)."""
    x = np.asarray(features, dtype=np.float64)
    cls_idx = {cl: i for i, cl in enumerate(model.classes)}
    y = np.asarray([cls_idx[l] for l in labels], dtype=np.int64)
    y_onehot = np.zeros((len(y), len(model.classes)))
    y_onehot[np.arange(len(y)), y] = 1.0
    sample_w = resolve_sample_weights(y, model.classes, class_weighted,
                                      class_weights)
    return _objective(model.weights, model.bias, x, y_onehot, sample_w,
                      model.c)


def predict(model, features):
    """Argmax predictions; ties break toward the lowest class index."""
    x = np.asarray(features, dtype=np.float64)
    logits = x @ model.weights.T + model.bias
    return [model.classes[i] for i in logits.argmax(axis=1)]


def balanced_accuracy(pred, true):
    """Average per-class recall over the classes present in `true`."""
    pred, true = list(pred), list(true)
    if len(pred) != len(true):
        raise InvalidArgumentError("prediction/label length mismatch")
    if not true:
        raise InvalidArgumentError("empty label list")
    classes = sorted(set(true))
    recalls = []
    pred = np.asarray(pred, dtype=object)
    true = np.asarray(true, dtype=object)
    for cl in classes:
        sel = true == cl
        recalls.append(float(np.mean(pred[sel] == cl)))
    return float(np.mean(recalls))


def confusion_matrix(pred, true, classes=None):
    if classes is None:
        classes = sorted(set(true))
    idx = {cl: i for i, cl in enumerate(classes)}
    out = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for p, t in zip(pred, true):
        out[idx[t], idx[p]] += 1
    return out


# ---------------------------------------------------------------------------
# Labeled-data-regime protocol
# ---------------------------------------------------------------------------

def subsample_per_class(labels, n_per_class, rng):
    """Uniform subsample of n_per_class row indices per class."""
    labels = np.asarray(labels, dtype=object)
    picked = []
    for cl in sorted(set(labels.tolist())):
        rows = np.flatnonzero(labels == cl)
        take = min(n_per_class, len(rows))
        picked.extend(rng.choice(rows, size=take, replace=False).tolist())
    return np.asarray(sorted(picked), dtype=np.int64)


def regime_sweep(train_features, train_labels, regimes, test_features,
                 test_labels, n_seeds=5, c=1.0, class_weighted=True,
                 seed=0):
    """Fit the probe per (regime, seed) on a per-class subsample of the
    training split; evaluate balanced accuracy on the fixed test split.

    Regimes above a class's availability are clipped with a warning;
    regime "all" uses every example (identical across seeds).
    """
    train_x = np.asarray(train_features, dtype=np.float64)
    test_x = np.asarray(test_features, dtype=np.float64)
    labels_arr = np.asarray(list(train_labels), dtype=object)
    counts = {cl: int(np.sum(labels_arr == cl))
              for cl in sorted(set(labels_arr.tolist()))}
    results = []
    classes = sorted(counts)
    for regime in regimes:
        for s in range(n_seeds):
            if regime == "all":
                rows = np.arange(len(labels_arr))
            else:
                if regime > min(counts.values()):
                    warnings.warn(
                        f"regime {regime} exceeds the smallest class count "
                        f"({min(counts.values())}); clipping", stacklevel=2)
                rng = np.random.default_rng(
                    derive_seed(seed, f"regime={regime}", f"run={s}"))
                rows = subsample_per_class(labels_arr, int(regime), rng)
            model = fit_probe(train_x[rows], labels_arr[rows].tolist(), c=c,
                              class_weighted=class_weighted)
            pred = predict(model, test_x)
            results.append(RegimeResult(
                regime=regime, seed=s,
                bal_acc=balanced_accuracy(pred, list(test_labels)),
                confusion=confusion_matrix(pred, list(test_labels), classes)))
    return results


def aggregate_regimes(results):
    """Mean and standard deviation of balanced accuracy per regime."""
    out = []
    seen = []
    for r in results:
        if r.regime not in seen:
            seen.append(r.regime)
    for regime in seen:
        accs = [r.bal_acc for r in results if r.regime == regime]
        out.append({"regime": regime, "mean_bal_acc": float(np.mean(accs)),
                    "std_bal_acc": float(np.std(accs)), "n_runs": len(accs)})
    return out


# ---------------------------------------------------------------------------
# Dataset splitting
# ---------------------------------------------------------------------------

def split_dataset(entries, fractions, seed):
    """Split recording entries into train/valid/test at recording
    granularity, keeping all recordings of a subject in one split.

    Split sizes follow the cumulative-floor rule so e.g. 993 recordings at
    60-20-20 give 595/199/199.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise InvalidArgumentError(f"fractions {fractions} must sum to 1")
    entries = list(entries)
    n = len(entries)
    if n < sum(1 for f in fractions if f > 0):
        raise InvalidArgumentError(
            f"{n} recordings cannot fill {len(fractions)} splits")
    groups = {}
    for e in entries:
        groups.setdefault(e.get("subject_id") or e["id"], []).append(e)
    keys = sorted(groups)
    rng = np.random.default_rng(derive_seed(seed, "split"))
    rng.shuffle(keys)
    n_train = int(np.floor(n * fractions[0]))
    n_trainvalid = int(np.floor(n * (fractions[0] + fractions[1])))
    out = ([], [], [])
    assigned = 0
    for key in keys:
        if assigned < n_train:
            out[0].extend(groups[key])
        elif assigned < n_trainvalid:
            out[1].extend(groups[key])
        else:
            out[2].extend(groups[key])
        assigned += len(groups[key])
    return out
