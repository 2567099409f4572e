"""Common spatial patterns with normalized log-variance features and a binary LDA."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFit, NoTrialsForLabel, ShapeMismatch, SingularComposite, ZeroVariance
from .trialio import Label, Trial, TrialSet

CLASS_ORDER = (Label.LEFT, Label.RIGHT)
MAX_CONDITION = 1e10
SHRINK_START = 1e-6
SHRINK_STOP = 1e-2


def _shrink_until_conditioned(c: np.ndarray, what: str) -> np.ndarray:
    """Blend ``c`` toward (trace/n) I, weight 1e-6 up to 1e-2, until cond <= 1e10."""
    if np.linalg.cond(c) <= MAX_CONDITION:
        return c
    target = np.trace(c) / c.shape[0] * np.eye(c.shape[0])
    weight = SHRINK_START
    while weight <= SHRINK_STOP * (1 + 1e-9):
        shrunk = (1.0 - weight) * c + weight * target
        if np.linalg.cond(shrunk) <= MAX_CONDITION:
            return shrunk
        weight *= 10.0
    raise SingularComposite(f"{what} stays ill-conditioned after shrinkage weight {SHRINK_STOP:g}")


def trial_covariance(data: np.ndarray) -> np.ndarray:
    """Trace-normalized spatial covariance of one (n_c, T) trial after mean removal."""
    x = data - data.mean(axis=1, keepdims=True)
    c = x @ x.T
    tr = np.trace(c)
    if not tr > 0:
        raise ZeroVariance("trial has zero variance on every channel")
    return c / tr


def class_covariance(trials: TrialSet | list[Trial], label: Label) -> np.ndarray:
    covs = [trial_covariance(t.data) for t in trials if t.label == label]
    if not covs:
        raise NoTrialsForLabel(f"no trials labeled {Label(label).value!r}")
    c = np.mean(covs, axis=0)
    return (c + c.T) / 2.0


@dataclass(frozen=True)
class CspModel:
    """``W`` rows are spatial filters ordered [top-k, bottom-k]."""

    W: np.ndarray
    k: int
    eigenvalues: np.ndarray  # retained, aligned with the rows of W
    full_W: np.ndarray  # every generalized eigenvector, descending eigenvalue
    full_eigenvalues: np.ndarray
    class_order: tuple[Label, Label] = CLASS_ORDER


def _sign_convention(rows: np.ndarray) -> np.ndarray:
    """Flip each row so that its largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(rows), axis=1)
    signs = np.sign(rows[np.arange(len(rows)), idx])
    signs[signs == 0] = 1.0
    return rows * signs[:, None]


def generalized_eigh_whitening(c1: np.ndarray, c2: np.ndarray):
    """Solve c1 w = lam (c1 + c2) w by whitening the composite.

    Returns eigenvalues in descending order and the matching eigenvectors as
    rows, scaled so that W (c1 + c2) W^T = I.
    """
    composite = _shrink_until_conditioned(c1 + c2, "composite covariance")
    d, u = np.linalg.eigh(composite)
    if d.min() <= 0:
        raise SingularComposite("composite covariance is not positive definite")
    whiten = (u / np.sqrt(d)).T
    s1 = whiten @ c1 @ whiten.T
    lam, b = np.linalg.eigh((s1 + s1.T) / 2.0)
    order = np.argsort(lam)[::-1]
    lam, b = lam[order], b[:, order]
    return lam, _sign_convention(b.T @ whiten)


def fit_csp(train: TrialSet | list[Trial], k: int = 3, class_order: tuple[Label, Label] = CLASS_ORDER) -> CspModel:
    c1 = class_covariance(train, class_order[0])
    c2 = class_covariance(train, class_order[1])
    n_c = c1.shape[0]
    if k < 1 or 2 * k > n_c:
        raise ShapeMismatch(f"{k} filter pairs need at least {2 * k} channels, have {n_c}")
    lam, rows = generalized_eigh_whitening(c1, c2)
    keep = np.r_[np.arange(k), np.arange(n_c - k, n_c)]
    return CspModel(rows[keep], k, lam[keep], rows, lam, tuple(class_order))


def csp_features(model: CspModel, t: Trial | np.ndarray) -> np.ndarray:
    data = t.data if isinstance(t, Trial) else np.asarray(t, dtype=float)
    if data.shape[0] != model.W.shape[1]:
        raise ShapeMismatch(f"trial has {data.shape[0]} channels, CSP filters expect {model.W.shape[1]}")
    z = model.W @ (data - data.mean(axis=1, keepdims=True))
    var = z.var(axis=1)
    total = var.sum()
    if not total > 0 or np.any(var <= 0):
        raise ZeroVariance("spatially filtered signal has zero variance")
    return np.log(var / total)


@dataclass(frozen=True)
class LdaModel:
    w: np.ndarray
    b: float
    class_order: tuple[Label, Label] = CLASS_ORDER

    def decision(self, f: np.ndarray) -> np.ndarray:
        return np.asarray(f) @ self.w + self.b

    def predict(self, f: np.ndarray):
        """Label for one feature vector, list of labels for a 2-D array."""
        score = self.decision(f)
        if np.ndim(score) == 0:
            return self.class_order[0] if score >= 0 else self.class_order[1]
        return [self.class_order[0] if s >= 0 else self.class_order[1] for s in score]


def fit_lda(features, labels=None, class_order: tuple[Label, Label] = CLASS_ORDER) -> LdaModel:
    """Two-class LDA with equal priors.

    ``features`` is either an (n, p) array with ``labels`` alongside, or a
    list of ``(vector, label)`` pairs. Positive scores (and ties) predict
    ``class_order[0]``.
    """
    if labels is None:
        pairs = list(features)
        features = np.array([np.atleast_1d(f) for f, _ in pairs], dtype=float)
        labels = [lab for _, lab in pairs]
    X = np.atleast_2d(np.asarray(features, dtype=float))
    if X.shape[0] != len(labels):
        X = X.T
    labels = [Label(lab) for lab in labels]
    groups = [X[np.array([lab == c for lab in labels], dtype=bool)] for c in class_order]
    for c, g in zip(class_order, groups):
        if len(g) == 0:
            raise NoTrialsForLabel(f"no feature vectors labeled {Label(c).value!r}")
    mu1, mu2 = (g.mean(axis=0) for g in groups)
    scatter = sum((g - g.mean(axis=0)).T @ (g - g.mean(axis=0)) for g in groups)
    dof = max(X.shape[0] - 2, 1)
    pooled = np.atleast_2d(scatter / dof)
    if not np.trace(pooled) > 0:
        raise DegenerateFit("pooled within-class covariance is zero")
    try:
        pooled = _shrink_until_conditioned(pooled, "pooled within-class covariance")
    except SingularComposite as exc:
        raise DegenerateFit(str(exc)) from None
    w = np.linalg.solve(pooled, mu1 - mu2)
    if not np.all(np.isfinite(w)) or not np.any(w):
        raise DegenerateFit("LDA weight vector is zero or non-finite")
    b = float(-w @ (mu1 + mu2) / 2.0)
    return LdaModel(w, b, tuple(class_order))


@dataclass(frozen=True)
class AccuracyRecord:
    accuracy: float
    per_class: dict
    confusion: dict  # (true, predicted) -> count
    n_test: int


def score(csp: CspModel, lda: LdaModel, test: TrialSet | list[Trial]) -> AccuracyRecord:
    feats = np.array([csp_features(csp, t) for t in test])
    preds = lda.predict(feats)
    truth = [t.label for t in test]
    confusion = {(a, b): 0 for a in lda.class_order for b in lda.class_order}
    for y, p in zip(truth, preds):
        confusion[(y, p)] += 1
    per_class = {}
    for c in lda.class_order:
        n = sum(1 for y in truth if y == c)
        per_class[c] = confusion[(c, c)] / n if n else float("nan")
    correct = sum(confusion[(c, c)] for c in lda.class_order)
    return AccuracyRecord(correct / len(truth), per_class, confusion, len(truth))


def fit(train: TrialSet | list[Trial], k: int = 3) -> tuple[CspModel, LdaModel]:
    csp = fit_csp(train, k)
    feats = np.array([csp_features(csp, t) for t in train])
    return csp, fit_lda(feats, [t.label for t in train], csp.class_order)


def evaluate(train: TrialSet | list[Trial], test: TrialSet | list[Trial], k: int = 3) -> AccuracyRecord:
    """Fit CSP + LDA on ``train`` and score ``test``."""
    for t in list(train) + list(test):
        if t.label is None:
            raise NoTrialsForLabel(f"trial {t.trial_id!r} is unlabeled")
    csp, lda = fit(train, k)
    return score(csp, lda, test)
