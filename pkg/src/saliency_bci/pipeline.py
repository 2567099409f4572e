"""Experiment orchestration: (n, r) tuning, the two-scenario comparison and the segment-length sweep."""

from __future__ import annotations

import io
import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import cspclf
from .attnet import ModelParams, NetConfig, TrainConfig, train
from .errors import GridInvalid, InconsistentPair, NoTrialsForLabel
from .saliency import PruneConfig, attention_vectors, prune_trialset
from .trialio import TrialSet, atomic_write_text

log = logging.getLogger(__name__)

REFERENCE_SEGMENT_LENGTHS = (25, 50, 100, 125, 200, 250)
REFERENCE_KEPT_LENGTHS = (250, 350, 500, 550, 750, 1000)
REFERENCE_T = 1000
SWEEP_KEPT_LENGTHS = (750, 550, 350, 250)


@dataclass(frozen=True)
class Candidate:
    seg_len: int
    ell: int
    n: int
    r: int

    @property
    def prune(self) -> PruneConfig:
        return PruneConfig(self.n, self.r)


@dataclass(frozen=True)
class TuneGrid:
    segment_lengths: tuple[int, ...]
    kept_lengths: tuple[int, ...]

    def candidates(self, T: int) -> list[Candidate]:
        """Every (segment length, kept length) pair realizable at trial length T."""
        for s in self.segment_lengths:
            if s < 1 or T % s:
                raise GridInvalid(f"segment length {s} does not divide T={T}")
        out = []
        for ell in self.kept_lengths:
            if not 1 <= ell <= T:
                raise GridInvalid(f"kept length {ell} outside [1, T={T}]")
            hits = [Candidate(s, ell, T // s, ell // s) for s in self.segment_lengths if ell % s == 0]
            if not hits:
                raise GridInvalid(f"kept length {ell} is not a multiple of any segment length")
            out += hits
        return out


def default_grid(T: int) -> TuneGrid:
    """Segment lengths and kept lengths of the reference grid at T = 1000.

    At T = 1000 this is the literal grid; other lengths use the same
    fractions of T, dropping segment lengths that do not divide T.
    """
    if T == REFERENCE_T:
        return TuneGrid(REFERENCE_SEGMENT_LENGTHS, REFERENCE_KEPT_LENGTHS)
    segs = sorted({round(T * s / REFERENCE_T) for s in REFERENCE_SEGMENT_LENGTHS} - {0})
    segs = [s for s in segs if T % s == 0] or [T]
    kept = []
    for frac in REFERENCE_KEPT_LENGTHS:
        target = T * frac / REFERENCE_T
        # nearest length reachable with one of the segment lengths
        best = min(
            (max(s, round(target / s) * s) for s in segs),
            key=lambda ell: (abs(ell - target), ell),
        )
        kept.append(min(best, T))
    return TuneGrid(tuple(segs), tuple(dict.fromkeys(kept)))


def effective_pairs(k: int, n_c: int) -> int:
    """Cap the CSP pair count at what ``n_c`` channels allow."""
    if 2 * k > n_c:
        capped = max(1, n_c // 2)
        log.warning("%d CSP filter pairs need %d channels; using %d pairs for %d channels", k, 2 * k, capped, n_c)
        return capped
    return k


def stratified_folds(trials: TrialSet, folds: int, seed: int) -> np.ndarray:
    """Fold index per trial, seeded on (seed, trial_ids) and stratified by label.

    Trials of each class are sorted by id, shuffled, and dealt round-robin;
    the dealing position carries over between classes so fold sizes stay
    balanced as well.
    """
    if folds < 2:
        raise GridInvalid(f"need at least 2 folds, got {folds}")
    ids = [t.trial_id for t in trials]
    key = zlib.crc32("\n".join(sorted(ids)).encode())
    rng = np.random.default_rng([seed, key])
    assign = np.empty(len(ids), dtype=int)
    offset = 0
    for label in sorted({t.label for t in trials}, key=lambda v: "" if v is None else v.value):
        members = sorted((i for i, t in enumerate(trials) if t.label == label), key=lambda i: ids[i])
        members = [members[j] for j in rng.permutation(len(members))]
        for pos, i in enumerate(members):
            assign[i] = (offset + pos) % folds
        offset = (offset + len(members)) % folds
    return assign


@dataclass(frozen=True)
class CvRow:
    seg_len: int
    ell: int
    n: int
    r: int
    cv_accuracy: float
    fold_accuracies: tuple[float, ...]


@dataclass(frozen=True)
class TuneResult:
    n: int
    r: int
    table: tuple[CvRow, ...]

    @property
    def prune(self) -> PruneConfig:
        return PruneConfig(self.n, self.r)


def _require_labels(trials: TrialSet, what: str) -> None:
    for t in trials:
        if t.label is None:
            raise NoTrialsForLabel(f"{what}: trial {t.trial_id!r} is unlabeled")


def tune_rn(
    model: ModelParams | np.ndarray,
    train_set: TrialSet,
    grid: TuneGrid,
    folds: int = 5,
    seed: int = 0,
    k: int = 3,
) -> TuneResult:
    """Choose (n, r) by stratified k-fold CSP+LDA accuracy on pruned training trials.

    ``model`` is the frozen saliency network, or precomputed attention
    vectors (n_trials, T). Ties go to the smaller kept length, then the
    smaller segment length.
    """
    _require_labels(train_set, "tune")
    k = effective_pairs(k, train_set.n_channels)
    T = train_set.n_samples
    cands = grid.candidates(T)
    vectors = model if isinstance(model, np.ndarray) else attention_vectors(model, train_set)
    fold_of = stratified_folds(train_set, folds, seed)
    rows = []
    for cand in cands:
        pruned = prune_trialset(train_set, vectors, cand.prune)
        accs = []
        for f in range(folds):
            held = np.flatnonzero(fold_of == f)
            if len(held) == 0:
                continue
            rest = np.flatnonzero(fold_of != f)
            accs.append(cspclf.evaluate(pruned.subset(rest), pruned.subset(held), k).accuracy)
        rows.append(CvRow(cand.seg_len, cand.ell, cand.n, cand.r, float(np.mean(accs)), tuple(accs)))
    best = min(rows, key=lambda row: (-row.cv_accuracy, row.ell, row.seg_len))
    return TuneResult(best.n, best.r, tuple(rows))


@dataclass
class ComparisonResult:
    subject: str
    accuracy_unpruned: float
    accuracy_pruned: float
    n: int
    r: int
    tune: TuneResult
    params: ModelParams
    loss_curve: list[float] = field(default_factory=list)

    @property
    def pruned_length_ratio(self) -> float:
        return self.r / self.n

    @property
    def improvement(self) -> float:
        return self.accuracy_pruned - self.accuracy_unpruned


def run_comparison(
    train_set: TrialSet,
    test_set: TrialSet,
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    grid: TuneGrid | None = None,
    folds: int = 5,
    k: int = 3,
    params: ModelParams | None = None,
    progress=None,
) -> ComparisonResult:
    """CSP+LDA accuracy without pruning and with attention-based pruning.

    The network is trained on the training trials only, unless a trained
    ``params`` is supplied. Inputs are expected to be filtered already.
    """
    _require_labels(train_set, "train")
    _require_labels(test_set, "test")
    T = train_set.n_samples
    if test_set.n_samples != T:
        raise GridInvalid(f"train trials have T={T}, test trials T={test_set.n_samples}")
    grid = grid or default_grid(T)
    k = effective_pairs(k, train_set.n_channels)
    baseline = cspclf.evaluate(train_set, test_set, k).accuracy
    curve: list[float] = []
    if params is None:
        result = train(train_set, net_cfg, train_cfg, progress=progress)
        params, curve = result.params, result.loss_curve
    train_vec = attention_vectors(params, train_set)
    tuned = tune_rn(train_vec, train_set, grid, folds, train_cfg.seed, k)
    test_vec = attention_vectors(params, test_set)
    pruned_acc = cspclf.evaluate(
        prune_trialset(train_set, train_vec, tuned.prune), prune_trialset(test_set, test_vec, tuned.prune), k
    ).accuracy
    subject = train_set[0].subject_id
    log.info("subject %s: unpruned %.4f pruned %.4f (n=%d r=%d)", subject, baseline, pruned_acc, tuned.n, tuned.r)
    return ComparisonResult(subject, baseline, pruned_acc, tuned.n, tuned.r, tuned, params, curve)


@dataclass(frozen=True)
class SweepRow:
    ell: int
    seg_len: int
    accuracy: float


def sweep_segment_lengths(
    model: ModelParams | tuple[np.ndarray, np.ndarray],
    train_set: TrialSet,
    test_set: TrialSet,
    kept_lengths: Sequence[int] = SWEEP_KEPT_LENGTHS,
    segment_lengths: Sequence[int] = REFERENCE_SEGMENT_LENGTHS,
    k: int = 3,
) -> list[SweepRow]:
    """Test accuracy for every compatible (kept length, segment length) pair.

    The first row is the unpruned baseline (ell = seg_len = T).
    """
    T = train_set.n_samples
    k = effective_pairs(k, train_set.n_channels)
    for s in segment_lengths:
        if s < 1 or T % s:
            raise InconsistentPair(f"segment length {s} does not divide T={T}")
    for ell in kept_lengths:
        if not 1 <= ell <= T:
            raise InconsistentPair(f"kept length {ell} outside [1, T={T}]")
        if not any(ell % s == 0 for s in segment_lengths):
            raise InconsistentPair(f"kept length {ell} is not a multiple of any segment length")
    if isinstance(model, ModelParams):
        train_vec, test_vec = attention_vectors(model, train_set), attention_vectors(model, test_set)
    else:
        train_vec, test_vec = model
    rows = [SweepRow(T, T, cspclf.evaluate(train_set, test_set, k).accuracy)]
    for ell in kept_lengths:
        for s in segment_lengths:
            if ell % s:
                continue
            cfg = PruneConfig(T // s, ell // s)
            acc = cspclf.evaluate(
                prune_trialset(train_set, train_vec, cfg), prune_trialset(test_set, test_vec, cfg), k
            ).accuracy
            rows.append(SweepRow(ell, s, acc))
    return rows


# ---------------------------------------------------------------------------
# CSV output

REPORT_HEADER = ["subject", "scenario", "accuracy", "n", "r", "ell_over_T"]
SWEEP_HEADER = ["ell", "seg_len", "accuracy"]
CV_HEADER = ["seg_len", "ell", "n", "r", "cv_accuracy"]


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def report_rows(results: Sequence[ComparisonResult]) -> list[list]:
    rows = []
    for res in results:
        rows.append([res.subject, "unpruned", repr(res.accuracy_unpruned), 1, 1, repr(1.0)])
        rows.append([res.subject, "pruned", repr(res.accuracy_pruned), res.n, res.r, repr(res.pruned_length_ratio)])
    return rows


def write_report(path: str | Path, results: Sequence[ComparisonResult]) -> None:
    atomic_write_text(path, _csv_text(REPORT_HEADER, report_rows(results)))


def write_sweep(path: str | Path, rows: Sequence[SweepRow]) -> None:
    atomic_write_text(path, _csv_text(SWEEP_HEADER, [[r.ell, r.seg_len, repr(r.accuracy)] for r in rows]))


def write_cv_table(path: str | Path, tune: TuneResult) -> None:
    atomic_write_text(
        path, _csv_text(CV_HEADER, [[r.seg_len, r.ell, r.n, r.r, repr(r.cv_accuracy)] for r in tune.table])
    )


def read_report(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def summarize_report(rows: Sequence[dict]) -> str:
    """Human-readable per-subject table with accuracy deltas."""
    by_subject: dict[str, dict] = {}
    for row in rows:
        by_subject.setdefault(row["subject"], {})[row["scenario"]] = row
    lines = [f"{'subject':<12}{'unpruned':>10}{'pruned':>10}{'delta':>10}{'n':>5}{'r':>5}{'ell/T':>8}"]
    deltas = []
    for subject, sc in by_subject.items():
        if "pruned" not in sc or "unpruned" not in sc:
            continue
        a0, a1 = float(sc["unpruned"]["accuracy"]), float(sc["pruned"]["accuracy"])
        deltas.append(a1 - a0)
        p = sc["pruned"]
        lines.append(
            f"{subject:<12}{a0:>10.4f}{a1:>10.4f}{a1 - a0:>+10.4f}{p['n']:>5}{p['r']:>5}{float(p['ell_over_T']):>8.3f}"
        )
    if deltas:
        lines.append(f"{'mean':<12}{'':>10}{'':>10}{np.mean(deltas):>+10.4f}")
    return "\n".join(lines)
