"""Classification, counterfactual-stability and salience-fidelity metrics."""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction

import numpy as np

REPORT_VERSION = "dachtic-report/1"


@dataclass
class PredictionRow:
    sample_id: str
    y: int
    probs: np.ndarray
    d: int = 0
    seen_domain: bool = True
    relevance: np.ndarray | None = None
    salience: np.ndarray | None = None
    probs_perturbed: np.ndarray | None = None


@dataclass
class PredictionSet:
    rows: list[PredictionRow] = field(default_factory=list)

    def __post_init__(self):
        for r in self.rows:
            _check_simplex(r.probs, r.sample_id)
            if r.probs_perturbed is not None:
                _check_simplex(r.probs_perturbed, r.sample_id)

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def n_classes(self) -> int:
        return len(self.rows[0].probs)

    def labels(self) -> np.ndarray:
        return np.array([r.y for r in self.rows], dtype=int)

    def scores(self) -> np.ndarray:
        return np.stack([r.probs for r in self.rows])

    def subset(self, seen: bool) -> "PredictionSet":
        return PredictionSet([r for r in self.rows if r.seen_domain == seen])

    def extend(self, other: "PredictionSet") -> None:
        self.rows.extend(other.rows)


def _check_simplex(p, sid) -> None:
    p = np.asarray(p)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"{sid}: probabilities do not form a simplex")


def confusion_accuracy_f1(preds: PredictionSet):
    """Returns (confusion [C, C], accuracy, per-class F1, macro F1); rows are true classes."""
    if len(preds) == 0:
        raise ValueError("empty prediction set")
    C = preds.n_classes
    confusion = np.zeros((C, C), dtype=np.int64)
    for r in preds.rows:
        confusion[r.y, int(np.argmax(r.probs))] += 1
    tp = np.diag(confusion).astype(float)
    predicted = confusion.sum(axis=0)
    actual = confusion.sum(axis=1)
    f1 = np.zeros(C)
    for c in range(C):
        p = tp[c] / predicted[c] if predicted[c] else 0.0
        rcl = tp[c] / actual[c] if actual[c] else 0.0
        f1[c] = 2 * p * rcl / (p + rcl) if p + rcl else 0.0
    accuracy = float(np.trace(confusion) / confusion.sum())
    return confusion, accuracy, f1, float(f1.mean())


def binary_auroc(scores, labels) -> float:
    """Mann-Whitney AUROC; tied positive/negative pairs count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_macro(preds: PredictionSet) -> float:
    y = preds.labels()
    S = preds.scores()
    aucs = []
    for c in range(preds.n_classes):
        pos = y == c
        if pos.all() or not pos.any():
            warnings.warn(f"class {c} has no positives or no negatives; skipped in AUROC")
            continue
        aucs.append(binary_auroc(S[:, c], pos))
    if not aucs:
        raise ValueError("every class is degenerate; AUROC undefined")
    return float(np.mean(aucs))


def css(preds: PredictionSet) -> float:
    """Fraction of samples whose predicted class survives the pseudo-intervention."""
    if len(preds) == 0:
        raise ValueError("empty prediction set")
    agree = []
    for r in preds.rows:
        if r.probs_perturbed is None:
            raise ValueError(f"{r.sample_id}: missing perturbed prediction")
        agree.append(np.argmax(r.probs) == np.argmax(r.probs_perturbed))
    return float(np.mean(agree))


def css_total_variation(preds: PredictionSet) -> float:
    """Continuous diagnostic: 1 - mean total-variation distance between the two predictions."""
    tv = [0.5 * np.abs(np.asarray(r.probs) - np.asarray(r.probs_perturbed)).sum()
          for r in preds.rows if r.probs_perturbed is not None]
    if not tv:
        raise ValueError("no perturbed predictions")
    return float(1.0 - np.mean(tv))


def cfi(preds: PredictionSet) -> float:
    """Token-pooled AUROC of predicted relevance against binary salience."""
    scores, labels = [], []
    for r in preds.rows:
        if r.relevance is None or r.salience is None:
            raise ValueError(f"{r.sample_id}: relevance or salience missing")
        if len(r.relevance) != len(r.salience):
            raise ValueError(f"{r.sample_id}: relevance/salience length mismatch")
        scores.append(np.asarray(r.relevance, dtype=np.float64))
        labels.append(np.asarray(r.salience))
    s, a = np.concatenate(scores), np.concatenate(labels)
    if np.all(a == a[0]):
        raise ValueError("no contrast in salience labels")
    return binary_auroc(s, a == 1)


def domain_gap(acc_seen: float, acc_unseen: float) -> float:
    """Absolute accuracy drop in percentage points, computed in decimal."""
    for v in (acc_seen, acc_unseen):
        if not 0.0 <= v <= 100.0:
            raise ValueError(f"accuracy {v} outside [0, 100]")
    return float(abs(Decimal(repr(float(acc_seen))) - Decimal(repr(float(acc_unseen)))))


def percent(x: float) -> str:
    """Fraction shown as a percentage, one decimal, halves away from zero."""
    return str(Decimal(repr(x * 100.0)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    auc: float | None
    confusion: np.ndarray
    per_class_f1: np.ndarray
    css: float | None = None
    css_tv: float | None = None
    cfi: float | None = None
    domain_gap: float | None = None
    domain_probe_accuracy: float | None = None
    n_samples: int = 0
    per_fold: list["MetricsReport"] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def summary(self) -> dict[str, float | None]:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "auc": self.auc,
                "css": self.css, "css_tv": self.css_tv, "cfi": self.cfi,
                "domain_gap": self.domain_gap, "domain_probe_accuracy": self.domain_probe_accuracy}

    def to_text(self) -> str:
        lines = [f"version = {REPORT_VERSION}"]

        def emit(prefix, rep):
            lines.append(f"{prefix}n_samples = {rep.n_samples}")
            for k, v in rep.summary().items():
                lines.append(f"{prefix}{k} = {'NA' if v is None else repr(float(v))}")
            lines.append(f"{prefix}per_class_f1 = " + ",".join(repr(float(x)) for x in rep.per_class_f1))
            lines.append(f"{prefix}confusion = " + ";".join(
                ",".join(str(int(v)) for v in row) for row in rep.confusion))
            for note in rep.notes:
                lines.append(f"{prefix}note = {note}")

        emit("", self)
        for i, fold in enumerate(self.per_fold):
            emit(f"fold{i}.", fold)
        return "\n".join(lines) + "\n"

    def confusion_csv(self, class_names=None) -> str:
        C = self.confusion.shape[0]
        names = list(class_names) if class_names else [str(i) for i in range(C)]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + names)
        for name, row in zip(names, self.confusion):
            w.writerow([name] + [int(v) for v in row])
        return buf.getvalue()


def evaluate(preds: PredictionSet) -> MetricsReport:
    """All metrics computable from ``preds``; absent inputs leave a field as None."""
    confusion, acc, f1, macro = confusion_accuracy_f1(preds)
    notes = []
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            auc = auc_macro(preds)
    except ValueError:
        auc = None
        notes.append("auc undefined: no class has both positives and negatives")
    have_pert = all(r.probs_perturbed is not None for r in preds.rows)
    have_sal = all(r.relevance is not None and r.salience is not None for r in preds.rows)
    cfi_value = None
    if have_sal:
        try:
            cfi_value = cfi(preds)
        except ValueError as exc:
            notes.append(f"cfi undefined: {exc}")
    gap = None
    seen, unseen = preds.subset(True), preds.subset(False)
    if len(seen) and len(unseen):
        gap = domain_gap(_percent_correct(seen), _percent_correct(unseen))
    elif not len(unseen):
        notes.append("domain_gap omitted: no unseen-domain samples")
    return MetricsReport(acc, macro, auc, confusion, f1,
                         css=css(preds) if have_pert else None,
                         css_tv=css_total_variation(preds) if have_pert else None,
                         cfi=cfi_value, domain_gap=gap, n_samples=len(preds), notes=notes)


def _percent_correct(preds: PredictionSet) -> float:
    # exact ratio first, so 976 of 1000 becomes the float nearest 97.6
    correct = sum(int(np.argmax(r.probs) == r.y) for r in preds.rows)
    return float(Fraction(100 * correct, len(preds)))


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if "=" in line and not line.startswith("#"):
            k, v = line.split("=", 1)
            out.setdefault(k.strip(), v.strip())
    return out


def fmt(x: float | None) -> str:
    return "NA" if x is None or (isinstance(x, float) and math.isnan(x)) else percent(x)
