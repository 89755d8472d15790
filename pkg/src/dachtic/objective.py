"""Loss terms and their weighted composition.

Every loss accepts either a single prediction or a batch (leading axis) and
returns a scalar Tensor averaged over the batch.  Class and domain labels are
zero-based indices.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    class_: float = 1.0
    perturb: float = 0.3
    causal: float = 0.2
    domain: float = 0.2
    intensity: float = 0.1

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {v}")

    def as_dict(self) -> dict[str, float]:
        return {"class": self.class_, "perturb": self.perturb, "causal": self.causal,
                "domain": self.domain, "intensity": self.intensity}


@dataclass(frozen=True)
class LossBreakdown:
    class_loss: float
    perturb_loss: float
    causal_loss: float
    domain_loss: float
    total: float
    intensity_loss: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {"class": self.class_loss, "perturb": self.perturb_loss, "causal": self.causal_loss,
                "domain": self.domain_loss, "intensity": self.intensity_loss, "total": self.total}


def _batched(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    return T.reshape(x, (1,) + x.shape) if x.ndim == 1 else x


def _labels(y, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if y.shape != (n_rows,):
        raise ValueError(f"expected {n_rows} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= n_classes) or not np.all(y == np.round(y)):
        raise ValueError(f"label out of range for {n_classes} classes: {y.tolist()}")
    return y.astype(int)


def cross_entropy(probs, y) -> Tensor:
    """Mean of -log p[y], with p floored at 1e-12."""
    p = _batched(probs)
    B, C = p.shape
    onehot = np.eye(C)[_labels(y, B, C)]
    logp = T.log(T.clamp(p, PROB_FLOOR, np.inf))
    return T.scalar_mul(T.sum_(T.mul(logp, onehot)), -1.0 / B)


def class_loss(probs, y) -> Tensor:
    return cross_entropy(probs, y)


def domain_loss(domain_probs, d) -> Tensor:
    # the encoder-side sign flip happens in the gradient reversal upstream
    return cross_entropy(domain_probs, d)


def perturb_loss(probs, probs_perturbed) -> Tensor:
    """Squared L2 distance between the two prediction vectors, batch-averaged."""
    a, b = _batched(probs), _batched(probs_perturbed)
    if a.shape != b.shape:
        raise ValueError(f"perturb_loss: shape mismatch {a.shape} vs {b.shape}")
    return T.scalar_mul(T.sum_(T.square(T.add(a, T.scalar_mul(b, -1.0)))), 1.0 / a.shape[0])


def causal_loss(relevance, salience) -> Tensor:
    """Token-averaged binary cross-entropy, probabilities clipped to [1e-12, 1 - 1e-12]."""
    c = _batched(relevance)
    a = np.asarray(salience, dtype=np.float64)
    if a.ndim == 1:
        a = a[None]
    if a.shape != c.shape:
        raise ValueError(f"causal_loss: shape mismatch {c.shape} vs {a.shape}")
    if not np.all((a == 0) | (a == 1)):
        raise ValueError("causal_loss: salience labels must be binary")
    c = T.clamp(c, PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos = T.mul(T.log(c), a)
    neg = T.mul(T.log(T.add(T.scalar_mul(c, -1.0), 1.0)), 1.0 - a)
    return T.scalar_mul(T.sum_(T.add(pos, neg)), -1.0 / c.size)


def intensity_loss(pred, target) -> Tensor:
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.broadcast_to(np.asarray(target, dtype=np.float64), pred.shape)
    return T.mean(T.square(T.add(pred, -target)))


def total_loss(class_: float, perturb: float, causal: float, domain: float, w: LossWeights,
               intensity: float = 0.0) -> LossBreakdown:
    """Weighted sum in the fixed order class, perturb, causal, domain, intensity."""
    parts = {"class": class_, "perturb": perturb, "causal": causal, "domain": domain,
             "intensity": intensity}
    for name, v in parts.items():
        if not math.isfinite(float(v)):
            raise ValueError(f"non-finite {name} loss: {v}")
    total = w.class_ * class_ + w.perturb * perturb + w.causal * causal + w.domain * domain
    if w.intensity and intensity:
        total = total + w.intensity * intensity
    return LossBreakdown(float(class_), float(perturb), float(causal), float(domain), float(total),
                         float(intensity))


def compose(terms: dict[str, Tensor], w: LossWeights) -> tuple[Tensor, LossBreakdown]:
    """Differentiable total over whichever ``terms`` are present.

    Uses the same operation order as :func:`total_loss` so the taped total and
    the breakdown's float total agree bit for bit.
    """
    weights = w.as_dict()
    total = None
    for name in ("class", "perturb", "causal", "domain", "intensity"):
        term = terms.get(name)
        if term is None or weights[name] == 0.0:
            continue
        if not np.isfinite(term.item()):
            raise ValueError(f"non-finite {name} loss: {term.item()}")
        weighted = T.scalar_mul(term, weights[name])
        total = weighted if total is None else T.add(total, weighted)
    if total is None:
        total = Tensor(0.0)
    values = {k: (terms[k].item() if terms.get(k) is not None else 0.0) for k in weights}
    breakdown = total_loss(values["class"], values["perturb"], values["causal"], values["domain"],
                           w, values["intensity"])
    if breakdown.total != total.item():
        raise AssertionError(f"loss composition drifted: {breakdown.total!r} vs {total.item()!r}")
    return total, breakdown
