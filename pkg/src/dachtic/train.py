"""Training loop, stratified folds, warm-up diagnostics and the ablation matrix."""
from __future__ import annotations

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import objective as obj
from .dsp import EPS, PerturbationSpec, Spectrogram, pseudo_intervene, spec_augment
from .data import Sample
from .metrics import MetricsReport, PredictionRow, PredictionSet, evaluate
from .model import (EncoderConfig, ModelParams, encoder_config_from_dict, forward, init_params,
                    load_checkpoint, params_from_arrays, save_checkpoint)
from .objective import LossBreakdown, LossWeights
from .tensor import Tape, backward

log = logging.getLogger(__name__)

ABLATIONS = ("no_causal_mask", "no_perturbation", "no_grl", "no_multitask", "flat_encoder")
VARIANTS = ("full",) + ABLATIONS


@dataclass(frozen=True)
class TrainConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    learning_rate: float = 1e-3
    steps: int = 500
    batch_size: int = 8
    seed: int = 0
    folds: int = 5
    ablation: frozenset = frozenset()
    grl_lambda: float = 1.0
    grl_ramp: bool = False
    alpha_range: tuple[float, float] = (0.1, 0.5)
    spec_augment: bool = True
    time_masks: int = 1
    max_time_width: int = 8
    freq_masks: int = 1
    max_freq_width: int = 6
    max_pitch_shift: int = 3
    suppress_factor: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "ablation", frozenset(self.ablation))
        unknown = self.ablation - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation toggles: {sorted(unknown)}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.grl_lambda < 0:
            raise ValueError("grl_lambda must be >= 0")

    def effective_encoder(self) -> EncoderConfig:
        a = self.ablation
        return replace(self.encoder, grl_lambda=self.grl_lambda,
                       causal=self.encoder.causal and "no_causal_mask" not in a,
                       hierarchical=self.encoder.hierarchical and "flat_encoder" not in a,
                       multitask=self.encoder.multitask and "no_multitask" not in a,
                       domain_adversarial=self.encoder.domain_adversarial and "no_grl" not in a)

    def effective_weights(self) -> LossWeights:
        w, a = self.weights, self.ablation
        return replace(w,
                       perturb=0.0 if "no_perturbation" in a else w.perturb,
                       causal=0.0 if "no_multitask" in a else w.causal,
                       intensity=0.0 if "no_multitask" in a else w.intensity,
                       domain=0.0 if "no_grl" in a else w.domain)

    def variant(self, name: str) -> "TrainConfig":
        return replace(self, ablation=frozenset() if name == "full" else frozenset({name}))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablation"] = sorted(self.ablation)
        d["alpha_range"] = list(self.alpha_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["encoder"] = encoder_config_from_dict(d.get("encoder", {}))
        d["weights"] = LossWeights(**d.get("weights", {}))
        d["ablation"] = frozenset(d.get("ablation", ()))
        d["alpha_range"] = tuple(d.get("alpha_range", (0.1, 0.5)))
        return cls(**d)


# --- folds --------------------------------------------------------------------

@dataclass(frozen=True)
class FoldSplit:
    fold_id: int
    train_ids: tuple[int, ...]
    test_ids: tuple[int, ...]


def make_folds(labels: Sequence[int], k: int, seed: int = 0) -> list[FoldSplit]:
    """Stratified k-fold: each class is shuffled and dealt round-robin.

    The dealer position carries over between classes so overall fold sizes
    also differ by at most one.
    """
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be >= 2")
    classes, counts = np.unique(labels, return_counts=True)
    for c, n in zip(classes, counts):
        if n < k:
            raise ValueError(f"class {c} has {n} members, fewer than k={k}")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[] for _ in range(k)]
    cursor = 0
    for c in classes:
        members = np.flatnonzero(labels == c)
        for idx in rng.permutation(members):
            buckets[cursor % k].append(int(idx))
            cursor += 1
    everything = set(range(len(labels)))
    return [FoldSplit(f, tuple(sorted(everything - set(b))), tuple(sorted(b)))
            for f, b in enumerate(buckets)]


def splits_digest(splits: Iterable[FoldSplit]) -> str:
    h = hashlib.sha256()
    for s in splits:
        h.update(json.dumps([s.fold_id, s.test_ids]).encode())
    return h.hexdigest()[:16]


# --- optimisation state -------------------------------------------------------

@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> "TrainState":
        params = init_params(cfg.effective_encoder(), np.random.default_rng([cfg.seed, 0]))
        zeros = {k: np.zeros_like(p.data) for k, p in params.items()}
        return cls(params, zeros, {k: z.copy() for k, z in zeros.items()})

    def copy(self) -> "TrainState":
        return TrainState(self.params.copy(), {k: a.copy() for k, a in self.m.items()},
                          {k: a.copy() for k, a in self.v.items()}, self.step)


BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def adam_update(state: TrainState, grads: dict[str, np.ndarray], lr: float) -> None:
    state.step += 1
    b1c = 1.0 - BETA1 ** state.step
    b2c = 1.0 - BETA2 ** state.step
    for name, p in state.params.items():
        g = grads[name]
        state.m[name] = BETA1 * state.m[name] + (1.0 - BETA1) * g
        state.v[name] = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        p.data = p.data - lr * (state.m[name] / b1c) / (np.sqrt(state.v[name] / b2c) + ADAM_EPS)


def save_state(path: str | Path, state: TrainState, cfg: TrainConfig, extra: dict | None = None) -> None:
    arrays = dict(state.params.arrays())
    arrays.update({f"adam.m.{k}": a for k, a in state.m.items()})
    arrays.update({f"adam.v.{k}": a for k, a in state.v.items()})
    meta = {"step": state.step, "train_config": cfg.to_dict(),
            "rng_state": {"stream": "counter", "seed": cfg.seed, "step": state.step}}
    meta.update(extra or {})
    save_checkpoint(path, arrays, cfg.effective_encoder(), meta)


def load_state(path: str | Path) -> tuple[TrainState, TrainConfig, dict]:
    arrays, enc, meta = load_checkpoint(path)
    params = params_from_arrays(arrays, enc)
    cfg = TrainConfig.from_dict(meta["train_config"]) if "train_config" in meta \
        else TrainConfig(encoder=enc)
    m = {k: arrays.get(f"adam.m.{k}", np.zeros_like(p.data)) for k, p in params.items()}
    v = {k: arrays.get(f"adam.v.{k}", np.zeros_like(p.data)) for k, p in params.items()}
    return TrainState(params, m, v, int(meta.get("step", 0))), cfg, meta


# --- batches and perturbations ------------------------------------------------

def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices of the ``step``-th batch in a stream of seeded epoch permutations."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = np.random.default_rng([seed, 1, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset:offset + take].tolist())
    return np.array(out)


def non_salient_rows(sample: Sample, X: np.ndarray) -> np.ndarray:
    """Frames treated as non-causal: outside the salience mask, else the quietest third."""
    if sample.salience_frames is not None and len(sample.salience_frames) == X.shape[0]:
        return np.asarray(sample.salience_frames) == 0
    energy = X.mean(axis=1)
    return energy <= np.quantile(energy, 1.0 / 3.0)


def draw_perturbation(sample: Sample, X: np.ndarray, rng: np.random.Generator,
                      cfg: TrainConfig) -> PerturbationSpec:
    kinds = ["pitch_shift", "energy_suppress"]
    if sample.noise_profile is not None:
        kinds.append("noise_subtract")
    kind = kinds[int(rng.integers(len(kinds)))]
    seed = int(rng.integers(2 ** 31))
    if kind == "pitch_shift":
        shift = int(rng.integers(1, cfg.max_pitch_shift + 1)) * (1 if rng.random() < 0.5 else -1)
        return PerturbationSpec(kind, shift_bins=shift, rng_seed=seed)
    if kind == "energy_suppress":
        region = np.repeat(non_salient_rows(sample, X)[:, None], X.shape[1], axis=1)
        return PerturbationSpec(kind, region=region, suppress_factor=cfg.suppress_factor, rng_seed=seed)
    return PerturbationSpec(kind, noise_profile=sample.noise_profile, rng_seed=seed)


def intervene(sample: Sample, X: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    spec = draw_perturbation(sample, X, rng, cfg)
    return pseudo_intervene(Spectrogram(X, eps=EPS), spec).values


def prepare_batch(samples: Sequence[Sample], cfg: TrainConfig, rng: np.random.Generator,
                  need_perturbed: bool) -> tuple[np.ndarray, np.ndarray | None]:
    xs, xps = [], []
    for s in samples:
        X = s.X
        if cfg.spec_augment:
            X = spec_augment(Spectrogram(X, eps=EPS), cfg.time_masks, cfg.max_time_width,
                             cfg.freq_masks, cfg.max_freq_width, int(rng.integers(2 ** 31))).values
        xs.append(X)
        if need_perturbed:
            xps.append(intervene(s, X, rng, cfg))
    return np.stack(xs), (np.stack(xps) if need_perturbed else None)


# --- one optimisation step ----------------------------------------------------

def grl_schedule(cfg: TrainConfig, step: int) -> float:
    if not cfg.grl_ramp or cfg.steps == 0:
        return cfg.grl_lambda
    ramp = max(1, int(0.2 * cfg.steps))
    return cfg.grl_lambda * min(1.0, step / ramp)


def loss_terms(state: TrainState, cfg: TrainConfig, samples: Sequence[Sample], X: np.ndarray,
               Xp: np.ndarray | None, grl_lambda: float) -> dict:
    enc, w = cfg.effective_encoder(), cfg.effective_weights()
    out = forward(state.params, enc, X, grl_lambda=grl_lambda)
    terms = {"class": obj.class_loss(out.class_probs, [s.y for s in samples])}
    if Xp is not None:
        out_p = forward(state.params, enc, Xp, domain_branch=False)
        terms["perturb"] = obj.perturb_loss(out.class_probs, out_p.class_probs)
    if enc.multitask:
        if w.causal > 0 and all(s.a is not None for s in samples):
            terms["causal"] = obj.causal_loss(out.relevance, np.stack([s.a for s in samples]))
        if w.intensity > 0:
            terms["intensity"] = obj.intensity_loss(out.intensity, [s.t for s in samples])
    if out.domain_probs is not None and w.domain > 0:
        terms["domain"] = obj.domain_loss(out.domain_probs, [s.d for s in samples])
    return terms


def train_step(state: TrainState, samples: Sequence[Sample], cfg: TrainConfig,
               rng: np.random.Generator | None = None) -> tuple[TrainState, LossBreakdown]:
    """One joint update on the clean/augmented batch and its intervened twin."""
    if not samples:
        raise ValueError("empty batch")
    rng = np.random.default_rng([cfg.seed, 2, state.step]) if rng is None else rng
    w = cfg.effective_weights()
    X, Xp = prepare_batch(samples, cfg, rng, need_perturbed=w.perturb > 0)
    with Tape() as tape:
        tape.watch(*state.params.values())
        terms = loss_terms(state, cfg, samples, X, Xp, grl_schedule(cfg, state.step))
        try:
            total, breakdown = obj.compose(terms, w)
        except ValueError as exc:
            raise ValueError(f"step {state.step}: {exc}") from exc
    grads = backward(tape, total)
    adam_update(state, {k: grads[p.node_id] for k, p in state.params.items()}, cfg.learning_rate)
    return state, breakdown


@dataclass
class WarmupReport:
    mean_norms: dict[str, float]
    ratios: dict[str, float]
    flagged: list[str]


def warmup_report(state: TrainState, samples: Sequence[Sample], cfg: TrainConfig,
                  warmup_steps: int) -> WarmupReport:
    """Mean encoder-side gradient norm of each unweighted term over a short warm-up.

    Runs on a copy of ``state``; suggested ratios are norm(class) / norm(term)
    and are reported only, never applied.
    """
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be >= 1")
    work = state.copy()
    names = ("class", "perturb", "causal", "domain")
    sums = dict.fromkeys(names, 0.0)
    theta = work.params.theta_names
    for _ in range(warmup_steps):
        rng = np.random.default_rng([cfg.seed, 2, work.step])
        X, Xp = prepare_batch(samples, cfg, rng, need_perturbed=True)
        with Tape() as tape:
            tape.watch(*work.params.values())
            terms = loss_terms(work, replace(cfg, ablation=frozenset()), samples, X, Xp,
                               grl_schedule(cfg, work.step))
        for name in names:
            if name not in terms:
                continue
            g = backward(tape, terms[name])
            sums[name] += float(np.sqrt(sum(np.sum(g[work.params[k].node_id] ** 2) for k in theta)))
        train_step(work, samples, cfg, np.random.default_rng([cfg.seed, 2, work.step]))
    norms = {k: v / warmup_steps for k, v in sums.items()}
    ratios, flagged = {}, []
    for k, n in norms.items():
        if n == 0.0:
            ratios[k] = float("inf")
            flagged.append(k)
        else:
            ratios[k] = norms["class"] / n
    return WarmupReport(norms, ratios, flagged)


# --- evaluation ---------------------------------------------------------------

def _sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, 3, zlib.crc32(sample_id.encode())])


def predict(params: ModelParams, enc: EncoderConfig, samples: Sequence[Sample], cfg: TrainConfig,
            seen_domains: set[int] | None = None, chunk: int = 32) -> tuple[PredictionSet, np.ndarray]:
    """Clean and intervened predictions plus pooled features h_cls for each sample.

    Intervention draws depend only on (seed, sample_id), so every variant
    sees the same edits.
    """
    rows, feats = [], []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        X = np.stack([s.X for s in part])
        Xp = np.stack([intervene(s, s.X, _sample_rng(cfg.seed, s.sample_id), cfg) for s in part])
        out = forward(params, enc, X, domain_branch=False)
        out_p = forward(params, enc, Xp, domain_branch=False)
        feats.append(out.h_cls.data)
        for j, s in enumerate(part):
            rows.append(PredictionRow(
                s.sample_id, s.y, out.class_probs.data[j], s.d,
                True if seen_domains is None else s.d in seen_domains,
                None if out.relevance is None else out.relevance.data[j],
                s.a, out_p.class_probs.data[j]))
    return PredictionSet(rows), np.concatenate(feats) if feats else np.zeros((0, enc.width_d))


def domain_probe_accuracy(train_feats: np.ndarray, train_d, test_feats: np.ndarray, test_d) -> float | None:
    """Held-out accuracy of a logistic-regression probe predicting domain from h_cls."""
    from sklearn.linear_model import LogisticRegression

    train_d, test_d = np.asarray(train_d), np.asarray(test_d)
    if len(np.unique(train_d)) < 2 or len(test_d) == 0:
        return None
    probe = LogisticRegression(max_iter=2000)
    probe.fit(train_feats, train_d)
    return float(probe.score(test_feats, test_d))


# --- folds and ablations ------------------------------------------------------

@dataclass
class FoldResult:
    split: FoldSplit
    state: TrainState
    predictions: PredictionSet
    report: MetricsReport
    log: list[dict]


@dataclass
class TrainingResult:
    folds: list[FoldResult]
    report: MetricsReport
    config: TrainConfig


def train_fold(cfg: TrainConfig, dataset: Sequence[Sample], split: FoldSplit,
               on_step: Callable[[dict], None] | None = None) -> FoldResult:
    train = [dataset[i] for i in split.train_ids]
    test = [dataset[i] for i in split.test_ids]
    fold_cfg = replace(cfg, seed=cfg.seed * 1000 + split.fold_id)
    state = TrainState.fresh(fold_cfg)
    records = []
    for step in range(cfg.steps):
        idx = batch_indices(len(train), min(cfg.batch_size, len(train)), step, fold_cfg.seed)
        state, bd = train_step(state, [train[i] for i in idx], fold_cfg)
        rec = {"fold": split.fold_id, "step": step, **bd.as_dict()}
        records.append(rec)
        if on_step:
            on_step(rec)
    enc = cfg.effective_encoder()
    preds, test_feats = predict(state.params, enc, test, cfg)
    _, train_feats = predict(state.params, enc, train, cfg)
    report = evaluate(preds)
    report.domain_probe_accuracy = domain_probe_accuracy(
        train_feats, [s.d for s in train], test_feats, [s.d for s in test])
    return FoldResult(split, state, preds, report, records)


def run_training(cfg: TrainConfig, dataset: Sequence[Sample], splits: list[FoldSplit] | None = None,
                 only_folds: Iterable[int] | None = None,
                 on_step: Callable[[dict], None] | None = None) -> TrainingResult:
    """Train and evaluate one model per fold; the top-level report pools all test predictions."""
    splits = make_folds([s.y for s in dataset], cfg.folds, cfg.seed) if splits is None else splits
    chosen = set(range(len(splits))) if only_folds is None else set(only_folds)
    results = [train_fold(cfg, dataset, s, on_step) for s in splits if s.fold_id in chosen]
    pooled = PredictionSet([])
    for r in results:
        pooled.extend(r.predictions)
    report = evaluate(pooled)
    probes = [r.report.domain_probe_accuracy for r in results if r.report.domain_probe_accuracy is not None]
    report.domain_probe_accuracy = float(np.mean(probes)) if probes else None
    report.per_fold = [r.report for r in results]
    return TrainingResult(results, report, cfg)


@dataclass
class AblationResult:
    reports: dict[str, MetricsReport]
    seed: int
    digest: str

    def table(self) -> list[dict]:
        return [{"variant": v, "accuracy": r.accuracy, "macro_f1": r.macro_f1, "auc": r.auc,
                 "css": r.css, "cfi": r.cfi, "domain_probe_accuracy": r.domain_probe_accuracy,
                 "seed": self.seed, "splits": self.digest} for v, r in self.reports.items()]


def run_ablation(cfg: TrainConfig, dataset: Sequence[Sample], variants: Sequence[str] = VARIANTS,
                 only_folds: Iterable[int] | None = None) -> AblationResult:
    """Full model plus each variant on the same splits and seed."""
    variants = list(dict.fromkeys(["full", *variants]))
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    splits = make_folds([s.y for s in dataset], cfg.folds, cfg.seed)
    reports = {}
    for v in variants:
        log.info("ablation variant %s", v)
        reports[v] = run_training(cfg.variant(v), dataset, splits, only_folds).report
    return AblationResult(reports, cfg.seed, splits_digest(splits))
