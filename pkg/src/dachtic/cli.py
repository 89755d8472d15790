"""Command-line entry point: train, eval, ablate, heatmap and synth.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .data import (CRY_TYPES, ManifestEntry, Sample, load_dataset, load_manifest,
                   make_synthetic_dataset, prototype_spec, read_wav, synth_cry, write_manifest,
                   write_wav)
from .dsp import SAMPLE_RATE, Waveform, log_mel, resample
from .metrics import PredictionSet, evaluate
from .model import EncoderConfig, forward
from .objective import LossWeights
from .train import (VARIANTS, TrainConfig, load_state, make_folds, predict, run_ablation,
                    run_training, save_state)

log = logging.getLogger("dachtic")


class UsageError(Exception):
    """Bad flags or config keys; reported with exit code 2."""


# --- flat key-value config ----------------------------------------------------

def _parse_value(raw: str, current):
    raw = raw.strip()
    if isinstance(current, bool):
        if raw.lower() not in ("true", "false"):
            raise UsageError(f"expected true/false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, (tuple, frozenset)):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        if isinstance(current, tuple):
            return tuple(float(x) for x in items)
        return frozenset(items)
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Apply ``key = value`` lines onto ``base``; ``encoder.*`` and ``weights.*`` are nested."""
    cfg = base or TrainConfig()
    top, enc, wts = {}, {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        group, name = key.split(".", 1) if "." in key else ("", key)
        target = {"": (cfg, top), "encoder": (cfg.encoder, enc), "weights": (cfg.weights, wts)}.get(group)
        if target is None or name not in {f.name for f in fields(target[0])} or name == "encoder" \
                or name == "weights":
            raise UsageError(f"config line {lineno}: unknown key {key!r}")
        try:
            target[1][name] = _parse_value(value, getattr(target[0], name))
        except ValueError as exc:
            raise UsageError(f"config line {lineno}: bad value for {key}: {exc}") from None
    try:
        return replace(cfg, encoder=replace(cfg.encoder, **enc), weights=replace(cfg.weights, **wts),
                       **top)
    except ValueError as exc:
        raise UsageError(f"invalid config: {exc}") from None


def format_config(cfg: TrainConfig) -> str:
    lines = ["# resolved training configuration"]

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (tuple, frozenset)):
            return ",".join(str(x) for x in (sorted(v) if isinstance(v, frozenset) else v))
        return repr(v) if isinstance(v, float) else str(v)

    for f in fields(cfg):
        if f.name in ("encoder", "weights"):
            continue
        lines.append(f"{f.name} = {fmt(getattr(cfg, f.name))}")
    for group in ("encoder", "weights"):
        obj = getattr(cfg, group)
        for f in fields(obj):
            lines.append(f"{group}.{f.name} = {fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


# --- heatmaps -----------------------------------------------------------------

def upsample_scores(scores: np.ndarray, cfg: EncoderConfig, shape: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour map of [n_time, n_freq] token scores onto a [T, F] grid.

    Token (i, j) owns the stride cell starting at (i * stride_t, j * stride_f);
    frames past the last cell belong to the last token on that axis.
    """
    n_time, n_freq = scores.shape
    rows = np.minimum(np.arange(shape[0]) // cfg.stride_t, n_time - 1)
    cols = np.minimum(np.arange(shape[1]) // cfg.stride_f, n_freq - 1)
    return scores[np.ix_(rows, cols)]


def to_gray(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant map becomes mid-gray."""
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.round(255.0 * (values - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(path: Path, grid: np.ndarray) -> None:
    """[T, F] grid as a P5 image: time runs left to right, high frequencies on top."""
    img = to_gray(grid).T[::-1]
    h, w = img.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + np.ascontiguousarray(img).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a P5 image")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def heatmap_grids(state_params, enc: EncoderConfig, X: np.ndarray) -> dict[str, np.ndarray]:
    """Spectrogram, relevance and attention-mass grids, all shaped like ``X``."""
    out = forward(state_params, enc, X, domain_branch=False)
    n_time, n_freq = out.grid
    grids = {"spectrogram": X}
    if out.relevance is not None:
        grids["relevance"] = upsample_scores(out.relevance.data[0].reshape(n_time, n_freq), enc, X.shape)
    last = out.token_attention[-1][0]  # [heads, N, N]
    mass = last.sum(axis=-2).mean(axis=0)
    grids["attention"] = upsample_scores(mass.reshape(n_time, n_freq), enc, X.shape)
    return grids


# --- commands -----------------------------------------------------------------

def _domain_list(raw: str | None) -> list[int] | None:
    if raw is None:
        return None
    try:
        return [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"domain list must be comma-separated integers, got {raw!r}") from None


def _load_config(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        cfg = parse_config(Path(args.config).read_text(), cfg)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        overrides["steps"] = args.steps
    if getattr(args, "folds", None) is not None:
        overrides["folds"] = args.folds
    try:
        return replace(cfg, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _dataset(args, cfg: TrainConfig) -> list[Sample]:
    if args.synthetic is not None and args.manifest:
        raise UsageError("give either --synthetic or --manifest, not both")
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise UsageError("--synthetic needs a positive sample count")
        return make_synthetic_dataset(args.synthetic, cfg.encoder, seed=cfg.seed, clip_s=args.clip_s,
                                      alpha_range=cfg.alpha_range)
    if args.manifest:
        return load_dataset(load_manifest(args.manifest, cfg.encoder.n_domains), cfg.encoder,
                            args.clip_s)
    raise UsageError("a dataset is required: pass --manifest PATH or --synthetic N")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = _dataset(args, cfg)
    out = _out_dir(args)
    lines: list[str] = []
    result = run_training(cfg, dataset, on_step=lambda rec: lines.append(json.dumps(rec, sort_keys=True)))
    (out / "train.log").write_text("\n".join(lines) + ("\n" if lines else ""))
    for fold in result.folds:
        save_state(out / f"fold{fold.split.fold_id}.ckpt", fold.state, cfg,
                   {"fold": fold.split.fold_id, "test_ids": list(fold.split.test_ids)})
    (out / "report.txt").write_text(result.report.to_text())
    (out / "confusion.csv").write_text(result.report.confusion_csv(CRY_TYPES[:cfg.encoder.n_classes]))
    (out / "config.txt").write_text(format_config(cfg))
    print(f"accuracy {result.report.accuracy:.4f} over {result.report.n_samples} held-out samples")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint")
    state, cfg, _ = load_state(args.checkpoint)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    dataset = _dataset(args, cfg)
    domains = sorted({s.d + 1 for s in dataset})
    seen, unseen = _domain_list(args.seen_domains), _domain_list(args.unseen_domains)
    if seen is not None and not seen:
        raise UsageError("--seen-domains is empty")
    if seen is None and unseen is None:
        seen = domains
    elif seen is None:
        seen = [d for d in domains if d not in unseen]
    elif unseen is None:
        unseen = [d for d in domains if d not in seen]
    unseen = unseen or []
    if set(seen) & set(unseen):
        raise UsageError("seen and unseen domain lists overlap")
    if set(seen) | set(unseen) != set(domains):
        raise UsageError(f"domain lists must partition the dataset's domains {domains}")
    if not seen:
        raise UsageError("no seen domains")
    preds, _ = predict(state.params, cfg.effective_encoder(), dataset, cfg,
                       seen_domains={d - 1 for d in seen})
    report = evaluate(preds)
    out = _out_dir(args)
    (out / "report.txt").write_text(report.to_text())
    (out / "confusion.csv").write_text(report.confusion_csv(CRY_TYPES[:cfg.encoder.n_classes]))
    print(f"accuracy {report.accuracy:.4f}; domain_gap "
          f"{'NA' if report.domain_gap is None else report.domain_gap}")
    return 0


ABLATION_COLUMNS = ["variant", "accuracy", "macro_f1", "auc", "css", "cfi", "domain_probe_accuracy",
                    "seed", "splits"]


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    variants = VARIANTS[1:] if args.variants is None else [v.strip() for v in args.variants.split(",")
                                                           if v.strip()]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {', '.join(VARIANTS)}")
    dataset = _dataset(args, cfg)
    out = _out_dir(args)
    result = run_ablation(cfg, dataset, variants)
    buf = io.StringIO()
    w = csv.DictWriter(buf, ABLATION_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in result.table():
        w.writerow({k: ("NA" if v is None else repr(v) if isinstance(v, float) else v)
                    for k, v in row.items()})
    (out / "ablation.csv").write_text(buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def cmd_heatmap(args) -> int:
    if not args.checkpoint or not args.sample:
        raise UsageError("heatmap needs --checkpoint and --sample")
    state, cfg, _ = load_state(args.checkpoint)
    w = read_wav(args.sample)
    if w.sample_rate_hz != SAMPLE_RATE:
        w = resample(w, SAMPLE_RATE)
    X = log_mel(w).values
    enc = cfg.effective_encoder()
    try:
        n_time, n_freq = enc.grid(*X.shape)
    except ValueError as exc:
        raise ValueError(f"sample does not fit the checkpoint's patch grid: {exc}") from None
    if n_time * n_freq > enc.max_positions:
        raise ValueError(f"sample needs {n_time * n_freq} positions, checkpoint supports {enc.max_positions}")
    out = _out_dir(args)
    stem = Path(args.sample).stem
    for name, grid in heatmap_grids(state.params, enc, X).items():
        write_pgm(out / f"{stem}.{name}.pgm", grid)
    print(f"wrote heatmaps for {stem} ({X.shape[0]} frames x {X.shape[1]} bands)")
    return 0


def cmd_synth(args) -> int:
    if args.synthetic is None or args.synthetic < 1:
        raise UsageError("synth needs --synthetic N with N >= 1")
    cfg = _load_config(args)
    out = _out_dir(args)
    n_classes = min(cfg.encoder.n_classes, len(CRY_TYPES))
    entries = []
    for i in range(args.synthetic):
        y, d = i % n_classes, (i // n_classes) % cfg.encoder.n_domains
        clip = synth_cry(prototype_spec(y, d, cfg.seed * 100003 + i, args.clip_s,
                                        alpha_range=cfg.alpha_range), args.clip_s)
        sid = f"syn{cfg.seed}-{i:04d}"
        write_wav(out / f"{sid}.wav", clip.waveform)
        entries.append(ManifestEntry(sid, out / f"{sid}.wav", CRY_TYPES[y], d + 1, round(clip.t, 6)))
    write_manifest(out / "manifest.csv", entries)
    print(f"wrote {len(entries)} clips and manifest.csv")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "heatmap": cmd_heatmap,
            "synth": cmd_synth}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dachtic", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic clips")
        p.add_argument("--manifest", help="manifest of WAV clips")
        p.add_argument("--clip-s", type=float, default=1.0, help="clip length in seconds")
        if name in ("train", "ablate"):
            p.add_argument("--steps", type=int)
            p.add_argument("--folds", type=int)
        if name == "ablate":
            p.add_argument("--variants", help="comma-separated ablations; full is always included")
        if name in ("eval", "heatmap"):
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--seen-domains")
            p.add_argument("--unseen-domains")
        if name == "heatmap":
            p.add_argument("--sample", help="WAV file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dachtic {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"dachtic {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
