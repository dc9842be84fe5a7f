"""Command-line pipeline: synth -> transform -> train -> eval -> stats,
plus an augmentation inspector and an end-to-end gradient check.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure.  Every command that produces artefacts writes a
``resolved_config.json`` echoing the effective settings next to them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import augment as aug
from . import dataio, kernels, metrics, train as training
from .errors import DataError, DualTsstError, NumericalError, UsageError
from .gradcheck import check_gradients
from .model import DualTsstModel, ModelConfig, config_from_preset
from .tensor import cross_entropy, no_grad

GRADCHECK_TOL = 1e-3


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of calling sys.exit."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_resolved(out_dir, payload: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(payload, indent=2) + "\n")


def _parse_window(text):
    if text is None:
        return None
    try:
        lo, hi = (float(v) for v in text.split(":"))
    except ValueError:
        raise UsageError(f"cannot parse window {text!r}; expected 'start:end' seconds")
    return (lo, hi)


def _parse_classes(text):
    """'8:0+1,20:2+3' -> two classes; channels default to all when omitted."""
    classes = []
    for part in text.split(","):
        if ":" in part:
            freq_s, ch_s = part.split(":", 1)
            channels = tuple(int(c) for c in ch_s.split("+"))
        else:
            freq_s, channels = part, None
        try:
            freq = float(freq_s)
        except ValueError:
            raise UsageError(f"cannot parse class spec {part!r}")
        classes.append(dataio.SynthClass(freq, channels))
    return classes


def _split_plan_from_args(args, preset=None, file_cfg=None) -> dataio.SplitPlan:
    """Split precedence: explicit flags > config file section > preset > defaults."""
    section = (file_cfg or {}).get("split") or {}
    mode = args.split or section.get("mode") or (preset.split_mode if preset else "kfold")
    k = args.k if args.k is not None else section.get("k", preset.kfold_k if preset else 5)
    fold = args.fold if args.fold is not None else section.get("fold", 0)
    seed = args.split_seed if args.split_seed is not None else section.get("seed", 0)
    return dataio.SplitPlan(mode=mode, k=k, fold=fold, seed=seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    p = dataio.preset(args.preset) if args.preset else None
    ch = args.ch if args.ch is not None else (p.n_channels if p else 4)
    n_times = args.t if args.t is not None else (p.n_times if p else 64)
    fs = args.fs if args.fs is not None else (p.fs if p else 128.0)
    if args.classes:
        classes = _parse_classes(args.classes)
    elif p is not None and p.synth_classes:
        classes = list(p.synth_classes)
    else:
        raise UsageError("--classes is required unless the preset defines them")
    ts = dataio.synth(args.n, ch, n_times, fs, classes, noise=args.noise, seed=args.seed)
    dataio.write_dataset(args.out, ts, name=args.name)
    _write_resolved(args.out, {
        "command": "synth",
        "preset": args.preset,
        "n_per_class": args.n,
        "n_channels": ch,
        "n_times": n_times,
        "fs": fs,
        "classes": [{"freq": c.freq, "channels": c.channels} for c in classes],
        "noise": args.noise,
        "seed": args.seed,
    })
    print(f"wrote {len(ts)} trials to {args.out}")
    return 0


def _cmd_transform(args) -> int:
    p = dataio.preset(args.preset) if args.preset else None
    freq_lo = args.freq_lo if args.freq_lo is not None else (p.freq_lo if p else 1.0)
    freq_hi = args.freq_hi if args.freq_hi is not None else (p.freq_hi if p else 40.0)
    freq_step = args.freq_step if args.freq_step is not None else (p.freq_step if p else 1.0)
    window = _parse_window(args.window) if args.window else (p.window if p else None)
    band = _parse_window(args.band) if args.band else (p.band if p else None)
    freqs = np.arange(freq_lo, freq_hi + 1e-9, freq_step)
    written = dataio.transform_dataset(args.data, freqs, band=band, window=window,
                                       force=args.force)
    _write_resolved(args.data, {
        "command": "transform",
        "freqs": [float(f) for f in freqs],
        "band": band,
        "window": window,
    })
    print(f"computed {written} TFR sidecars under {args.data}")
    return 0


def _cmd_augment(args) -> int:
    manifest = dataio.load_manifest(args.data)
    pool = dataio.load_trialset(args.data, require_tfr=True, normalize=False)
    spec = aug.AugmentSpec(segments=args.r, count=args.count)
    spec.validate(pool.n_times)
    rng = np.random.default_rng(args.seed)
    classes = sorted(int(c) for c in np.unique(pool.labels))
    eeg_out, tfr_out, labels_out = [], [], []
    for i in range(spec.count):
        label = classes[i % len(classes)]
        e, t = aug.segment_reassemble(pool, label, spec.segments, rng)
        eeg_out.append(e.data)
        tfr_out.append(t.data)
        labels_out.append(label)
    out_set = dataio.TrialSet(
        eeg=np.stack(eeg_out),
        labels=np.asarray(labels_out),
        fs=pool.fs,
        tfr=np.stack(tfr_out),
        freqs=pool.freqs,
        class_names=manifest.class_names,
    )
    dataio.write_dataset(args.out, out_set, name=manifest.name + "-augmented")
    _write_resolved(args.out, {
        "command": "augment",
        "source": str(args.data),
        "segments": args.r,
        "count": args.count,
        "seed": args.seed,
    })
    print(f"wrote {args.count} augmented trials to {args.out}")
    return 0


def _load_run_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise DataError(f"{path}: config must be a JSON object")
    # "command"/"data" appear in resolved_config.json echoes and are ignored,
    # so a resolved config can be replayed directly via --config
    allowed = {"model", "train", "preset", "seed", "backend", "split", "command", "data"}
    unknown = set(raw) - allowed
    if unknown:
        raise DataError(f"{path}: unknown config keys {sorted(unknown)}")
    for section, cls in (("model", ModelConfig), ("train", training.TrainConfig)):
        if section in raw:
            names = {f.name for f in dataclasses.fields(cls)}
            bad = set(raw[section]) - names
            if bad:
                raise DataError(f"{path}: unknown {section} keys {sorted(bad)}")
    return raw


def _apply_ablation(args, model_kwargs: dict, train_kwargs: dict) -> None:
    if args.no_transformer:
        model_kwargs["use_transformer"] = False
    if args.no_branch1:
        model_kwargs["use_branch1"] = False
    if args.no_b2_input1:
        model_kwargs["use_branch2_input1"] = False
    if args.no_b2_input2:
        model_kwargs["use_branch2_input2"] = False
    if args.no_augment:
        train_kwargs["augment_segments"] = 0


def _cmd_train(args) -> int:
    file_cfg = _load_run_config(args.config) if args.config else {}
    preset_name = args.preset or file_cfg.get("preset")
    p = dataio.preset(preset_name) if preset_name else None

    if args.backend != "auto":
        kernels.set_backend(args.backend)
    elif file_cfg.get("backend") and file_cfg["backend"] != "auto":
        kernels.set_backend(file_cfg["backend"])

    plan = _split_plan_from_args(args, p, file_cfg)
    train_set, test_set = dataio.load_dataset(args.data, plan, require_tfr=True)

    model_kwargs = dict(
        n_channels=train_set.n_channels,
        n_times=train_set.n_times,
        n_freqs=train_set.n_freqs,
        n_classes=len(train_set.class_names),
    )
    train_kwargs: dict = {}
    if p is not None:
        model_kwargs.update(p.model_overrides)
        train_kwargs.update(p.train_overrides)
        train_kwargs.setdefault("augment_segments", p.augment_segments)
    model_kwargs.update(file_cfg.get("model", {}))
    train_kwargs.update(file_cfg.get("train", {}))
    if args.epochs is not None:
        train_kwargs["epochs"] = args.epochs
    seed = args.seed
    if seed is None:
        seed = file_cfg.get("seed", train_kwargs.get("seed", 0))
    train_kwargs["seed"] = seed
    _apply_ablation(args, model_kwargs, train_kwargs)

    model_cfg = ModelConfig(**model_kwargs)
    train_cfg = training.TrainConfig(**train_kwargs)
    model_cfg.validate()
    train_cfg.validate()

    model = DualTsstModel(model_cfg, rng=training.init_rng_for_seed(seed),
                          dtype=np.dtype(train_cfg.dtype))

    _write_resolved(args.out, {
        "command": "train",
        "preset": preset_name,
        "seed": seed,
        "backend": kernels.get_backend(),
        "split": dataclasses.asdict(plan),
        "model": dataclasses.asdict(model_cfg),
        "train": dataclasses.asdict(train_cfg),
        "data": str(args.data),
    })

    def progress(entry):
        if not args.quiet and (entry.epoch % 10 == 0 or entry.epoch == train_cfg.epochs - 1):
            test = "" if entry.test_acc is None else f" test_acc={entry.test_acc:.3f}"
            print(f"epoch {entry.epoch:4d} lr={entry.lr:.2e} loss={entry.loss:.4f} "
                  f"train_acc={entry.train_acc:.3f}{test}")

    result = training.train_loop(model, train_set, train_cfg, test_set=test_set,
                                 out_dir=args.out, progress=progress)
    if result.best_test_acc is not None:
        print(f"best test accuracy {result.best_test_acc:.4f} at epoch {result.best_epoch}")
    print(f"artifacts in {args.out}")
    return 0


def _cmd_eval(args) -> int:
    model = DualTsstModel.load(args.model)
    p = dataio.preset(args.preset) if args.preset else None
    plan = _split_plan_from_args(args, p)
    _, test_set = dataio.load_dataset(args.data, plan, require_tfr=True)
    geometry = (test_set.n_channels, test_set.n_times, test_set.n_freqs)
    expected = (model.config.n_channels, model.config.n_times, model.config.n_freqs)
    if geometry != expected:
        raise DataError(f"dataset geometry {geometry} != model geometry {expected}")

    preds = training.evaluate(model, test_set)
    report = metrics.evaluate_predictions(
        test_set.labels, preds, test_set.class_names,
        config=dataclasses.asdict(model.config),
    )
    groups = {}
    for s in sorted(set(test_set.subjects)):
        idx = [i for i, subj in enumerate(test_set.subjects) if subj == s]
        groups[s] = (test_set.labels[idx], preds[idx])
    summary = metrics.subject_summary(groups, n_classes=len(test_set.class_names))
    report.extra["kappa_pooled"] = summary["kappa_pooled"]
    report.extra["kappa_mean"] = summary["kappa_mean"]
    if len(groups) > 1:
        report.extra["subjects"] = summary
    metrics.export_report(report, args.out)
    if args.features:
        with no_grad():
            feats = model.pooled_features(test_set.eeg, test_set.tfr)
        dataio.write_array(args.features, feats.data)
    _write_resolved(args.out, {
        "command": "eval",
        "model": str(args.model),
        "data": str(args.data),
        "split": dataclasses.asdict(plan),
    })
    print(f"accuracy={report.accuracy:.4f} kappa={report.kappa:.4f} n={report.n}")
    return 0


def _read_column(path) -> np.ndarray:
    try:
        values = [float(line) for line in Path(path).read_text().split()]
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read accuracy column from {path}: {exc}") from exc
    if not values:
        raise DataError(f"{path} contains no values")
    return np.asarray(values)


def _cmd_stats(args) -> int:
    a = _read_column(args.a)
    b = _read_column(args.b)
    if a.size != b.size:
        raise DataError(f"paired columns differ in length ({a.size} vs {b.size})")
    res = metrics.wilcoxon_signed_rank(a, b)
    if not res.defined:
        print("wilcoxon: undefined (all paired differences are zero)")
        return 0
    print(f"wilcoxon W={res.statistic:g} p={res.p_value:.6g} "
          f"(n_effective={res.n_effective}, {res.method})")
    if args.out:
        _write_resolved(args.out, {
            "command": "stats",
            "a": str(args.a),
            "b": str(args.b),
            "W": res.statistic,
            "p": res.p_value,
            "n_effective": res.n_effective,
            "method": res.method,
        })
    return 0


def _cmd_gradcheck(args) -> int:
    p = dataio.preset(args.preset)
    cfg = config_from_preset(p)
    rng = np.random.default_rng(args.seed)
    model = DualTsstModel(cfg, rng=rng)
    n = args.batch
    eeg = rng.normal(size=(n, cfg.n_channels, cfg.n_times))
    tfr = rng.normal(size=(n, cfg.n_channels, cfg.n_freqs, cfg.n_times))
    labels = rng.integers(0, cfg.n_classes, size=n)

    def loss_fn():
        return cross_entropy(model.forward(eeg, tfr, train=True), labels)

    result = check_gradients(loss_fn, model.params)
    print(f"gradcheck: max relative error {result.max_rel_error:.3e} "
          f"(worst: {result.worst_param}) over {model.param_count()} parameters")
    if not result.ok(GRADCHECK_TOL):
        raise NumericalError(
            f"gradient check failed: {result.max_rel_error:.3e} >= {GRADCHECK_TOL}"
        )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dualtsst", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--preset", choices=dataio.preset_names())
    sp.add_argument("--classes", help="e.g. '8:0+1,20:2+3' (freq Hz : channel list)")
    sp.add_argument("--n", type=int, default=48, help="trials per class")
    sp.add_argument("--ch", type=int)
    sp.add_argument("--t", type=int, help="samples per trial")
    sp.add_argument("--fs", type=float)
    sp.add_argument("--noise", type=float, default=0.5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--name", default="synth")
    sp.set_defaults(func=_cmd_synth)

    sp = sub.add_parser("transform", help="compute Morlet TFR sidecars")
    sp.add_argument("--data", required=True)
    sp.add_argument("--preset", choices=dataio.preset_names())
    sp.add_argument("--freq-lo", type=float)
    sp.add_argument("--freq-hi", type=float)
    sp.add_argument("--freq-step", type=float)
    sp.add_argument("--window", help="epoch window 'start:end' in seconds")
    sp.add_argument("--band", help="bandpass 'lo:hi' in Hz")
    sp.add_argument("--force", action="store_true", help="recompute existing sidecars")
    sp.set_defaults(func=_cmd_transform)

    sp = sub.add_parser("augment", help="write segment-reassembled trials")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--r", type=int, required=True, help="segments per trial")
    sp.add_argument("--count", type=int, default=32)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=_cmd_augment)

    sp = sub.add_parser("train", help="train a model")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON file with 'model'/'train' sections")
    sp.add_argument("--preset", choices=dataio.preset_names())
    sp.add_argument("--seed", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--split", choices=["session", "kfold"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--fold", type=int)
    sp.add_argument("--split-seed", type=int)
    sp.add_argument("--backend", choices=["auto", "numpy", "numba"], default="auto")
    sp.add_argument("--quiet", action="store_true")
    sp.add_argument("--no-transformer", action="store_true")
    sp.add_argument("--no-branch1", action="store_true")
    sp.add_argument("--no-b2-input1", action="store_true")
    sp.add_argument("--no-b2-input2", action="store_true")
    sp.add_argument("--no-augment", action="store_true")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--preset", choices=dataio.preset_names())
    sp.add_argument("--split", choices=["session", "kfold"])
    sp.add_argument("--k", type=int)
    sp.add_argument("--fold", type=int)
    sp.add_argument("--split-seed", type=int)
    sp.add_argument("--features", help="dump pre-classifier features to this tensor file")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("stats", help="Wilcoxon test on two per-subject accuracy columns")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=_cmd_stats)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    sp.add_argument("--preset", default="mini", choices=dataio.preset_names())
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--batch", type=int, default=2)
    sp.set_defaults(func=_cmd_gradcheck)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DualTsstError as exc:  # pragma: no cover - catch-all for new subtypes
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
