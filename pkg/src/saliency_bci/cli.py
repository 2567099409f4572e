"""Command-line interface.

Every option can also come from a ``key = value`` config file passed with
``--config``; keys are the long flag names (``csp-pairs`` or ``csp_pairs``).
Precedence: flags > config file > built-in defaults.

Exit codes: 0 success, 1 usage error, 2 data/validation error,
3 numerical failure.
"""

from __future__ import annotations

import os

_threads = os.environ.get("SALIENCY_BCI_THREADS", "0").strip()
if _threads not in ("", "0"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import io
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import __version__, cspclf, pipeline
from .attnet import (
    NetConfig,
    TrainConfig,
    gradcheck,
    load_model,
    save_model,
    train,
)
from .dsp import design_bandpass, filter_trialset
from .errors import DataError, NumericalError, SaliencyBciError
from .saliency import PruneConfig, attention_vectors, prune_trialset
from .trialio import (
    Session,
    SynthSpec,
    TrialSet,
    atomic_write_text,
    generate_synthetic,
    load_trialset,
    read_keyvalue,
    save_trialset,
)

log = logging.getLogger("saliency_bci")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class UsageError(Exception):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in str(text).replace(" ", "").split(",") if v)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# name -> (type, default, help)
OPTIONS: dict[str, tuple] = {
    # data
    "data": (Path, None, "trial-set manifest; train/test split by its session column"),
    "train": (Path, None, "manifest of training trials (overrides the session split)"),
    "test": (Path, None, "manifest of test trials (overrides the session split)"),
    "out": (Path, None, "output path"),
    "model": (Path, None, "model file written by `train`"),
    "sample-rate": (float, None, "sample rate in Hz when the manifest has no .meta sidecar (default 250)"),
    # filter
    "low": (float, 4.0, "bandpass low edge, Hz"),
    "high": (float, 40.0, "bandpass high edge, Hz"),
    "order": (int, 5, "Butterworth prototype order"),
    "filter": (_bool, True, "bandpass-filter trials before processing"),
    # network
    "m": (int, 5, "embedding kernels"),
    "d": (int, 4, "embedding kernel width, samples"),
    "h": (int, 4, "LSTM hidden size"),
    "nk": (int, 4, "query/key dimension"),
    "nv": (int, 4, "value dimension"),
    "p1": (float, 0.6, "fraction of time samples masked during training"),
    "p2": (float, 0.4, "fraction of channels zeroed at each masked time sample"),
    "dense": (_int_list, (5, 10, 15), "dense head hidden sizes, comma-separated"),
    # training
    "epochs": (int, 300, "training epochs"),
    "lr": (float, 1e-3, "learning rate"),
    "batch-size": (int, 8, "trials per optimizer step"),
    "optimizer": (str, "adam", "adam or sgd"),
    "beta1": (float, 0.9, "first-moment decay"),
    "beta2": (float, 0.999, "second-moment decay"),
    "eps": (float, 1e-8, "adaptive-moment epsilon"),
    "seed": (int, 0, "random seed"),
    "loss-out": (Path, None, "optional CSV of per-epoch training loss"),
    # pruning / tuning / evaluation
    "n": (int, None, "number of segments"),
    "r": (int, None, "number of kept segments"),
    "seg-lens": (_int_list, None, "segment lengths T/n (default: grid for T)"),
    "kept-lens": (_int_list, None, "kept lengths r*T/n (default: grid for T)"),
    "folds": (int, 5, "cross-validation folds"),
    "csp-pairs": (int, 3, "CSP filter pairs"),
    "subject": (str, None, "subject id recorded in the report (default: from the data)"),
    "reports": (str, None, "comma-separated report CSVs to summarize"),
    # synthetic data
    "n-c": (int, 22, "channels"),
    "T": (int, 1000, "samples per trial"),
    "trials-per-class": (int, 20, "trials per class and session"),
    "salient-start": (int, 250, "planted interval start sample"),
    "salient-len": (int, 500, "planted interval length, samples"),
    "band-left": (str, "9,11", "left-class band 'lo,hi' in Hz"),
    "band-right": (str, "19,23", "right-class band 'lo,hi' in Hz"),
    "snr-db": (float, 0.0, "planted power relative to noise, dB"),
    "remainder-gain-db": (float, 0.0, "noise gain outside the planted interval, dB"),
    "distractor-db": (float, None, "class-independent activity outside the interval, dB (off if unset)"),
    "distractor-mimics-class": (_bool, False, "distractor copies a random class's band and pattern"),
}

COMMANDS: dict[str, tuple[str, list[str]]] = {
    "synth": ("generate a synthetic train+test trial set", [
        "out", "n-c", "T", "trials-per-class", "salient-start", "salient-len", "band-left", "band-right",
        "snr-db", "remainder-gain-db", "distractor-db", "distractor-mimics-class", "sample-rate", "seed", "subject",
    ]),
    "filter": ("bandpass-filter a trial set", ["data", "out", "low", "high", "order", "sample-rate"]),
    "train": ("train the saliency network on the training trials", [
        "data", "model", "loss-out", "m", "d", "h", "nk", "nv", "p1", "p2", "dense", "epochs", "lr",
        "batch-size", "optimizer", "beta1", "beta2", "eps", "seed", "sample-rate",
    ]),
    "gradcheck": ("compare analytic and finite-difference gradients", ["seed"]),
    "attend": ("write per-trial attention vectors as CSV", ["data", "model", "out", "sample-rate"]),
    "prune": ("prune trials to their most attended segments", ["data", "model", "out", "n", "r", "sample-rate"]),
    "tune": ("choose n and r by cross-validation", [
        "data", "train", "model", "out", "seg-lens", "kept-lens", "folds", "csp-pairs", "seed", "sample-rate",
    ]),
    "eval": ("CSP+LDA accuracy of train/test trials", ["data", "train", "test", "out", "csp-pairs", "sample-rate"]),
    "compare": ("unpruned vs attention-pruned CSP+LDA accuracy", [
        "data", "train", "test", "out", "model", "filter", "low", "high", "order", "m", "d", "h", "nk", "nv",
        "p1", "p2", "dense", "epochs", "lr", "batch-size", "optimizer", "beta1", "beta2", "eps", "seed",
        "seg-lens", "kept-lens", "folds", "csp-pairs", "subject", "loss-out", "sample-rate",
    ]),
    "sweep": ("accuracy over kept lengths and segment lengths", [
        "data", "train", "test", "model", "out", "seg-lens", "kept-lens", "csp-pairs", "sample-rate",
    ]),
    "report": ("summarize report CSVs written by `compare`", ["reports", "out"]),
}


def _key(name: str) -> str:
    return name.replace("-", "_")


KNOWN_KEYS = {_key(name) for name in OPTIONS} | {"config"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="saliency-bci", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, (help_text, names) in COMMANDS.items():
        keys = ", ".join(names)
        p = sub.add_parser(
            cmd, help=help_text, description=f"{help_text}.\n\nConfig-file keys read: {keys}",
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", type=Path, default=None, help="key = value file; flags override it")
        p.add_argument("-v", "--verbose", action="store_true", default=None, help="debug logging")
        for name in names:
            typ, default, helptext = OPTIONS[name]
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            p.add_argument(
                f"--{name}", dest=_key(name), type=typ, default=None,
                help=f"{helptext} (default: {shown})" if shown is not None else helptext,
            )
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge flags, config file and defaults for the chosen subcommand."""
    names = COMMANDS[args.command][1]
    config = {}
    if args.config is not None:
        raw = read_keyvalue(args.config)
        for key, value in raw.items():
            if _key(key) not in KNOWN_KEYS:
                raise DataError(f"{args.config}: unknown config key {key!r}")
            config[_key(key)] = value
    out = {}
    for name in names:
        key = _key(name)
        typ, default, _ = OPTIONS[name]
        value = getattr(args, key)
        if value is None and key in config:
            try:
                value = typ(config[key])
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise DataError(f"{args.config}: bad value for {name!r}: {exc}") from None
        out[key] = default if value is None else value
    return out


def _require(cfg: dict, *names: str) -> None:
    for name in names:
        if cfg.get(_key(name)) is None:
            raise UsageError(f"missing required option --{name}")


def _load(path: Path, cfg: dict) -> TrialSet:
    return load_trialset(path, cfg.get("sample_rate"))


def _split(cfg: dict) -> tuple[TrialSet, TrialSet | None]:
    """Training and test trials from --train/--test or the session column of --data."""
    if cfg.get("train") is not None:
        train_set = _load(cfg["train"], cfg)
        test_set = _load(cfg["test"], cfg) if cfg.get("test") is not None else None
        return train_set, test_set
    _require(cfg, "data")
    full = _load(cfg["data"], cfg)
    tr = [t for t in full if t.session is Session.TRAIN]
    te = [t for t in full if t.session is Session.TEST]
    if not tr:
        raise DataError(f"{cfg['data']}: no trials in session 'train'")
    return TrialSet(tuple(tr)), (TrialSet(tuple(te)) if te else None)


def _net_cfg(cfg: dict, n_c: int) -> NetConfig:
    return NetConfig(
        m=cfg["m"], d=cfg["d"], h=cfg["h"], n_k=cfg["nk"], n_v=cfg["nv"], n_c=n_c,
        dense_hidden=cfg["dense"], p1=cfg["p1"], p2=cfg["p2"],
    )


def _train_cfg(cfg: dict) -> TrainConfig:
    if cfg["optimizer"] not in ("adam", "sgd"):
        raise DataError(f"--optimizer must be adam or sgd, got {cfg['optimizer']!r}")
    return TrainConfig(
        epochs=cfg["epochs"], learning_rate=cfg["lr"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        optimizer=cfg["optimizer"], moment_decays=(cfg["beta1"], cfg["beta2"]), epsilon_hat=cfg["eps"],
    )


def _grid(cfg: dict, T: int) -> pipeline.TuneGrid:
    base = pipeline.default_grid(T)
    return pipeline.TuneGrid(cfg.get("seg_lens") or base.segment_lengths, cfg.get("kept_lens") or base.kept_lengths)


def _band(text: str, name: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise DataError(f"--{name} must be 'lo,hi', got {text!r}") from None
    return lo, hi


def _progress(epoch: int, loss: float) -> None:
    if epoch == 1 or epoch % 25 == 0:
        log.info("epoch %d: loss %.6g", epoch, loss)


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


def _filter(cfg: dict, trials: TrialSet) -> TrialSet:
    return filter_trialset(design_bandpass(cfg["order"], cfg["low"], cfg["high"], trials.sample_rate_hz), trials)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: dict) -> int:
    _require(cfg, "out")
    spec = SynthSpec(
        n_c=cfg["n_c"], T=cfg["T"], trials_per_class=cfg["trials_per_class"],
        salient_start=cfg["salient_start"], salient_len=cfg["salient_len"],
        class_band_hz=(_band(cfg["band_left"], "band-left"), _band(cfg["band_right"], "band-right")),
        snr_db=cfg["snr_db"], seed=cfg["seed"], sample_rate_hz=cfg["sample_rate"] or 250.0,
        remainder_gain_db=cfg["remainder_gain_db"], distractor_db=cfg["distractor_db"],
        distractor_mimics_class=cfg["distractor_mimics_class"], subject_id=cfg["subject"] or "synth",
    )
    train_set = generate_synthetic(spec)
    test_set = generate_synthetic(replace(spec, seed=spec.seed + 1, session=Session.TEST))
    manifest = save_trialset(TrialSet(train_set.trials + test_set.trials), cfg["out"])
    print(manifest)
    return EXIT_OK


def cmd_filter(cfg: dict) -> int:
    _require(cfg, "data", "out")
    trials = _filter(cfg, _load(cfg["data"], cfg))
    print(save_trialset(trials, cfg["out"]))
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    _require(cfg, "data", "model")
    train_set, _ = _split(cfg)
    net = _net_cfg(cfg, train_set.n_channels)
    result = train(train_set, net, _train_cfg(cfg), progress=_progress)
    save_model(cfg["model"], result.params, net)
    if cfg.get("loss_out") is not None:
        _write_csv(cfg["loss_out"], ["epoch", "loss"], [[i + 1, repr(v)] for i, v in enumerate(result.loss_curve)])
    print(f"final loss {result.loss_curve[-1]:.6g}")
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    errors = gradcheck(cfg["seed"])
    worst = max(errors.values())
    for name, err in errors.items():
        log.debug("%s: %.3e", name, err)
    print(f"max relative gradient error {worst:.3e}")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_NUMERIC


def cmd_attend(cfg: dict) -> int:
    _require(cfg, "data", "model", "out")
    params, _ = load_model(cfg["model"])
    trials = _load(cfg["data"], cfg)
    vec = attention_vectors(params, trials)
    _write_csv(cfg["out"], ["trial_id"] + [f"a{t}" for t in range(vec.shape[1])],
               [[t.trial_id, *map(repr, a.tolist())] for t, a in zip(trials, vec)])
    return EXIT_OK


def cmd_prune(cfg: dict) -> int:
    _require(cfg, "data", "model", "out", "n", "r")
    params, _ = load_model(cfg["model"])
    trials = _load(cfg["data"], cfg)
    prune = PruneConfig(cfg["n"], cfg["r"])
    prune.segment_length(trials.n_samples)
    print(save_trialset(prune_trialset(trials, attention_vectors(params, trials), prune), cfg["out"]))
    return EXIT_OK


def cmd_tune(cfg: dict) -> int:
    _require(cfg, "model")
    params, _ = load_model(cfg["model"])
    train_set, _ = _split(cfg)
    result = pipeline.tune_rn(params, train_set, _grid(cfg, train_set.n_samples), cfg["folds"], cfg["seed"],
                              cfg["csp_pairs"])
    if cfg.get("out") is not None:
        pipeline.write_cv_table(cfg["out"], result)
    print(f"n={result.n} r={result.r} ell_over_T={result.r / result.n!r}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    train_set, test_set = _split(cfg)
    if test_set is None:
        raise DataError("no test trials: pass --test or a manifest with session 'test' rows")
    k = pipeline.effective_pairs(cfg["csp_pairs"], train_set.n_channels)
    rec = cspclf.evaluate(train_set, test_set, k)
    rows = [["accuracy", repr(rec.accuracy)]]
    rows += [[f"accuracy_{lab.value}", repr(acc)] for lab, acc in rec.per_class.items()]
    rows += [[f"count_{a.value}_as_{b.value}", n] for (a, b), n in rec.confusion.items()]
    if cfg.get("out") is not None:
        _write_csv(cfg["out"], ["metric", "value"], rows)
    print(f"accuracy {rec.accuracy:.4f} on {rec.n_test} test trials")
    return EXIT_OK


def cmd_compare(cfg: dict) -> int:
    _require(cfg, "out")
    train_set, test_set = _split(cfg)
    if test_set is None:
        raise DataError("no test trials: pass --test or a manifest with session 'test' rows")
    if cfg["filter"]:
        train_set, test_set = _filter(cfg, train_set), _filter(cfg, test_set)
    params = None
    if cfg.get("model") is not None:
        params, _ = load_model(cfg["model"])
    net = _net_cfg(cfg, train_set.n_channels)
    result = pipeline.run_comparison(
        train_set, test_set, net, _train_cfg(cfg), _grid(cfg, train_set.n_samples), cfg["folds"],
        cfg["csp_pairs"], params=params, progress=_progress,
    )
    if cfg.get("subject"):
        result.subject = cfg["subject"]
    pipeline.write_report(cfg["out"], [result])
    if cfg.get("loss_out") is not None and result.loss_curve:
        _write_csv(cfg["loss_out"], ["epoch", "loss"], [[i + 1, repr(v)] for i, v in enumerate(result.loss_curve)])
    print(
        f"subject {result.subject}: unpruned {result.accuracy_unpruned:.4f}, pruned {result.accuracy_pruned:.4f} "
        f"(n={result.n}, r={result.r}, ell/T={result.pruned_length_ratio:.3f})"
    )
    return EXIT_OK


def cmd_sweep(cfg: dict) -> int:
    _require(cfg, "model", "out")
    params, _ = load_model(cfg["model"])
    train_set, test_set = _split(cfg)
    if test_set is None:
        raise DataError("no test trials: pass --test or a manifest with session 'test' rows")
    T = train_set.n_samples
    seg = cfg.get("seg_lens") or pipeline.default_grid(T).segment_lengths
    kept = cfg.get("kept_lens") or (
        pipeline.SWEEP_KEPT_LENGTHS if T == pipeline.REFERENCE_T else pipeline.default_grid(T).kept_lengths
    )
    rows = pipeline.sweep_segment_lengths(params, train_set, test_set, kept, seg, cfg["csp_pairs"])
    pipeline.write_sweep(cfg["out"], rows)
    print(f"{len(rows)} sweep rows written to {cfg['out']}")
    return EXIT_OK


def cmd_report(cfg: dict) -> int:
    _require(cfg, "reports")
    rows = []
    for path in cfg["reports"].split(","):
        path = Path(path.strip())
        if not path.is_file():
            raise DataError(f"{path}: report not found")
        rows += pipeline.read_report(path)
    if cfg.get("out") is not None:
        _write_csv(cfg["out"], pipeline.REPORT_HEADER, [[r[h] for h in pipeline.REPORT_HEADER] for r in rows])
    print(pipeline.summarize_report(rows))
    return EXIT_OK


HANDLERS = {
    "synth": cmd_synth, "filter": cmd_filter, "train": cmd_train, "gradcheck": cmd_gradcheck,
    "attend": cmd_attend, "prune": cmd_prune, "tune": cmd_tune, "eval": cmd_eval, "compare": cmd_compare,
    "sweep": cmd_sweep, "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
        format="%(asctime)s %(levelname)s %(message)s", force=True,
    )
    try:
        cfg = resolve(args)
        log.info("%s: resolved config %s", args.command,
                 " ".join(f"{k}={v}" for k, v in cfg.items() if v is not None))
        start = time.monotonic()
        code = HANDLERS[args.command](cfg)
        log.info("%s finished in %.1f s", args.command, time.monotonic() - start)
        return code
    except UsageError as exc:
        print(f"saliency-bci {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"saliency-bci {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SaliencyBciError, OSError) as exc:
        print(f"saliency-bci {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
