"""``mixforge`` command line: corpus, mix, analyze, train, eval, ablate."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from .audio_io import SAMPLE_RATE, WavError, read_wav, resample
from .autodiff import GraphError
from .config import ConfigError, SPLITS, load_settings, parse_overrides
from .mix_engine import (ManifestError, ToyCorpusConfig, build_dataset, generate_toy_corpus,
                         plan_pairs, read_pool_csv)
from .signal_analysis import analyze_waveform

log = logging.getLogger("mixforge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
_SPLIT_SEED_OFFSET = {"train": 0, "dev": 1, "eval": 2}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common(p):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="mixforge_run", help="output directory (default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mixforge", description="Mixed-audio deepfake dataset builder and prompt-tuned detector.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("corpus", help="generate synthetic source pools")
    _common(p)

    p = sub.add_parser("mix", help="pair sources and render the mixed dataset")
    _common(p)
    p.add_argument("--mix-ratio", type=int)
    p.add_argument("--snr-set", help="comma-separated dB values (default -5,0,5,10,15,20)")
    p.add_argument("--sources", help="directory holding <split>/fg_pool.csv and bg_pool.csv "
                                     "(default: <out>/sources, generated when absent)")

    p = sub.add_parser("analyze", help="per-sample IF and TKEO features of one WAV as CSV")
    _common(p)
    p.add_argument("wav")
    p.add_argument("--pool-window", type=int, default=3)
    p.add_argument("--no-wrap", action="store_true", help="literal unwrapped phase differences")

    for name, helptext in (("train", "prompt-tune the detector"), ("eval", "SNR-bucketed EER of a checkpoint"),
                           ("ablate", "train and score the 7 prompt-stream variants")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--dataset", help="dataset directory (default: <out>/dataset)")
        p.add_argument("--task", choices=("foreground", "background"))
        if name == "eval":
            p.add_argument("--checkpoint", help="default: <out>/train_<task>/best.ckpt")
            p.add_argument("--split", choices=SPLITS)
        else:
            p.add_argument("--epochs", type=int)
            p.add_argument("--lr", type=float)
            p.add_argument("--weight-decay", type=float)
            p.add_argument("--batch-size", type=int)
        if name == "ablate":
            p.add_argument("--seeds", help="comma-separated seeds (default 0,1,2)")
        if name == "train":
            p.add_argument("--carry-prompts", action="store_true",
                           help="feed block outputs at prompt positions into the next layer's prompts")
    return parser


def _settings(args):
    values = parse_overrides(args.overrides)
    flag_map = {
        "seed": "seed", "mix_ratio": "mix_ratio", "snr_set": "snr_set", "task": "task", "epochs": "epochs",
        "lr": "lr", "weight_decay": "weight_decay", "batch_size": "batch_size", "split": "split",
        "seeds": "ablation.seeds",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = str(v)
    if getattr(args, "carry_prompts", False):
        values["model.carry_prompts"] = "true"
    return load_settings(args.config, values)


def cmd_corpus(args, s) -> int:
    out = Path(args.out) / "sources"
    for split in SPLITS:
        c = s.corpus[split]
        cfg = ToyCorpusConfig(**c, prefix=f"{split}_")
        fg, bg = generate_toy_corpus(cfg, seed=s.seed * 1000 + 100 + _SPLIT_SEED_OFFSET[split], out_dir=out / split)
        print(f"{split}: {len(fg)} foreground, {len(bg)} background sources -> {out / split}")
    return EXIT_OK


def cmd_mix(args, s) -> int:
    sources = Path(args.sources) if args.sources else Path(args.out) / "sources"
    if not args.sources and not (sources / "train" / "fg_pool.csv").is_file():
        log.info("no source pools under %s; generating the toy corpus first", sources)
        cmd_corpus(args, s)
    dataset = Path(args.out) / "dataset"
    for split in SPLITS:
        fg_csv, bg_csv = sources / split / "fg_pool.csv", sources / split / "bg_pool.csv"
        if not fg_csv.is_file() or not bg_csv.is_file():
            if split == "train":
                raise FileNotFoundError(f"missing pool CSVs under {sources / split}")
            continue
        fg, bg = read_pool_csv(fg_csv), read_pool_csv(bg_csv)
        manifest = plan_pairs(fg, bg, s.mix_ratio, s.snr_set, seed=s.seed * 1000 + _SPLIT_SEED_OFFSET[split],
                              split=split)
        dataset.mkdir(parents=True, exist_ok=True)
        manifest.save(dataset / f"{split}.plan.json")
        path = build_dataset(manifest, dataset, workers=s.workers)
        counts = manifest.combination_counts()
        print(f"{split}: {len(manifest.mixtures)} mixed + {len(manifest.singles)} single -> {path}  "
              + " ".join(f"{k}={v}" for k, v in counts.items()))
    return EXIT_OK


def cmd_analyze(args, s) -> int:
    w = read_wav(args.wav)
    if w.sample_rate != SAMPLE_RATE:
        w = resample(w, SAMPLE_RATE)
    cols = analyze_waveform(w.samples, args.pool_window, wrap=not args.no_wrap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{Path(args.wav).stem}_analysis.csv"
    names = ["n", "f_high", "f_all", "f_low", "psi"]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(names)
        for i in range(cols["n"].size):
            wr.writerow([int(cols["n"][i])] + [repr(float(cols[k][i])) for k in names[1:]])
    print(f"{cols['n'].size} rows -> {path}  (median f_all {np.median(cols['f_all']):.4f} rad/sample)")
    return EXIT_OK


def _dataset(args) -> Path:
    d = Path(args.dataset) if args.dataset else Path(args.out) / "dataset"
    if not (d / "train.jsonl").is_file() and args.command != "eval":
        raise FileNotFoundError(f"no train.jsonl under {d}; run `mixforge mix` first")
    return d


def cmd_train(args, s) -> int:
    from .model import PromptTuningDetector
    from .training import load_split, train

    d = _dataset(args)
    rows = load_split(d, "train")
    dev = load_split(d, "dev") if (d / "dev.jsonl").is_file() else None
    model = PromptTuningDetector(s.model)
    counts = model.parameter_counts()
    log.info("trainable %d / frozen %d parameters", counts["trainable"], counts["frozen"])
    out = Path(args.out) / f"train_{s.train.task}"
    res = train(rows, model, s.train, dev_rows=dev, out_dir=out)
    best = res.best_dev_eer
    print(f"best epoch {res.best_epoch} dev EER {'-' if best is None else f'{100 * best:.2f}%'} -> {out / 'best.ckpt'}")
    return EXIT_OK


def cmd_eval(args, s) -> int:
    from .evaluation import snr_bucketed_eval
    from .model import PromptTuningDetector
    from .training import load_split

    d = Path(args.dataset) if args.dataset else Path(args.out) / "dataset"
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(args.out) / f"train_{s.train.task}" / "best.ckpt"
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model = PromptTuningDetector.load(ckpt)
    rows = load_split(d, s.split)
    report = snr_bucketed_eval(rows, model, s.train.task, seed=s.train.seed)
    out = Path(args.out) / f"eval_{s.train.task}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.table() + "\n")
    with open(out / "scores.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["utt_id", "score"])
        for utt, sc in report.scores:
            wr.writerow([utt, repr(sc)])
    print(report.table())
    return EXIT_OK


def cmd_ablate(args, s) -> int:
    from .evaluation import run_ablation

    d = _dataset(args)
    tasks = (s.train.task,) if args.task else ("foreground", "background")
    table = run_ablation(d, s.train, s.model, seeds=s.ablation_seeds, tasks=tasks,
                         out_dir=Path(args.out) / "ablation")
    print(table.table())
    return EXIT_OK


COMMANDS = {"corpus": cmd_corpus, "mix": cmd_mix, "analyze": cmd_analyze, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    from .training import NumericalError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"mixforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        settings = _settings(args)
    except ConfigError as exc:
        print(f"mixforge: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"mixforge: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](args, settings)
    except (NumericalError, FloatingPointError, GraphError) as exc:
        print(f"mixforge: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, WavError, ManifestError, KeyError, ValueError, OSError) as exc:
        print(f"mixforge: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
