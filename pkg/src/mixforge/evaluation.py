"""EER, sub-task labels, SNR-bucketed evaluation and the prompt ablation grid."""
from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .mix_engine import COMBINATIONS, SNR_SET

log = logging.getLogger(__name__)

TASKS = ("foreground", "background")

# Table IV row order
ABLATION_VARIANTS = (
    ("P_base", ("base",)),
    ("P_fre", ("fre",)),
    ("P_tex", ("tex",)),
    ("P_tex+P_base", ("tex", "base")),
    ("P_fre+P_base", ("fre", "base")),
    ("P_tex+P_fre", ("tex", "fre")),
    ("P_base+P_fre+P_tex", ("base", "fre", "tex")),
)


class SingleClassError(ValueError):
    pass


def subtask_labels(row: dict, task: str):
    """Bona fide (1) / spoof (0) label of *row* for *task*, or ``None`` when not applicable."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    key = "fg_label" if task == "foreground" else "bg_label"
    if key not in row:
        raise KeyError(f"row has no {key} column")
    value = row[key]
    if value is None:
        warnings.warn(f"{row.get('utt_id')}: no {task} component, excluded from the {task} task",
                      stacklevel=2)
        return None
    if value not in ("real", "fake"):
        raise ValueError(f"{row.get('utt_id')}: bad {key} {value!r}")
    return 1 if value == "real" else 0


def task_rows(rows, task: str, kinds=("mixed", "single")):
    """Rows usable for *task* with their labels, silently skipping inapplicable singles."""
    key = "fg_label" if task == "foreground" else "bg_label"
    kept, labels = [], []
    for r in rows:
        if r["kind"] not in kinds or r.get(key) is None:
            continue
        kept.append(r)
        labels.append(1 if r[key] == "real" else 0)
    return kept, np.asarray(labels, dtype=np.int64)


def error_rates(scores, labels):
    """FAR/FRR at every distinct score plus one threshold above the maximum.

    FAR(t) = share of spoof with score >= t, FRR(t) = share of bona fide below t.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    bona = np.sort(scores[labels == 1])
    spoof = np.sort(scores[labels == 0])
    thresholds = np.unique(scores)
    thresholds = np.append(thresholds, np.nextafter(thresholds[-1], np.inf))
    frr = np.searchsorted(bona, thresholds, side="left") / bona.size
    far = (spoof.size - np.searchsorted(spoof, thresholds, side="left")) / spoof.size
    return thresholds, far, frr


def compute_eer(scores, labels) -> tuple:
    """Equal error rate and its threshold.

    Between the last threshold with FAR > FRR and the first with
    FAR <= FRR both curves are linearly interpolated.
    """
    labels = np.asarray(labels)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    if not np.any(labels == 1) or not np.any(labels == 0):
        raise SingleClassError("EER needs both bona fide and spoof samples")
    t, far, frr = error_rates(scores, labels)
    i = int(np.argmax(frr >= far))
    if far[i] == frr[i] or i == 0:
        return float(far[i]), float(t[i])
    d0 = far[i - 1] - frr[i - 1]
    d1 = far[i] - frr[i]
    a = d0 / (d0 - d1)
    eer = far[i - 1] + a * (far[i] - far[i - 1])
    thr = t[i - 1] + a * (t[i] - t[i - 1])
    return float(eer), float(thr)


@dataclass
class EvalReport:
    task: str
    overall_eer: float
    threshold: float
    buckets: dict
    bucket_counts: dict
    combination_counts: dict
    n_mixed: int
    single_eer: float | None = None
    n_single: int = 0
    scores: list = field(default_factory=list, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket", "count", "eer"])
        for snr in SNR_SET:
            eer = self.buckets.get(snr)
            w.writerow([snr, self.bucket_counts.get(snr, 0), "" if eer is None else repr(eer)])
        w.writerow(["overall", self.n_mixed, repr(self.overall_eer)])
        if self.single_eer is not None:
            w.writerow(["single", self.n_single, repr(self.single_eer)])
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{self.task} task  overall EER {100 * self.overall_eer:6.2f}%  "
                 f"(threshold {self.threshold:.4f}, {self.n_mixed} mixed)"]
        lines.append("  SNR(dB)  count   EER")
        for snr in SNR_SET:
            eer = self.buckets.get(snr)
            cell = "   absent" if eer is None else f"{100 * eer:8.2f}%"
            lines.append(f"  {snr:>6}  {self.bucket_counts.get(snr, 0):>5}  {cell}")
        lines.append("  " + "  ".join(f"{c}={self.combination_counts.get(c, 0)}" for c in COMBINATIONS))
        if self.single_eer is not None:
            lines.append(f"  single-source EER {100 * self.single_eer:.2f}% ({self.n_single})")
        return "\n".join(lines)


def bucketed_report(rows, scores, task: str) -> EvalReport:
    """Build an :class:`EvalReport` from per-row scores (rows need ``kind``/``snr_db``/labels)."""
    rows = list(rows)
    scores = np.asarray(scores, dtype=np.float64)
    if len(rows) != scores.size:
        raise ValueError("one score per row required")
    key = "fg_label" if task == "foreground" else "bg_label"
    mixed = [i for i, r in enumerate(rows) if r["kind"] == "mixed"]
    single = [i for i, r in enumerate(rows) if r["kind"] == "single" and r.get(key) is not None]
    if not mixed:
        raise ValueError("evaluation split has no mixed rows")
    labels = np.array([1 if r.get(key) == "real" else 0 for r in rows])
    overall, thr = compute_eer(scores[mixed], labels[mixed])
    buckets, counts = {}, {}
    for snr in SNR_SET:
        idx = [i for i in mixed if rows[i]["snr_db"] == snr]
        counts[snr] = len(idx)
        if not idx:
            continue
        try:
            buckets[snr] = compute_eer(scores[idx], labels[idx])[0]
        except SingleClassError:
            log.warning("SNR bucket %s dB has a single class; reported as absent", snr)
    combos = {c: 0 for c in COMBINATIONS}
    for i in mixed:
        r = rows[i]
        combos[f"{r['fg_label'][0].upper()}F-{r['bg_label'][0].upper()}B"] += 1
    single_eer = None
    if single:
        try:
            single_eer = compute_eer(scores[single], labels[single])[0]
        except SingleClassError:
            pass
    return EvalReport(
        task=task, overall_eer=overall, threshold=thr, buckets=buckets, bucket_counts=counts,
        combination_counts=combos, n_mixed=len(mixed), single_eer=single_eer, n_single=len(single),
        scores=[(rows[i]["utt_id"], float(scores[i])) for i in range(len(rows))],
    )


def snr_bucketed_eval(rows, model, task: str, n_samples: int | None = None, seed: int = 0,
                      batch_size: int = 32, features=None) -> EvalReport:
    """Score every row of an eval split with *model* and bucket EER by SNR."""
    from .training import extract_features, predict

    rows, _ = task_rows(rows, task)
    if features is None:
        features = extract_features(rows, model, seed=seed, n_samples=n_samples)
    scores = predict(model, features, batch_size)
    return bucketed_report(rows, scores, task)


# ablation ---------------------------------------------------------------------
@dataclass
class AblationTable:
    seeds: tuple
    tasks: tuple
    rows: list  # dicts: variant, streams, <task>: mean, <task>_seed<k>: value

    def directional(self) -> dict:
        """Per task: full three-stream mean EER <= base-only mean EER."""
        by = {r["variant"]: r for r in self.rows}
        full, base = by[ABLATION_VARIANTS[-1][0]], by[ABLATION_VARIANTS[0][0]]
        return {t: bool(full[t] <= base[t]) for t in self.tasks}

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ["variant", "streams"] + list(self.tasks) + [
            f"{t}_seed{s}" for t in self.tasks for s in self.seeds]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["variant"], "+".join(r["streams"])] + [repr(r[c]) for c in cols[2:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "AblationTable":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header[:2] != ["variant", "streams"]:
            raise ValueError("not an ablation table")
        seed_cols = [h for h in header[2:] if "_seed" in h]
        tasks = tuple(h for h in header[2:] if "_seed" not in h)
        seeds = tuple(dict.fromkeys(int(h.rsplit("_seed", 1)[1]) for h in seed_cols))
        rows = []
        for rec in reader:
            r = {"variant": rec[0], "streams": tuple(rec[1].split("+"))}
            for h, v in zip(header[2:], rec[2:]):
                r[h] = float(v)
            rows.append(r)
        return cls(seeds=seeds, tasks=tasks, rows=rows)

    def table(self) -> str:
        lines = [f"{'Prompt variant':<22}" + "".join(f"{t.capitalize():>14}" for t in self.tasks)]
        for r in self.rows:
            lines.append(f"{r['variant']:<22}" + "".join(f"{100 * r[t]:13.2f}%" for t in self.tasks))
        flags = self.directional()
        lines.append("full <= base: " + ", ".join(f"{t}={'pass' if ok else 'FAIL'}" for t, ok in flags.items()))
        return "\n".join(lines)


def run_ablation(dataset_dir, base_cfg, model_config=None, seeds=(0, 1, 2), tasks=TASKS,
                 out_dir=None, eval_split: str = "eval") -> AblationTable:
    """Train every Table-IV prompt variant for every seed and task; report mean eval EER."""
    from .model import ModelConfig, PromptTuningDetector
    from .training import load_split, extract_features, predict, train

    if len(seeds) < 1:
        raise ValueError("need at least one seed")
    model_config = model_config or ModelConfig()
    dataset_dir = Path(dataset_dir)
    splits = {s: load_split(dataset_dir, s) for s in ("train", "dev", eval_split) if (dataset_dir / f"{s}.jsonl").is_file()}
    if "train" not in splits or eval_split not in splits:
        raise FileNotFoundError(f"{dataset_dir} needs train.jsonl and {eval_split}.jsonl")

    # the frozen front end is shared by every variant and seed
    probe = PromptTuningDetector(model_config)
    feats = {}
    for split, rows in splits.items():
        feats[split] = extract_features(rows, probe, seed=base_cfg.seed)

    results = {}
    for name, streams in ABLATION_VARIANTS:
        for task in tasks:
            for seed in seeds:
                mc = replace(model_config, streams=streams, seed=seed)
                model = PromptTuningDetector(mc)
                cfg = replace(base_cfg, task=task, seed=seed)
                res = train(splits["train"], model, cfg, dev_rows=splits.get("dev"),
                            features=feats["train"], dev_features=feats.get("dev"))
                model.load_state_dict(res.best_state)
                rows, idx = _task_subset(splits[eval_split], task)
                scores = predict(model, feats[eval_split].subset(idx))
                rep = bucketed_report(rows, scores, task)
                results[(name, task, seed)] = rep.overall_eer
                log.info("ablation %s task=%s seed=%d eer=%.4f", name, task, seed, rep.overall_eer)

    rows = []
    for name, streams in ABLATION_VARIANTS:
        r = {"variant": name, "streams": streams}
        for task in tasks:
            vals = [results[(name, task, s)] for s in seeds]
            r[task] = float(np.mean(vals))
            for s, v in zip(seeds, vals):
                r[f"{task}_seed{s}"] = float(v)
        rows.append(r)
    table = AblationTable(seeds=tuple(seeds), tasks=tuple(tasks), rows=rows)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.csv").write_text(table.to_csv())
        (out_dir / "ablation.txt").write_text(table.table() + "\n")
    return table


def _task_subset(rows, task):
    key = "fg_label" if task == "foreground" else "bg_label"
    idx = [i for i, r in enumerate(rows) if r.get(key) is not None]
    return [rows[i] for i in idx], idx

