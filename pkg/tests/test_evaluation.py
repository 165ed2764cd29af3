import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mixforge.evaluation import (ABLATION_VARIANTS, AblationTable, SingleClassError, bucketed_report, compute_eer,
                                 subtask_labels, task_rows)


def sweep_oracle(scores, labels):
    """Exhaustive threshold sweep written with plain loops."""
    bona = [s for s, l in zip(scores, labels) if l == 1]
    spoof = [s for s, l in zip(scores, labels) if l == 0]
    cands = sorted(set(float(s) for s in scores))
    cands.append(float(np.nextafter(cands[-1], np.inf)))
    pts = []
    for t in cands:
        far = sum(1 for s in spoof if s >= t) / len(spoof)
        frr = sum(1 for s in bona if s < t) / len(bona)
        pts.append((t, far, frr))
    for k, (t, far, frr) in enumerate(pts):
        if frr >= far:
            if far == frr or k == 0:
                return far
            t0, far0, frr0 = pts[k - 1]
            d0, d1 = far0 - frr0, far - frr
            return far0 + d0 / (d0 - d1) * (far - far0)
    raise AssertionError("FRR reaches 1 at the top threshold")


def test_eer_examples():
    assert compute_eer([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0])[0] == 0.0
    assert compute_eer([0.8, 0.3, 0.7, 0.2], [1, 1, 0, 0])[0] == 0.5
    assert compute_eer([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])[0] == 1.0


def test_eer_single_class():
    with pytest.raises(SingleClassError):
        compute_eer([0.1, 0.2], [1, 1])


def test_eer_interpolates_between_thresholds():
    # FAR/FRR cross strictly between two thresholds
    scores = [0.1, 0.4, 0.6, 0.35, 0.5, 0.9]
    labels = [1, 1, 1, 0, 0, 0]
    assert compute_eer(scores, labels)[0] == sweep_oracle(scores, labels)


def test_eer_matches_oracle_random():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 60))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = np.round(rng.normal(size=n) + labels * rng.uniform(0, 2), int(rng.integers(1, 4)))
        assert compute_eer(scores, labels)[0] == sweep_oracle(scores, labels)


@settings(max_examples=100)
@given(st.lists(st.tuples(st.integers(-5, 5), st.sampled_from([0, 1])), min_size=2, max_size=40)
       .filter(lambda xs: len({l for _, l in xs}) == 2))
def test_eer_symmetry(pairs):
    scores = np.array([s for s, _ in pairs], float)
    labels = np.array([l for _, l in pairs])
    eer, _ = compute_eer(scores, labels)
    assert 0.0 <= eer <= 1.0
    flipped, _ = compute_eer(-scores, 1 - labels)
    assert flipped == pytest.approx(eer, abs=1e-12)


def test_subtask_labels():
    rf_fb = {"utt_id": "a", "fg_label": "real", "bg_label": "fake"}
    ff_fb = {"utt_id": "b", "fg_label": "fake", "bg_label": "fake"}
    assert subtask_labels(rf_fb, "foreground") == 1
    assert subtask_labels(rf_fb, "background") == 0
    assert subtask_labels(ff_fb, "foreground") == subtask_labels(ff_fb, "background") == 0
    speech_only = {"utt_id": "c", "fg_label": "real", "bg_label": None}
    with pytest.warns(UserWarning):
        assert subtask_labels(speech_only, "background") is None


def _rows(snrs, fg, kinds=None):
    kinds = kinds or ["mixed"] * len(snrs)
    return [{"utt_id": f"u{i}", "kind": k, "snr_db": s, "fg_label": f, "bg_label": "real" if k == "mixed" else None}
            for i, (s, f, k) in enumerate(zip(snrs, fg, kinds))]


def test_single_bucket_equals_overall():
    rows = _rows([0] * 6, ["real", "fake"] * 3)
    scores = np.array([0.9, 0.1, 0.2, 0.3, 0.8, 0.5])
    rep = bucketed_report(rows, scores, "foreground")
    assert rep.buckets == {0: rep.overall_eer}
    assert sum(rep.bucket_counts.values()) == rep.n_mixed == 6


def test_buckets_recomputed_from_rows():
    rng = np.random.default_rng(3)
    snrs = list(rng.choice([-5, 0, 5, 10, 15, 20], 120))
    fg = list(rng.choice(["real", "fake"], 120))
    rows = _rows(snrs, fg) + _rows([None] * 4, ["real", "fake"] * 2, ["single"] * 4)
    scores = rng.normal(size=124)
    rep = bucketed_report(rows, scores, "foreground")
    assert sum(rep.bucket_counts.values()) == rep.n_mixed == 120
    for snr, eer in rep.buckets.items():
        idx = [i for i, r in enumerate(rows) if r["snr_db"] == snr]
        lab = [1 if rows[i]["fg_label"] == "real" else 0 for i in idx]
        assert eer == compute_eer(scores[idx], lab)[0]
    assert rep.n_single == 4 and rep.single_eer is not None
    csv_text = rep.to_csv()
    assert csv_text.splitlines()[0] == "bucket,count,eer"
    assert "overall,120," in csv_text


def test_empty_bucket_reported_absent():
    rows = _rows([0, 0, 5, 5], ["real", "fake", "real", "fake"])
    rep = bucketed_report(rows, np.array([1.0, 0.0, 1.0, 0.0]), "foreground")
    assert set(rep.buckets) == {0, 5}
    assert "absent" in rep.table()
    lines = {l.split(",")[0]: l for l in rep.to_csv().splitlines()}
    assert lines["10"] == "10,0,"


def test_task_rows_filters():
    rows = _rows([0, None], ["real", None], ["mixed", "single"])
    rows[1]["bg_label"] = "fake"
    kept, labels = task_rows(rows, "foreground")
    assert [r["utt_id"] for r in kept] == ["u0"] and labels.tolist() == [1]
    kept, labels = task_rows(rows, "background")
    assert labels.tolist() == [1, 0]


def test_ablation_variants_match_table_rows():
    assert len(ABLATION_VARIANTS) == 7
    assert [n for n, _ in ABLATION_VARIANTS] == ["P_base", "P_fre", "P_tex", "P_tex+P_base", "P_fre+P_base",
                                                  "P_tex+P_fre", "P_base+P_fre+P_tex"]
    assert len({frozenset(s) for _, s in ABLATION_VARIANTS}) == 7


def test_ablation_csv_round_trip():
    rng = np.random.default_rng(5)
    rows = []
    for name, streams in ABLATION_VARIANTS:
        r = {"variant": name, "streams": tuple(streams)}
        for t in ("foreground", "background"):
            vals = rng.uniform(0, 0.5, 3)
            r[t] = float(vals.mean())
            for s, v in zip((0, 1, 2), vals):
                r[f"{t}_seed{s}"] = float(v)
        rows.append(r)
    table = AblationTable(seeds=(0, 1, 2), tasks=("foreground", "background"), rows=rows)
    back = AblationTable.from_csv(table.to_csv())
    assert back == table
    assert set(table.directional()) == {"foreground", "background"}
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert "full <= base" in table.table()
