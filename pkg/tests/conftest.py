import numpy as np
import pytest

from mixforge.mix_engine import SourceEntry, ToyCorpusConfig, build_dataset, generate_toy_corpus, plan_pairs


def fake_pool(role, n_real, n_fake, prefix=""):
    """Source entries with placeholder paths, for pairing-only tests."""
    out = []
    for auth, n in (("real", n_real), ("fake", n_fake)):
        for i in range(n):
            cat = "speech" if role == "foreground" else ("music", "environment")[i % 2]
            tag = "fg" if role == "foreground" else "bg"
            out.append(SourceEntry(f"{prefix}{tag}_{auth}_{i}", f"/nonexistent/{tag}{auth}{i}.wav", role, auth, cat))
    return out


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = ToyCorpusConfig(fg_real=2, fg_fake=2, bg_real=3, bg_fake=3, fg_duration=(0.5, 0.8), bg_duration=(0.3, 0.9))
    fg, bg = generate_toy_corpus(cfg, seed=5, out_dir=root / "sources")
    return root, fg, bg


@pytest.fixture(scope="session")
def tiny_dataset(tiny_corpus):
    """Three splits built from one tiny corpus; enough rows for the training loop."""
    root, fg, bg = tiny_corpus
    out = root / "dataset"
    for i, split in enumerate(("train", "dev", "eval")):
        build_dataset(plan_pairs(fg, bg, 4, seed=10 + i, split=split), out)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
