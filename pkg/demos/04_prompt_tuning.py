"""
Prompt tuning on a frozen backbone
==================================

Train only the prompt streams and head on a tiny generated dataset, then
score the eval split bucketed by SNR. Kept small so it runs in about a
minute; the CLI runs the same steps at full size.
"""
import tempfile
from pathlib import Path

from mixforge.evaluation import snr_bucketed_eval
from mixforge.mix_engine import ToyCorpusConfig, build_dataset, generate_toy_corpus, plan_pairs
from mixforge.model import ModelConfig, PromptTuningDetector
from mixforge.training import TrainConfig, frozen_snapshot, load_split, train

out = Path(tempfile.mkdtemp(prefix="mixforge_demo_"))
for i, split in enumerate(("train", "dev", "eval")):
    fg, bg = generate_toy_corpus(ToyCorpusConfig(8, 8, 3, 3, fg_duration=(2, 3), prefix=f"{split}_"),
                                 seed=i, out_dir=out / "sources" / split)
    build_dataset(plan_pairs(fg, bg, 4, seed=i, split=split), out / "dataset")

# 2 s crops and two layers keep this quick
config = ModelConfig(n_layers=2, input_samples=32000)
model = PromptTuningDetector(config)
print(model.parameter_counts())

before = frozen_snapshot(model)
rows = {s: load_split(out / "dataset", s) for s in ("train", "dev", "eval")}
res = train(rows["train"], model, TrainConfig(epochs=8), dev_rows=rows["dev"], out_dir=out / "run")
for entry in res.log:
    print(entry)
print("frozen weights untouched:", frozen_snapshot(model) == before)

model.load_state_dict(res.best_state)
print(snr_bucketed_eval(rows["eval"], model, "foreground").table())
