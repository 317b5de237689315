"""Train ablation variants under one seed and budget and compare validation DSC.

The default plan trains the two baselines and the full model for a few
epochs on synthetic shapes. Pass a different plan as the first argument,
for example ``all`` for every variant (slow) or ``table6:Baseline,table6:full``.

    python3 demos/05_ablation.py [plan]
"""
import sys
import tempfile
from pathlib import Path

from mambacafu import ModelConfig, TrainConfig, ablate, load_dataset, synth_generate
from mambacafu.train import ablation_table

plan = sys.argv[1] if len(sys.argv) > 1 else "table6:Baseline,table7:Baseline,table6:full"
work = Path(tempfile.mkdtemp(prefix="mambacafu_ablate_"))

train = load_dataset(synth_generate(16, 64, 3, seed=10, out_dir=work / "data"))
val = load_dataset(synth_generate(8, 64, 3, seed=100, out_dir=work / "data", split="val"))

base = TrainConfig(model=ModelConfig.tiny_config(3, 64), batch_size=8, initial_lr=0.003, alpha=0.5,
                   epochs=60, restart_period=1000, out_dir=str(work / "runs"))
rows = ablate(base, plan, train, val)
print(ablation_table(rows))
print("runs under", work / "runs")
