"""End to end through the command line: synthesize data, train a tiny model, evaluate, report.

Every step is a call into the same entry point the ``mambacafu`` script uses,
so the exit codes printed here are what a shell would see. Takes about a
minute on one CPU core.

    python3 demos/04_train_and_evaluate.py [work_dir]
"""
import sys
import tempfile
from pathlib import Path

from mambacafu.cli import main

work = Path(sys.argv[1] if len(sys.argv) > 1 else tempfile.mkdtemp(prefix="mambacafu_demo_"))
data = work / "data"


def run(*argv):
    print("$ mambacafu", " ".join(argv))
    code = main(list(argv))
    print(f"exit {code}\n")
    return code


run("--seed", "1", "--out-dir", str(data), "synth", "--n", "12", "--size", "64", "--num-classes", "3")
run("--seed", "2", "--out-dir", str(data), "synth", "--n", "4", "--size", "64", "--num-classes", "3",
    "--split", "val")

config = work / "tiny.cfg"
config.write_text("# tiny model on the synthetic shapes\n"
                  "tiny = true\nnum_classes = 3\ninput_size = 64\n"
                  "batch_size = 4\nepochs = 20\ninitial_lr = 0.003\nalpha = 0.5\n")

# --set and dedicated flags win over the file.
run("--config", str(config), "--set", "epochs=30", "--seed", "0", "--out-dir", str(work / "runs"),
    "train", "--train-manifest", str(data / "train.tsv"), "--val-manifest", str(data / "val.tsv"),
    "--run-id", "demo")

run_dir = work / "runs" / "demo"
run("--out-dir", str(run_dir), "eval", "--checkpoint", str(run_dir / "best.npz"),
    "--manifest", str(data / "val.tsv"), "--dump-stats", str(run_dir / "stats.jsonl"))
run("report", str(run_dir), "--output", str(work / "report.md"), "--overlays")

# A bad key is a configuration error: exit code 2.
run("--set", "no_such_key=1", "count")
print("artifacts in", work)
