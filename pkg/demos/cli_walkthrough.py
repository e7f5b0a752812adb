"""The whole command-line pipeline, verb by verb, in a scratch directory.

Generates a labeled dataset and a retrieval corpus on disk, then drives
the installed CLI through train -> quantize -> inspect -> infer ->
retrain -> extract -> index -> search -> eval -> report, printing each
command before it runs. Artifacts land in ./cli_demo_output.
"""
import shutil
import subprocess
import sys
from pathlib import Path

from qnip.datasets import (
    make_brightness_dataset,
    make_retrieval_corpus,
    write_corpus,
    write_labeled_dataset,
)
from qnip.retrieval import write_ground_truth

work = Path("cli_demo_output")
if work.exists():
    shutil.rmtree(work)
work.mkdir()

net = work / "net.cfg"
net.write_text("input 3 16 16\nconv 4 pad=1\npool\nconv 6 pad=1 tap\npool\n"
               "flatten\ndense 2\n")
write_labeled_dataset(work / "data", make_brightness_dataset(6, size=16, seed=0))
write_corpus(work / "corpus",
             make_retrieval_corpus(num_groups=3, per_group=2, size=16, seed=0))
write_ground_truth(work / "gt.txt",
                   {"1000": ["1001"], "1100": ["1101"], "1200": ["1201"]})
print(f"scratch inputs written under {work}/")


def run(*args):
    argv = [sys.executable, "-m", "qnip.cli", *map(str, args)]
    print()
    print("$ qnip " + " ".join(map(str, args)))
    subprocess.run(argv, check=True)


run("ratio", "--mask-bits", 3)
run("train", "--net", net, "--data", work / "data", "--epochs", 3,
    "--lr", 0.1, "--batch-size", 4, "--out", work / "model.qfw",
    "--metrics", work / "train.csv")
run("quantize", "--net", net, "--weights", work / "model.qfw",
    "--profile", "3,1", "--out", work / "model.qcm")
run("inspect", work / "model.qcm")
run("infer", "--net", net, "--weights", work / "model.qcm",
    "--image", work / "corpus" / "1000.img", "--mode", "integer", "--topk", 2)
run("retrain", "--net", net, "--weights", work / "model.qfw",
    "--data", work / "data", "--profile", "1,1", "--epochs", 2, "--lr", 0.01,
    "--batch-size", 4, "--out", work / "retrained.qcm")
run("extract", "--net", net, "--weights", work / "model.qfw",
    "--images", work / "corpus", "--kind", "rnip", "--levels", "1,2",
    "--precision", "byte", "--out", work / "corpus.qds")
run("index", "--desc", work / "corpus.qds", "--out", work / "index.qds")
run("search", "--index", work / "index.qds", "--query-id", "1000", "--k", 3)
run("eval", "--index", work / "index.qds", "--ground-truth", work / "gt.txt",
    "--pipeline", "rnip-5x", "--out", work / "eval.csv")
run("report", "--eval", work / "eval.csv", "--model", work / "model.qcm",
    "--out", work / "report.txt")

print()
print(f"done; artifacts in {work}/ (re-running reproduces them byte for byte)")
