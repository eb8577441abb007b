"""The command-line pipeline, driven from Python.

Equivalent shell session::

    pmrilab generate --out data --count 4 --size 32 --seed 0
    pmrilab --deterministic train --mode joint --data data --config cfg.json --out run
    pmrilab reconstruct --method idslr --data data --checkpoint run/checkpoint.pmri --out idslr
    pmrilab reconstruct --method zero-filled --data data --out zf
    pmrilab evaluate --recon idslr --data data --seg --out idslr.csv
    pmrilab evaluate --recon zf --data data --out zf.csv
    pmrilab compare --reports idslr.csv zf.csv
"""
import json
import tempfile
from pathlib import Path

from pmrilab.cli import main, replay_argv

work = Path(tempfile.mkdtemp(prefix="pmrilab-demo-"))
cfg = work / "cfg.json"
cfg.write_text(json.dumps({"width": 4, "unrolls": 2, "lam": 1.0, "lr": 1e-3, "epochs": 5}))


def run(*argv):
    argv = [str(a) for a in argv]
    print("$ pmrilab", " ".join(argv))
    code = main(argv)
    print(f"(exit {code})\n")
    return code


run("generate", "--out", work / "data", "--count", "4", "--size", "32", "--seed", "0")
run("--deterministic", "train", "--mode", "joint", "--data", work / "data", "--config", cfg,
    "--out", work / "run", "--quiet")
run("reconstruct", "--method", "idslr", "--data", work / "data",
    "--checkpoint", work / "run" / "checkpoint.pmri", "--out", work / "idslr")
run("reconstruct", "--method", "zero-filled", "--data", work / "data", "--out", work / "zf")
run("evaluate", "--recon", work / "idslr", "--data", work / "data", "--seg",
    "--out", work / "idslr.csv")
run("evaluate", "--recon", work / "zf", "--data", work / "data", "--out", work / "zf.csv")
run("compare", "--reports", work / "idslr.csv", work / "zf.csv")

# Errors map to exit codes: 2 for bad input, 3 for numerical failure
run("reconstruct", "--method", "idslr", "--data", work / "data", "--out", work / "x")

# Every output directory has a manifest that replays the run
manifest = json.loads((work / "run" / "manifest.json").read_text())
print("replay:", " ".join(replay_argv(manifest, work / "run2")))
main(replay_argv(manifest, work / "run2"))
same = (work / "run" / "loss_trace.csv").read_bytes() == (work / "run2" / "loss_trace.csv").read_bytes()
print("replayed loss trace identical:", same)
print("outputs in", work)
