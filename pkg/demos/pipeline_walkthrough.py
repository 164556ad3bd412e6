"""Run the response-reconstruction attack one stage at a time and read the files.

Each stage of the harness reads what the previous one wrote, so the run
below can be stopped and resumed anywhere. At the end the victim's
held-out responses are printed next to what the attacker reconstructed
from TLB traces alone.

Run:  python demos/pipeline_walkthrough.py [out_dir]
"""
import sys
import tempfile
from pathlib import Path

from moeleak import harness, io

CONFIG = """
[experiment]
name = walkthrough
seed = 1

[attack]
kind = rra

[corpus]
domains = medical
train_fraction = 0.9

[channel]
names = pageout, tlb
contention = 1
"""

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="moeleak-"))
cfg = harness.parse_config(CONFIG, out=out)
print(f"writing to {out}\n")

OUTPUTS = {"generate-corpus": "corpus", "profile": "profile", "simulate": "traces", "translate": "translated",
           "train": "models", "attack": "attack", "evaluate": "reports"}
for stage in harness.STAGES:
    harness.run_stage(cfg, stage)
    files = sorted(p.name for p in (out / OUTPUTS[stage]).iterdir())
    print(f"{stage:16s} {OUTPUTS[stage]}/: {', '.join(files)}")

print()
print(harness.Report.read(out / "reports" / "evaluate.csv").to_csv())

vocab = io.read_vocab(out / "corpus" / "vocab.tsv")
pairs = io.read_pairs(out / "corpus" / "test_pairs.tsv")
# attack files hold "<row>\t<predicted token ids>" per held-out response
guesses = [line.split("\t")[1].split() for line in (out / "attack" / "tlb.tsv").read_text().splitlines()]
for (prompt, response), guess in list(zip(pairs, guesses))[:4]:
    print("prompt:  ", vocab.decode(prompt))
    print("response:", vocab.decode(response))
    print("from tlb:", vocab.decode(map(int, guess)))
    print()
