"""Every CLI command in sequence, the way a scripted experiment would use them.

prepare -> train (stage 1) -> train (stage 2) -> eval -> embed -> rank,
all inside ``demo_output/cli/``. Each command is a plain process-style call
through the same entry point ``indivaid`` installs.
"""

import json
from pathlib import Path

from indivaid.cli import main
from indivaid.data import scan_dataset, split_records
from indivaid.synthetic import make_synthetic_dataset

out = Path("demo_output/cli")
out.mkdir(parents=True, exist_ok=True)
root = out / "data"
make_synthetic_dataset(root, num_identities=5, train_per_id=5, seed=4)


def run(*argv):
    print(f"\n$ indivaid {' '.join(argv)}")
    code = main(list(argv))
    assert code == 0, f"exit {code}"


run("prepare", "--root", str(root), "--out", str(out / "summary.json"))
print(json.dumps(json.loads((out / "summary.json").read_text())["total"], indent=2))

run(
    "train", "--root", str(root), "--out", str(out / "stage1"),
    "--stage", "1", "--epochs", "10", "--stage1_lr", "5e-3", "--seed", "0",
)

run(
    "train", "--root", str(root), "--out", str(out / "stage2"),
    "--stage", "2", "--stage1-checkpoint", str(out / "stage1"),
    "--epochs", "10", "--stage2_lr_start", "1e-3", "--stage2_lr_peak", "6e-3",
    "--warmup_epochs", "3", "--decay_epochs", "8", "--I", "2", "--K", "2",
)

run(
    "eval", "--root", str(root), "--checkpoint", str(out / "stage2"),
    "--out", str(out / "report.json"), "--per-query-ap", str(out / "per_query_ap.csv"),
)
run("eval", "--root", str(root), "--mode", "clip_zs", "--out", str(out / "report_zs.json"))

trained = json.loads((out / "report.json").read_text())
zero_shot = json.loads((out / "report_zs.json").read_text())
print(f"\ntrained mAP {trained['map']:.3f} vs zero-shot mAP {zero_shot['map']:.3f}")

records, _ = scan_dataset(root)
gallery = [str(r.path) for r in split_records(records, "gallery")]
queries = [str(r.path) for r in split_records(records, "query")[:3]]
run("embed", "--checkpoint", str(out / "stage2"), "--out", str(out / "gallery.emb"), *gallery)
run("embed", "--checkpoint", str(out / "stage2"), "--out", str(out / "query.emb"), *queries)
run(
    "rank", "--query", str(out / "query.emb"), "--gallery", str(out / "gallery.emb"),
    "--top", "3", "--out", str(out / "ranks.csv"),
)
print("\ntop-3 matches per query:")
print((out / "ranks.csv").read_text())
