"""Drive the whole pipeline through the command-line interface.

Every stage of the workflow is a `tally` subcommand that reads files,
writes files, and prints a single-line JSON summary — so the full recipe
is scriptable without touching the Python API. This demo fabricates a
miniature three-concept world (tiger / cat / cash machine, twelve
captions, one tiger-shark trap) in a temporary directory, then shells out
to each subcommand in order, echoing the command line and its summary.

Run it and read the output top to bottom: it is the pipeline.
"""

import json
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from tally.embeddings import EmbeddingMatrix, save_embeddings

CAPTIONS = [
    (0, "a tiger walking in the grass", 0),
    (1, "tiger shark swimming in water", 0),   # matches "tiger", judged off-topic
    (2, "portrait of panthera tigris", 0),
    (3, "big cat resting on a rock", 1),
    (4, "a small cat on the sofa", 1),
    (5, "cat chasing a toy", 1),
    (6, "withdrawing cash from the atm", 2),
    (7, "atm outside the bank", 2),
    (8, "broken atm machine", 2),
    (9, "an old cash machine in the wall", 2),
    (10, "a sunny beach with palm trees", None),
    (11, "mountain lake at dawn", None),
]
SYNONYM_CONCEPT = {"tiger": 0, "panthera tigris": 0, "big cat": 0, "cat": 1,
                   "cash machine": 2, "atm": 2}


def write_jsonl(path: Path, rows: list[dict]) -> None:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def build_world(root: Path) -> None:
    rng = np.random.default_rng(42)
    dim = 8
    protos = rng.standard_normal((3, dim))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    def noisy(concept_id, sigma):
        v = rng.standard_normal(dim) if concept_id is None else (
            protos[concept_id] + sigma * rng.standard_normal(dim))
        return v / np.linalg.norm(v)

    def emb_file(name, keys, vectors):
        mat = EmbeddingMatrix(keys, np.stack(vectors).astype(np.float32), normalized=True)
        save_embeddings(mat, str(root / f"{name}.bin"))

    write_jsonl(root / "concepts.jsonl", [
        {"concept_id": 0, "name": "tiger", "definition": "a large striped cat"},
        {"concept_id": 1, "name": "cat", "definition": "a small domestic feline"},
        {"concept_id": 2, "name": "cash machine", "definition": "a bank teller machine"},
    ])
    write_jsonl(root / "corpus.jsonl", [{"id": i, "text": t} for i, t, _ in CAPTIONS])
    write_jsonl(root / "provider_fixture.jsonl", [
        {"name": "tiger", "synonyms": ["panthera tigris", "big cat"]},
        {"name": "cat", "synonyms": ["big cat"]},
        {"name": "cash machine", "synonyms": ["atm"]},
    ])
    write_jsonl(root / "blocklist.jsonl",
                [{"name": "tiger", "reject_phrases": ["tiger shark"]}])
    (root / "acc.csv").write_text("concept_id,accuracy\n0,0.5\n1,0.7\n2,0.9\n")
    (root / "labels.csv").write_text(
        "id,concept_id\n" + "".join(f"t{i},{i // 3}\n" for i in range(9)))

    synonyms = list(SYNONYM_CONCEPT)
    emb_file("synonyms", synonyms, [noisy(SYNONYM_CONCEPT[s], 0.1) for s in synonyms])
    emb_file("prompts", [f"a photo of {s}" for s in synonyms],
             [noisy(SYNONYM_CONCEPT[s], 0.1) for s in synonyms])
    emb_file("captions", [str(i) for i, _, _ in CAPTIONS],
             [noisy(cid, 0.25) for _, _, cid in CAPTIONS])
    emb_file("images",
             [str(i) for i, _, _ in CAPTIONS] + [f"t{i}" for i in range(9)],
             [noisy(cid, 0.25) for _, _, cid in CAPTIONS]
             + [noisy(i // 3, 0.15) for i in range(9)])


def tally(*args: str) -> dict:
    print("$ tally " + " ".join(args))
    proc = subprocess.run(
        [sys.executable, "-m", "tally.cli", *args], capture_output=True, text=True
    )
    if proc.returncode != 0:
        raise SystemExit(f"exit {proc.returncode}: {proc.stderr.strip()}")
    print(" ", proc.stdout.strip(), "\n")
    return json.loads(proc.stdout)


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        build_world(root)
        a = lambda name: str(root / name)  # noqa: E731

        tally("synonyms", "--concepts", a("concepts.jsonl"),
              "--fixture", a("provider_fixture.jsonl"),
              "--cache-dir", a("cache"), "--out", a("synsets.jsonl"))
        tally("scan", "--corpus", a("corpus.jsonl"), "--synonyms", a("synsets.jsonl"),
              "--concepts", a("concepts.jsonl"),
              "--out", a("hits.jsonl"), "--freq-out", a("rawfreq.csv"))
        tally("judge", "--concepts", a("concepts.jsonl"), "--corpus", a("corpus.jsonl"),
              "--hits", a("hits.jsonl"), "--blocklist", a("blocklist.jsonl"),
              "--cache-dir", a("cache"), "--out", a("verdicts.jsonl"))
        tally("freq", "--hits", a("hits.jsonl"), "--verdicts", a("verdicts.jsonl"),
              "--concepts", a("concepts.jsonl"),
              "--out", a("freq.csv"), "--syn-out", a("syncounts.csv"))
        tally("analyze", "--freq", a("freq.csv"), "--acc", a("acc.csv"),
              "--out-dir", a("run"))
        tally("prompt", "--synonyms", a("synsets.jsonl"), "--syn-counts", a("syncounts.csv"),
              "--templates", "photo_of", "--embeddings", f"prompts={a('prompts.bin')}",
              "--out", a("wzs.bin"), "--report", a("chosen.csv"))
        tally("retrieve", "--hits", a("hits.jsonl"), "--verdicts", a("verdicts.jsonl"),
              "--synonyms", a("synsets.jsonl"),
              "--embeddings", f"captions={a('captions.bin')}",
              "--embeddings", f"synonyms={a('synonyms.bin')}",
              "--k", "2", "--out", a("retrieval.jsonl"))
        tally("train", "--retrieval", a("retrieval.jsonl"), "--init", a("wzs.bin"),
              "--synonyms", a("synsets.jsonl"),
              "--embeddings", f"images={a('images.bin')}",
              "--embeddings", f"synonyms={a('synonyms.bin')}",
              "--lr", "0.1", "--seed", "1",
              "--out", a("w.bin"), "--ensemble-out", a("wbar.bin"))
        for weights, out in (("wzs.bin", "acc_a_zeroshot.csv"),
                             ("wbar.bin", "acc_b_ensemble.csv")):
            tally("eval", "--weights", a(weights),
                  "--embeddings", f"images={a('images.bin')}",
                  "--labels", a("labels.csv"), "--out", str(root / "run" / out))

        shutil.copy(a("freq.csv"), root / "run" / "freq.csv")
        shutil.copy(a("chosen.csv"), root / "run" / "chosen.csv")
        tally("report", "--run-dir", a("run"), "--out", a("report.md"))

        print("--- report.md " + "-" * 50)
        print((root / "report.md").read_text())


if __name__ == "__main__":
    main()
