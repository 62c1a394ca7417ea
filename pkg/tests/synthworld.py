"""Synthetic world generator for the end-to-end pipeline rehearsal.

Builds a 100k-caption corpus with 50 concepts at Zipf-distributed planted
frequencies, planted synonym preferences (some concepts are mentioned mostly
by an alternative form), ambiguity traps (a "<name> shark" phrase that the
judge must reject), and unit-norm embedding files whose class separability
decreases as concepts get rarer.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from tally.corpus import normalize_text
from tally.embeddings import EmbeddingMatrix, save_embeddings

N_CONCEPTS = 50
DIM = 64
CAPTION_TOTAL = 100_000
ZIPF_EXPONENT = 1.1
ZIPF_BASE = 14_000
TRAP_CONCEPTS = range(10)
TRAP_RATE = 0.25
ALT_DOMINANT = {i for i in range(N_CONCEPTS) if i % 5 == 2}
TESTS_PER_CLASS = 50

FILLER = [
    "river", "meadow", "harbor", "lantern", "orchard",
    "cliff", "market", "bridge", "garden", "valley",
]


def primary_name(i: int) -> str:
    return f"zorp{i:02d}"


def alt_name(i: int) -> str:
    return f"glim{i:02d}"


def sigma_caption(i: int) -> float:
    """Image/caption embedding noise grows as the concept gets rarer."""
    return 0.35 + 0.90 * (i / (N_CONCEPTS - 1)) ** 2.0


def sigma_prompt(i: int) -> float:
    """Prompt embeddings degrade sharply for rare concepts, so the
    zero-shot rows are weakest exactly where retrieval has to help."""
    return 0.25 + 1.75 * (i / (N_CONCEPTS - 1)) ** 2.0


@dataclass
class SynthWorld:
    root: Path
    paths: dict
    planted: dict  # concept_id -> relevant caption count (expected filtered)
    raw_expected: dict  # concept_id -> relevant + trap count (expected raw)
    test_ids: list


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def make_world(root: Path, seed: int = 20260814) -> SynthWorld:
    rng = np.random.default_rng(seed)
    paths = {}

    planted = {
        i: max(150, round(ZIPF_BASE * (i + 1) ** -ZIPF_EXPONENT))
        for i in range(N_CONCEPTS)
    }
    traps = {i: round(planted[i] * TRAP_RATE) for i in TRAP_CONCEPTS}
    raw_expected = {i: planted[i] + traps.get(i, 0) for i in range(N_CONCEPTS)}

    # ---- caption text ----------------------------------------------------
    rows = []  # (concept_id or None, is_trap, text)
    for i in range(N_CONCEPTS):
        n_alt = round(planted[i] * (0.7 if i in ALT_DOMINANT else 0.25))
        for j in range(planted[i]):
            syn = alt_name(i) if j < n_alt else primary_name(i)
            w = FILLER[int(rng.integers(len(FILLER)))]
            if j % 2 == 0:
                text = f"a photo of {syn} near the {w}"
            else:
                text = f"the {syn} resting by a {w}"
            rows.append((i, False, text))
        for _ in range(traps.get(i, 0)):
            w = FILLER[int(rng.integers(len(FILLER)))]
            rows.append((i, True, f"a {primary_name(i)} shark cruising the {w}"))

    n_filler = CAPTION_TOTAL - len(rows)
    assert n_filler >= 0, "planted captions exceed the corpus budget"
    for _ in range(n_filler):
        w = rng.choice(FILLER, size=3)
        rows.append((None, False, f"{w[0]} {w[1]} and a {w[2]}"))

    order = rng.permutation(len(rows))
    corpus_path = root / "corpus.jsonl"
    matched = []  # (caption_id, concept_id, is_trap)
    import json

    with open(corpus_path, "w", encoding="utf-8") as f:
        for caption_id, row_idx in enumerate(order):
            concept_id, is_trap, text = rows[row_idx]
            f.write(json.dumps({"id": caption_id, "text": text}) + "\n")
            if concept_id is not None:
                matched.append((caption_id, concept_id, is_trap))
    paths["corpus"] = str(corpus_path)

    # ---- concept metadata, provider fixture, judge blocklist -------------
    def write_jsonl(name, objs):
        p = root / name
        with open(p, "w", encoding="utf-8") as f:
            for obj in objs:
                f.write(json.dumps(obj) + "\n")
        paths[name.split(".")[0]] = str(p)

    write_jsonl("concepts.jsonl", [
        {"concept_id": i, "name": primary_name(i),
         "definition": f"the {primary_name(i)} creature"}
        for i in range(N_CONCEPTS)
    ])
    write_jsonl("fixture.jsonl", [
        {"name": primary_name(i), "synonyms": [alt_name(i)]}
        for i in range(N_CONCEPTS)
    ])
    write_jsonl("blocklist.jsonl", [
        {"name": primary_name(i), "reject_phrases": [f"{primary_name(i)} shark"]}
        for i in TRAP_CONCEPTS
    ])

    # ---- embeddings -------------------------------------------------------
    protos = rng.standard_normal((N_CONCEPTS, DIM))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)

    def noisy(i: int, sigma: float) -> np.ndarray:
        # noise with norm exactly sigma, so cos(vector, prototype) ~ 1/sqrt(1+sigma^2)
        # regardless of the embedding dimension
        g = rng.standard_normal(DIM)
        return _unit(protos[i] + sigma * (g / np.linalg.norm(g)))

    def dump(name: str, keys: list, vecs: list) -> None:
        mat = EmbeddingMatrix(keys, np.stack(vecs).astype(np.float32), normalized=True)
        p = root / f"{name}.bin"
        save_embeddings(mat, str(p))
        paths[name] = str(p)

    synonyms = [primary_name(i) for i in range(N_CONCEPTS)] + [
        alt_name(i) for i in range(N_CONCEPTS)
    ]
    syn_concept = {primary_name(i): i for i in range(N_CONCEPTS)}
    syn_concept.update({alt_name(i): i for i in range(N_CONCEPTS)})
    dump("synonyms", synonyms, [noisy(syn_concept[s], 0.08) for s in synonyms])
    dump(
        "prompts",
        [f"a photo of {s}" for s in synonyms],
        [noisy(syn_concept[s], sigma_prompt(syn_concept[s])) for s in synonyms],
    )

    # Ranking vectors and training vectors are independent draws for the same
    # caption ids; traps get junk vectors so a filtering bug would hurt.
    caption_keys = [str(cid) for cid, _, _ in matched]

    def caption_vec(concept_id: int, is_trap: bool) -> np.ndarray:
        if is_trap:
            return _unit(rng.standard_normal(DIM))
        return noisy(concept_id, sigma_caption(concept_id))

    dump("captions", caption_keys, [caption_vec(c, t) for _, c, t in matched])

    test_ids = [f"test{n:04d}" for n in range(N_CONCEPTS * TESTS_PER_CLASS)]
    image_keys = caption_keys + test_ids
    image_vecs = [caption_vec(c, t) for _, c, t in matched] + [
        noisy(n // TESTS_PER_CLASS, sigma_caption(n // TESTS_PER_CLASS))
        for n in range(len(test_ids))
    ]
    dump("images", image_keys, image_vecs)

    labels_path = root / "labels.csv"
    with open(labels_path, "w", encoding="utf-8") as f:
        f.write("id,concept_id\n")
        for n, tid in enumerate(test_ids):
            f.write(f"{tid},{n // TESTS_PER_CLASS}\n")
    paths["labels"] = str(labels_path)

    for name in synonyms:
        assert normalize_text(name) == name  # tokens are already canonical

    return SynthWorld(
        root=root,
        paths=paths,
        planted=planted,
        raw_expected=raw_expected,
        test_ids=test_ids,
    )
