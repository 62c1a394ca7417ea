"""Frequency-aware zero-shot prompting.

The class name a benchmark ships is often not the string the pretraining
corpus uses ("cash machine" vs "atm"). Given per-synonym caption counts,
pick each concept's most frequent synonym, substitute it into prompt
templates, and average the prompt embeddings into one unit-norm classifier
row per concept. The result is a drop-in zero-shot weight matrix — no
training data, no learned parameters.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .embeddings import (
    EmbeddingMatrix,
    average_normalized,
    load_embeddings,
    save_embeddings,
)
from .errors import InputError
from .lexicon import SynonymSet

logger = logging.getLogger(__name__)

ROLES = ("W_zs", "W", "W_ensemble")

BUILTIN_TEMPLATES = {
    "plain": ["{}"],
    "photo_of": ["a photo of {}"],
}


@dataclass
class PromptTemplateSet:
    """Prompt templates, each containing exactly one '{}' placeholder."""

    templates: list[str]
    source: str = "custom"

    def __post_init__(self):
        if not self.templates:
            raise InputError("template set is empty")
        for t in self.templates:
            if t.count("{}") != 1:
                raise InputError(
                    f"template {t!r} must contain exactly one '{{}}' placeholder"
                )

    @classmethod
    def builtin(cls, name: str) -> "PromptTemplateSet":
        if name not in BUILTIN_TEMPLATES:
            raise InputError(
                f"unknown template set {name!r}; built-ins: {sorted(BUILTIN_TEMPLATES)}"
            )
        return cls(list(BUILTIN_TEMPLATES[name]), source=name)

    @classmethod
    def from_file(cls, path: str, source: str | None = None) -> "PromptTemplateSet":
        """One template per line; blank lines ignored."""
        with open(path, encoding="utf-8") as f:
            templates = [line.rstrip("\n") for line in f if line.strip()]
        return cls(templates, source=source or str(path))


def build_prompts(synonym: str, templates: PromptTemplateSet) -> list[str]:
    """Substitute the synonym into every template, placeholder verbatim."""
    return [t.replace("{}", synonym) for t in templates.templates]


def most_frequent_synonym(
    synset: SynonymSet, synonym_counts: dict[tuple[int, str], int]
) -> tuple[str, int]:
    """The synonym with the highest caption count; list order breaks ties.

    `synonym_counts` maps (concept_id, synonym) -> count (filtered counts
    when a judge run exists, raw otherwise). When every synonym counts
    zero there is no evidence to prefer anything, so the original name is
    returned with a warning.
    """
    counts = [synonym_counts.get((synset.concept_id, s), 0) for s in synset.synonyms]
    best = max(counts)
    if best == 0:
        logger.warning(
            "concept %d: all synonym counts are zero; keeping original name %r",
            synset.concept_id,
            synset.original,
        )
        return synset.original, 0
    return synset.synonyms[counts.index(best)], best


@dataclass
class ClassifierWeights:
    """A (concepts × dim) float32 weight matrix with a role tag.

    Roles: W_zs (zero-shot, unit-norm rows), W (trained), W_ensemble
    (elementwise sum of the two). Row order follows concept_ids.
    """

    role: str
    concept_ids: list[int]
    matrix: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.role not in ROLES:
            raise InputError(f"unknown weights role {self.role!r}; expected one of {ROLES}")
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.concept_ids):
            raise InputError(
                f"weights shape {self.matrix.shape} does not match "
                f"{len(self.concept_ids)} concepts"
            )
        if len(set(self.concept_ids)) != len(self.concept_ids):
            raise InputError("duplicate concept_ids in classifier weights")
        if not np.all(np.isfinite(self.matrix)):
            raise InputError("classifier weights contain NaN or Inf")
        if self.role == "W_zs" and len(self.concept_ids):
            norms = np.linalg.norm(self.matrix.astype(np.float64), axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > 1e-4:
                raise InputError(f"W_zs row norm deviates from 1 by {worst:.2e}")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: str) -> None:
        """Write the matrix in the embedding binary format + JSON sidecar."""
        mat = EmbeddingMatrix(
            [str(cid) for cid in self.concept_ids],
            self.matrix,
            normalized=(self.role == "W_zs"),
        )
        save_embeddings(mat, path)
        with open(str(path) + ".json", "w", encoding="utf-8") as f:
            json.dump(
                {"role": self.role, "concept_ids": self.concept_ids, "provenance": self.provenance},
                f,
                sort_keys=True,
                indent=2,
            )
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "ClassifierWeights":
        mat = load_embeddings(path)
        with open(str(path) + ".json", encoding="utf-8") as f:
            sidecar = json.load(f)
        concept_ids = [int(c) for c in sidecar["concept_ids"]]
        if [str(c) for c in concept_ids] != mat.keys:
            raise InputError(f"{path}: sidecar concept_ids disagree with matrix keys")
        return cls(
            role=sidecar["role"],
            concept_ids=concept_ids,
            matrix=mat.data,
            provenance=sidecar.get("provenance", {}),
        )


def build_zeroshot(
    concept_prompts: list[tuple[int, list[str]]],
    prompt_embeddings: EmbeddingMatrix,
    provenance: dict | None = None,
) -> ClassifierWeights:
    """Average each concept's prompt embeddings into one unit-norm row.

    Convention: L2-normalize each prompt embedding, average, renormalize.
    `concept_prompts` is [(concept_id, [prompt strings...]), ...] in row
    order; prompt embeddings are looked up by exact prompt string.
    """
    rows = []
    for concept_id, prompts in concept_prompts:
        if not prompts:
            raise InputError(f"concept {concept_id}: no prompts to embed")
        vecs = np.stack([prompt_embeddings.vector(p) for p in prompts]).astype(np.float64)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise InputError(f"concept {concept_id}: a prompt embedding is the zero vector")
        rows.append(average_normalized(vecs / norms))
    matrix = np.stack(rows).astype(np.float32)
    return ClassifierWeights(
        role="W_zs",
        concept_ids=[cid for cid, _ in concept_prompts],
        matrix=matrix,
        provenance=provenance or {},
    )


def classify(weights: ClassifierWeights, image_emb: np.ndarray) -> tuple[int, np.ndarray]:
    """Argmax of W · x; exact logit ties resolve to the smallest concept_id."""
    x = np.asarray(image_emb, dtype=np.float32)
    if x.shape != (weights.dim,):
        raise InputError(f"query shape {x.shape} does not match dim {weights.dim}")
    logits = weights.matrix @ x
    best = np.max(logits)
    tied = [cid for cid, v in zip(weights.concept_ids, logits) if v == best]
    return min(tied), logits


def classify_batch(weights: ClassifierWeights, queries: np.ndarray) -> np.ndarray:
    """Vectorized classify: (n × dim) queries -> n predicted concept_ids.

    Matches `classify` exactly, including the smallest-concept-id tie rule:
    columns are scanned in ascending concept_id order and argmax returns
    the first maximum.
    """
    queries = np.ascontiguousarray(queries, dtype=np.float32)
    if queries.ndim != 2 or queries.shape[1] != weights.dim:
        raise InputError(f"queries shape {queries.shape} does not match dim {weights.dim}")
    order = np.argsort(np.asarray(weights.concept_ids))
    logits = queries @ weights.matrix[order].T
    ids_sorted = np.asarray(weights.concept_ids)[order]
    return ids_sorted[np.argmax(logits, axis=1)]


def chosen_synonym_report(
    sets: list[SynonymSet],
    synonym_counts: dict[tuple[int, str], int],
    names: dict[int, str],
) -> list[tuple[int, str, str, int]]:
    """Rows (concept_id, original name, chosen synonym, count) for the report CSV."""
    rows = []
    for synset in sets:
        chosen, count = most_frequent_synonym(synset, synonym_counts)
        rows.append((synset.concept_id, names[synset.concept_id], chosen, count))
    return rows
