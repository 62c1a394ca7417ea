"""Concept vocabularies and synonym expansion.

A concept is (concept_id, name, definition). Each concept gets a SynonymSet:
the normalized original name first, then provider-suggested alternatives,
normalized and deduplicated, each tagged with where it came from. Synonym
lists drive both corpus matching and prompt construction, so their order is
part of the contract (ties in downstream argmaxes resolve by list position).

Providers are pluggable: an HTTP endpoint (POST /synonyms {"name": ...} ->
{"synonyms": [...]}) for real runs, a fixture file for tests and offline
work. Responses are cached on disk per provider, keyed by concept name, so
re-runs are deterministic and free.
"""

from __future__ import annotations

import json
import logging
import os
import threading
from dataclasses import dataclass, field

import numpy as np
import requests

from .corpus import normalize_text
from .embeddings import EmbeddingMatrix
from .errors import InputError, ProviderError

logger = logging.getLogger(__name__)

PROVENANCE_ORIGINAL = "original"
PROVENANCE_PROVIDER = "provider"
PROVENANCE_MANUAL = "manual"
_PROVENANCE_TAGS = (PROVENANCE_ORIGINAL, PROVENANCE_PROVIDER, PROVENANCE_MANUAL)


@dataclass(frozen=True)
class Concept:
    concept_id: int
    name: str
    definition: str = ""

    def __post_init__(self):
        if not self.name or not self.name.strip():
            raise InputError(f"concept {self.concept_id} has an empty name")


class ConceptSet:
    """Ordered collection of concepts with unique ids."""

    def __init__(self, concepts: list[Concept]):
        self.concepts = list(concepts)
        self._by_id: dict[int, Concept] = {}
        for c in self.concepts:
            if c.concept_id in self._by_id:
                raise InputError(f"duplicate concept_id {c.concept_id}")
            self._by_id[c.concept_id] = c

    def __iter__(self):
        return iter(self.concepts)

    def __len__(self):
        return len(self.concepts)

    def __getitem__(self, concept_id: int) -> Concept:
        try:
            return self._by_id[concept_id]
        except KeyError:
            raise InputError(f"unknown concept_id {concept_id}") from None

    def __contains__(self, concept_id: int) -> bool:
        return concept_id in self._by_id

    @property
    def ids(self) -> list[int]:
        return [c.concept_id for c in self.concepts]

    @classmethod
    def from_jsonl(cls, path: str) -> "ConceptSet":
        concepts = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    concepts.append(
                        Concept(
                            concept_id=int(obj["concept_id"]),
                            name=str(obj["name"]),
                            definition=str(obj.get("definition", "")),
                        )
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise InputError(f"{path}:{lineno}: bad concept record: {e}") from e
        return cls(concepts)

    def to_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for c in self.concepts:
                f.write(
                    json.dumps(
                        {"concept_id": c.concept_id, "name": c.name, "definition": c.definition},
                        sort_keys=True,
                    )
                    + "\n"
                )


@dataclass
class SynonymSet:
    """Normalized, deduplicated synonyms for one concept; original name first."""

    concept_id: int
    synonyms: list[str]
    provenance: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.synonyms:
            raise InputError(f"concept {self.concept_id}: synonym list is empty")
        if len(self.provenance) != len(self.synonyms):
            raise InputError(
                f"concept {self.concept_id}: {len(self.synonyms)} synonyms "
                f"but {len(self.provenance)} provenance tags"
            )
        seen = set()
        for s in self.synonyms:
            if s != normalize_text(s) or not s:
                raise InputError(f"concept {self.concept_id}: synonym {s!r} is not normalized")
            if s in seen:
                raise InputError(f"concept {self.concept_id}: duplicate synonym {s!r}")
            seen.add(s)
        for tag in self.provenance:
            if tag not in _PROVENANCE_TAGS:
                raise InputError(f"concept {self.concept_id}: unknown provenance tag {tag!r}")

    @property
    def original(self) -> str:
        return self.synonyms[0]


class FixtureSynonymProvider:
    """Synonyms from an in-memory mapping or a JSONL file of {"name","synonyms"}."""

    def __init__(self, table: dict[str, list[str]], provider_id: str = "fixture"):
        self.table = dict(table)
        self.provider_id = provider_id

    @classmethod
    def from_jsonl(cls, path: str, provider_id: str = "fixture") -> "FixtureSynonymProvider":
        table = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    table[str(obj["name"])] = [str(s) for s in obj["synonyms"]]
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise InputError(f"{path}:{lineno}: bad synonym record: {e}") from e
        return cls(table, provider_id)

    def synonyms_for(self, name: str) -> list[str]:
        return list(self.table.get(name, []))


class HttpSynonymProvider:
    """POST {"name": <concept name>} to <base_url>/synonyms, expect {"synonyms": [...]}."""

    def __init__(self, base_url: str, provider_id: str | None = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.provider_id = provider_id or f"http:{self.base_url}"
        self.timeout = timeout

    def synonyms_for(self, name: str) -> list[str]:
        try:
            resp = requests.post(
                self.base_url + "/synonyms", json={"name": name}, timeout=self.timeout
            )
            resp.raise_for_status()
            payload = resp.json()
            return [str(s) for s in payload["synonyms"]]
        except (requests.RequestException, KeyError, TypeError, ValueError) as e:
            raise ProviderError(f"synonym provider failed for {name!r}: {e}") from e


class SynonymCache:
    """On-disk JSONL cache of provider responses, one file per provider id.

    Lines are {"name": <concept name>, "synonyms": [...]} — the raw provider
    response, before normalization, so changing the normalizer never
    invalidates a cache. Appends are serialized with a lock.
    """

    def __init__(self, cache_dir: str):
        self.cache_dir = str(cache_dir)
        os.makedirs(self.cache_dir, exist_ok=True)
        self._lock = threading.Lock()
        self._loaded: dict[str, dict[str, list[str]]] = {}

    def _path(self, provider_id: str) -> str:
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in provider_id)
        return os.path.join(self.cache_dir, f"synonyms_{safe}.jsonl")

    def _table(self, provider_id: str) -> dict[str, list[str]]:
        if provider_id not in self._loaded:
            table = {}
            path = self._path(provider_id)
            if os.path.exists(path):
                with open(path, encoding="utf-8") as f:
                    for line in f:
                        line = line.strip()
                        if line:
                            obj = json.loads(line)
                            table[obj["name"]] = list(obj["synonyms"])
            self._loaded[provider_id] = table
        return self._loaded[provider_id]

    def get(self, provider_id: str, name: str) -> list[str] | None:
        with self._lock:
            return self._table(provider_id).get(name)

    def put(self, provider_id: str, name: str, synonyms: list[str]) -> None:
        with self._lock:
            table = self._table(provider_id)
            if name in table:
                return
            table[name] = list(synonyms)
            with open(self._path(provider_id), "a", encoding="utf-8") as f:
                f.write(json.dumps({"name": name, "synonyms": synonyms}, sort_keys=True) + "\n")


def expand_synonyms(
    concept: Concept, provider, cache: SynonymCache | None = None
) -> SynonymSet:
    """Build the concept's SynonymSet from a provider (cache consulted first).

    The normalized original name always comes first; provider suggestions
    follow in response order, normalized, with duplicates (including of the
    name) dropped. An empty response degrades to the name alone with a
    warning. Provider failures propagate as ProviderError carrying the
    concept id.
    """
    name_norm = normalize_text(concept.name)
    if not name_norm:
        raise InputError(
            f"concept {concept.concept_id}: name {concept.name!r} normalizes to nothing"
        )
    raw = cache.get(provider.provider_id, concept.name) if cache else None
    if raw is None:
        try:
            raw = provider.synonyms_for(concept.name)
        except ProviderError as e:
            e.concept_id = concept.concept_id
            raise
        if cache:
            cache.put(provider.provider_id, concept.name, raw)
    if not raw:
        logger.warning(
            "concept %d (%r): provider %s returned no synonyms; using the name alone",
            concept.concept_id,
            concept.name,
            provider.provider_id,
        )
    synonyms = [name_norm]
    provenance = [PROVENANCE_ORIGINAL]
    for s in raw:
        s_norm = normalize_text(s)
        if s_norm and s_norm not in synonyms:
            synonyms.append(s_norm)
            provenance.append(PROVENANCE_PROVIDER)
    return SynonymSet(concept.concept_id, synonyms, provenance)


def filter_synonyms(
    sets: list[SynonymSet],
    concepts: ConceptSet,
    name_embeddings: EmbeddingMatrix,
    synonym_embeddings: EmbeddingMatrix,
) -> list[SynonymSet]:
    """Drop synonyms that sit closer to some other concept's name.

    A synonym s of concept c is retained iff cosine(emb(s), emb(name(c)))
    is at least its cosine to every other concept's name embedding (exact
    ties keep). The original name is always retained. Order is preserved,
    so the pass is idempotent. Embeddings are looked up by normalized name
    / synonym string; a missing key raises MissingEmbeddingError naming it.
    """
    ids = [s.concept_id for s in sets]
    name_keys = [normalize_text(concepts[cid].name) for cid in ids]
    name_mat = np.stack([name_embeddings.vector(k) for k in name_keys]).astype(np.float64)
    name_norms = np.linalg.norm(name_mat, axis=1)
    if np.any(name_norms == 0.0):
        raise InputError("a concept name embedding is the zero vector")

    out = []
    for row, synset in enumerate(sets):
        kept_syn = []
        kept_prov = []
        for s, tag in zip(synset.synonyms, synset.provenance):
            if s == synset.original:
                kept_syn.append(s)
                kept_prov.append(tag)
                continue
            v = np.asarray(synonym_embeddings.vector(s), dtype=np.float64)
            nv = np.linalg.norm(v)
            if nv == 0.0:
                raise InputError(f"synonym {s!r} has a zero embedding")
            sims = (name_mat @ v) / (name_norms * nv)
            if sims[row] >= np.max(sims):
                kept_syn.append(s)
                kept_prov.append(tag)
            else:
                logger.info(
                    "concept %d: dropping synonym %r (closer to concept %d)",
                    synset.concept_id,
                    s,
                    ids[int(np.argmax(sims))],
                )
        out.append(SynonymSet(synset.concept_id, kept_syn, kept_prov))
    return out


def load_synonym_sets(path: str) -> list[SynonymSet]:
    """Read the synonyms artifact: JSONL {"concept_id","name","synonyms","provenance"}."""
    sets = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                synonyms = [str(s) for s in obj["synonyms"]]
                provenance = [str(t) for t in obj.get("provenance", [])]
                if not provenance:
                    provenance = [PROVENANCE_ORIGINAL] + [PROVENANCE_PROVIDER] * (
                        len(synonyms) - 1
                    )
                sets.append(SynonymSet(int(obj["concept_id"]), synonyms, provenance))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise InputError(f"{path}:{lineno}: bad synonym set: {e}") from e
    if not sets:
        raise InputError(f"{path}: no synonym sets")
    return sets


def save_synonym_sets(sets: list[SynonymSet], concepts: ConceptSet, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in sets:
            f.write(
                json.dumps(
                    {
                        "concept_id": s.concept_id,
                        "name": concepts[s.concept_id].name,
                        "synonyms": s.synonyms,
                        "provenance": s.provenance,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
