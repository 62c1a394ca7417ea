"""Relevance judging: separate true concept mentions from string collisions.

A raw string match is only a candidate — "tiger shark swimming in water"
matches the pattern "tiger" without containing one. Each unique
(caption, concept) pair gets one verdict from a judge; filtered frequency
then counts only captions with at least one relevant hit.

Judges are pluggable:
  HttpJudge  — POST {"concept","definition","caption"} to <url>/judge,
               expects {"relevant": bool}; how the provider phrases the
               question is its business.
  RuleStubJudge — offline stand-in driven by per-concept blocklists: a
               caption is rejected iff it contains a blocklisted phrase.

Verdicts are cached on disk keyed by (judge_id, concept_id, caption hash),
so re-runs are deterministic and never re-query the provider. Transient
judge failures retry with exponential backoff; when the budget is spent the
pair is reported undecided and excluded from filtered counts rather than
silently counted either way.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field

import requests

from .analytics import FrequencyTable
from .corpus import normalize_text
from .errors import (
    ConsistencyError,
    InputError,
    ProviderError,
    UndefinedPrecisionError,
)
from .lexicon import Concept, ConceptSet
from .matcher import MatchHit

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class JudgeVerdict:
    caption_id: int
    concept_id: int
    relevant: bool
    judge_id: str


@dataclass
class ValidationSet:
    """Gold (caption, concept, relevant) triples for definition tuning."""

    pairs: list[tuple[int, int, bool]]  # (caption_id, concept_id, gold_relevant)
    per_concept_target: int = 32

    def __post_init__(self):
        seen = set()
        for caption_id, concept_id, _ in self.pairs:
            key = (caption_id, concept_id)
            if key in seen:
                raise InputError(f"duplicate validation pair {key}")
            seen.add(key)

    @classmethod
    def from_jsonl(cls, path: str, per_concept_target: int = 32) -> "ValidationSet":
        pairs = []
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    pairs.append(
                        (int(obj["caption_id"]), int(obj["concept_id"]), bool(obj["gold_relevant"]))
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise InputError(f"{path}:{lineno}: bad validation pair: {e}") from e
        if not pairs:
            raise InputError(f"{path}: empty validation set")
        return cls(pairs, per_concept_target)


class RuleStubJudge:
    """Deterministic offline judge: reject iff the caption contains any
    blocklisted phrase for the concept; accept otherwise.

    Blocklist phrases are normalized at load and tested by plain substring
    against the normalized caption.
    """

    def __init__(self, blocklists: dict[str, list[str]], judge_id: str = "rule-stub"):
        self.blocklists = {
            name: [normalize_text(p) for p in phrases] for name, phrases in blocklists.items()
        }
        self.judge_id = judge_id

    @classmethod
    def from_jsonl(cls, path: str, judge_id: str = "rule-stub") -> "RuleStubJudge":
        """Load JSONL of {"name": <concept name>, "reject_phrases": [...]}."""
        table = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    table[str(obj["name"])] = [str(p) for p in obj["reject_phrases"]]
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise InputError(f"{path}:{lineno}: bad blocklist record: {e}") from e
        return cls(table, judge_id)

    def judge(self, concept: Concept, caption: str, definition: str | None = None) -> bool:
        caption_norm = normalize_text(caption)
        for phrase in self.blocklists.get(concept.name, []):
            if phrase and phrase in caption_norm:
                return False
        return True


class HttpJudge:
    """POST {"concept","definition","caption"} to <base_url>/judge."""

    def __init__(self, base_url: str, judge_id: str | None = None, timeout: float = 30.0):
        self.base_url = base_url.rstrip("/")
        self.judge_id = judge_id or f"http:{self.base_url}"
        self.timeout = timeout

    def judge(self, concept: Concept, caption: str, definition: str | None = None) -> bool:
        payload = {
            "concept": concept.name,
            "definition": concept.definition if definition is None else definition,
            "caption": caption,
        }
        try:
            resp = requests.post(self.base_url + "/judge", json=payload, timeout=self.timeout)
            resp.raise_for_status()
            out = resp.json()
            relevant = out["relevant"]
            if not isinstance(relevant, bool):
                raise TypeError(f"'relevant' is {type(relevant).__name__}, not bool")
            return relevant
        except (requests.RequestException, KeyError, TypeError, ValueError) as e:
            raise ProviderError(
                f"judge failed for concept {concept.concept_id}: {e}", concept.concept_id
            ) from e


def caption_hash(norm_text: str) -> str:
    return hashlib.sha256(norm_text.encode("utf-8")).hexdigest()


class VerdictCache:
    """Append-only JSONL cache of verdicts keyed (judge_id, concept_id, caption hash)."""

    def __init__(self, cache_dir: str):
        self.cache_dir = str(cache_dir)
        os.makedirs(self.cache_dir, exist_ok=True)
        self.path = os.path.join(self.cache_dir, "verdicts.jsonl")
        self._lock = threading.Lock()
        self._table: dict[tuple[str, int, str], bool] = {}
        if os.path.exists(self.path):
            with open(self.path, encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if line:
                        obj = json.loads(line)
                        key = (obj["judge_id"], int(obj["concept_id"]), obj["caption_sha256"])
                        self._table[key] = bool(obj["relevant"])

    def get(self, judge_id: str, concept_id: int, cap_hash: str) -> bool | None:
        with self._lock:
            return self._table.get((judge_id, concept_id, cap_hash))

    def put(self, judge_id: str, concept_id: int, cap_hash: str, relevant: bool) -> None:
        with self._lock:
            key = (judge_id, concept_id, cap_hash)
            if key in self._table:
                return
            self._table[key] = relevant
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(
                    json.dumps(
                        {
                            "judge_id": judge_id,
                            "concept_id": concept_id,
                            "caption_sha256": cap_hash,
                            "relevant": relevant,
                        },
                        sort_keys=True,
                    )
                    + "\n"
                )


@dataclass
class JudgeOutcome:
    verdicts: list[JudgeVerdict]
    undecided: list[tuple[int, int]] = field(default_factory=list)  # (caption_id, concept_id)


def judge_hits(
    hits: list[MatchHit],
    concepts: ConceptSet,
    captions: dict[int, str],
    judge,
    *,
    cache: VerdictCache | None = None,
    max_attempts: int = 3,
    backoff_s: float = 0.5,
    max_workers: int = 1,
) -> JudgeOutcome:
    """One verdict per unique (caption, concept) pair among the hits.

    `captions` maps caption_id -> normalized text (only ids appearing in
    hits are required). Provider failures retry up to max_attempts with
    exponential backoff; an exhausted budget marks the pair undecided
    rather than failing the run. Verdict order follows first appearance in
    the hit stream regardless of worker count.
    """
    pairs: list[tuple[int, int]] = []
    seen = set()
    for h in hits:
        key = (h.caption_id, h.concept_id)
        if key not in seen:
            seen.add(key)
            pairs.append(key)
    for caption_id, concept_id in pairs:
        if caption_id not in captions:
            raise InputError(f"no caption text supplied for caption_id {caption_id}")
        concepts[concept_id]  # raises InputError when unknown

    def decide(pair: tuple[int, int]) -> JudgeVerdict | tuple[int, int]:
        caption_id, concept_id = pair
        concept = concepts[concept_id]
        text = captions[caption_id]
        cap_hash = caption_hash(text)
        if cache is not None:
            hit = cache.get(judge.judge_id, concept_id, cap_hash)
            if hit is not None:
                return JudgeVerdict(caption_id, concept_id, hit, judge.judge_id)
        last_error: Exception | None = None
        for attempt in range(max_attempts):
            try:
                relevant = judge.judge(concept, text)
                if cache is not None:
                    cache.put(judge.judge_id, concept_id, cap_hash, relevant)
                return JudgeVerdict(caption_id, concept_id, relevant, judge.judge_id)
            except ProviderError as e:
                last_error = e
                if attempt + 1 < max_attempts and backoff_s > 0:
                    time.sleep(backoff_s * (2**attempt))
        logger.warning(
            "judge gave no verdict for caption %d / concept %d after %d attempts: %s",
            caption_id,
            concept_id,
            max_attempts,
            last_error,
        )
        return pair

    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(decide, pairs))
    else:
        results = [decide(p) for p in pairs]

    outcome = JudgeOutcome(verdicts=[])
    for r in results:
        if isinstance(r, JudgeVerdict):
            outcome.verdicts.append(r)
        else:
            outcome.undecided.append(r)
    return outcome


def filtered_frequency(
    hits: list[MatchHit],
    verdicts: list[JudgeVerdict],
    concepts: ConceptSet | None = None,
    *,
    undecided: list[tuple[int, int]] | None = None,
    corpus_id: str = "",
) -> FrequencyTable:
    """Per-concept counts of captions with ≥1 hit (raw) and ≥1 relevant hit
    (filtered).

    Every (caption, concept) pair in the hits must carry a verdict or be
    listed as undecided — anything else is a ConsistencyError, because a
    silently unjudged hit would make raw and filtered counts incomparable.
    Undecided pairs count toward raw but not filtered.
    """
    verdict_map: dict[tuple[int, int], bool] = {}
    for v in verdicts:
        verdict_map[(v.caption_id, v.concept_id)] = v.relevant
    undecided_set = set(undecided or [])

    raw_caps: dict[int, set[int]] = {}
    filt_caps: dict[int, set[int]] = {}
    for h in hits:
        key = (h.caption_id, h.concept_id)
        raw_caps.setdefault(h.concept_id, set()).add(h.caption_id)
        if key in undecided_set:
            continue
        if key not in verdict_map:
            raise ConsistencyError(
                f"hit (caption {h.caption_id}, concept {h.concept_id}) has no verdict "
                f"and is not marked undecided"
            )
        if verdict_map[key]:
            filt_caps.setdefault(h.concept_id, set()).add(h.caption_id)

    ids = concepts.ids if concepts is not None else sorted(raw_caps)
    counts = {
        cid: (len(raw_caps.get(cid, ())), len(filt_caps.get(cid, ()))) for cid in ids
    }
    return FrequencyTable(counts, corpus_id=corpus_id)


def filtered_synonym_counts(
    hits: list[MatchHit],
    verdicts: list[JudgeVerdict],
    *,
    undecided: list[tuple[int, int]] | None = None,
) -> dict[tuple[int, str], int]:
    """Captions per (concept, synonym) counting only judged-relevant pairs."""
    verdict_map = {(v.caption_id, v.concept_id): v.relevant for v in verdicts}
    undecided_set = set(undecided or [])
    caps: dict[tuple[int, str], set[int]] = {}
    for h in hits:
        key = (h.caption_id, h.concept_id)
        if key in undecided_set:
            continue
        if key not in verdict_map:
            raise ConsistencyError(
                f"hit (caption {h.caption_id}, concept {h.concept_id}) has no verdict "
                f"and is not marked undecided"
            )
        if verdict_map[key]:
            caps.setdefault((h.concept_id, h.synonym), set()).add(h.caption_id)
    return {key: len(ids) for key, ids in caps.items()}


def definition_precision(
    concept: Concept,
    definition: str,
    validation: ValidationSet,
    judge,
    captions: dict[int, str],
) -> float:
    """Precision of a candidate definition on the concept's validation pairs.

    precision = |judged relevant ∧ gold relevant| / |judged relevant|.
    Zero judged-relevant pairs leave precision undefined and raise — a 0
    would look like a terrible definition when the judge simply rejected
    everything. Judges are queried directly (never through the verdict
    cache) so a definition edit is actually re-evaluated.
    """
    pairs = [(cap, gold) for cap, cid, gold in validation.pairs if cid == concept.concept_id]
    if not pairs:
        raise InputError(f"validation set has no pairs for concept {concept.concept_id}")
    judged_relevant = 0
    agree = 0
    for caption_id, gold in pairs:
        if caption_id not in captions:
            raise InputError(f"no caption text supplied for caption_id {caption_id}")
        if judge.judge(concept, captions[caption_id], definition=definition):
            judged_relevant += 1
            if gold:
                agree += 1
    if judged_relevant == 0:
        raise UndefinedPrecisionError(
            f"concept {concept.concept_id}: judge marked zero validation pairs relevant"
        )
    return agree / judged_relevant


def save_verdicts(outcome: JudgeOutcome, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for v in outcome.verdicts:
            f.write(
                json.dumps(
                    {
                        "caption_id": v.caption_id,
                        "concept_id": v.concept_id,
                        "relevant": v.relevant,
                        "judge_id": v.judge_id,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
        for caption_id, concept_id in outcome.undecided:
            f.write(
                json.dumps(
                    {
                        "caption_id": caption_id,
                        "concept_id": concept_id,
                        "relevant": None,
                        "judge_id": "",
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def load_verdicts(path: str) -> JudgeOutcome:
    outcome = JudgeOutcome(verdicts=[])
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if obj["relevant"] is None:
                    outcome.undecided.append((int(obj["caption_id"]), int(obj["concept_id"])))
                else:
                    outcome.verdicts.append(
                        JudgeVerdict(
                            int(obj["caption_id"]),
                            int(obj["concept_id"]),
                            bool(obj["relevant"]),
                            str(obj.get("judge_id", "")),
                        )
                    )
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise InputError(f"{path}:{lineno}: bad verdict record: {e}") from e
    return outcome
