"""Balanced retrieval and cross-modal linear probing.

Web data is long-tailed, so "take whatever matches" hands the head classes
thousands of examples and the tail a handful. Instead: per concept, rank
the captions that matched it by cosine similarity between the caption
embedding and the concept's averaged synonym embedding, keep the same
top-K everywhere, and train one linear classifier on the pooled retrieved
image embeddings plus the concepts' text embeddings. The trained matrix W
is summed elementwise with the zero-shot matrix W_zs — no mixing
coefficient — which consistently beats either alone.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .analytics import AccuracyTable, mean_per_class_accuracy
from .embeddings import EmbeddingMatrix, average_normalized
from .errors import DivergenceError, InputError
from .lexicon import SynonymSet
from .matcher import MatchHit
from .realprompt import ClassifierWeights

logger = logging.getLogger(__name__)

DEFAULT_K = 500
K_SWEEP = (100, 500)

TRAIN_MODES = ("cross_modal", "image_only")


@dataclass
class RetrievalSet:
    """Per-concept ranked caption ids with scores; shortfalls made explicit."""

    k: int
    ranked: dict[int, list[tuple[int, float]]]  # concept_id -> [(caption_id, score)]

    def __post_init__(self):
        for cid, rows in self.ranked.items():
            if len(rows) > self.k:
                raise InputError(f"concept {cid}: {len(rows)} retrieved rows exceed K={self.k}")

    @property
    def shortfall(self) -> dict[int, int]:
        """Concepts that could not fill K, with how many rows are missing."""
        return {cid: self.k - len(rows) for cid, rows in self.ranked.items() if len(rows) < self.k}

    def to_jsonl(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for cid in sorted(self.ranked):
                for rank, (caption_id, score) in enumerate(self.ranked[cid]):
                    f.write(
                        json.dumps(
                            {
                                "concept_id": cid,
                                "caption_id": caption_id,
                                "score": float(score),
                                "rank": rank,
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )

    @classmethod
    def from_jsonl(cls, path: str, k: int | None = None) -> "RetrievalSet":
        ranked: dict[int, list[tuple[int, int, float]]] = {}
        with open(path, encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    ranked.setdefault(int(obj["concept_id"]), []).append(
                        (int(obj["rank"]), int(obj["caption_id"]), float(obj["score"]))
                    )
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise InputError(f"{path}:{lineno}: bad retrieval record: {e}") from e
        if not ranked:
            raise InputError(f"{path}: empty retrieval set")
        out: dict[int, list[tuple[int, float]]] = {}
        for cid, rows in ranked.items():
            rows.sort()
            if [r for r, _, _ in rows] != list(range(len(rows))):
                raise InputError(f"concept {cid}: ranks are not contiguous from 0")
            out[cid] = [(caption_id, score) for _, caption_id, score in rows]
        if k is None:
            k = max(len(rows) for rows in out.values())
        return cls(k=k, ranked=out)


def concept_queries(
    sets: list[SynonymSet],
    synonym_embeddings: EmbeddingMatrix,
    *,
    use_synonyms: bool = True,
) -> dict[int, np.ndarray]:
    """Unit-norm query vector per concept.

    use_synonyms=True averages all synonym embeddings (normalized first);
    False uses the bare original-name embedding alone.
    """
    queries = {}
    for synset in sets:
        keys = synset.synonyms if use_synonyms else [synset.original]
        vecs = np.stack([synonym_embeddings.vector(k) for k in keys]).astype(np.float64)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        if np.any(norms == 0.0):
            raise InputError(f"concept {synset.concept_id}: a synonym embedding is zero")
        queries[synset.concept_id] = average_normalized(vecs / norms)
    return queries


def retrieve_balanced(
    hits: list[MatchHit],
    caption_embeddings: EmbeddingMatrix,
    queries: dict[int, np.ndarray],
    k: int = DEFAULT_K,
    *,
    restrict_to: set[tuple[int, int]] | None = None,
) -> RetrievalSet:
    """Top-K captions per concept by cosine to the concept query.

    Candidates are the captions that hit the concept (optionally restricted
    to judged-relevant (caption, concept) pairs via `restrict_to`). Ties
    break by ascending caption_id. Concepts with fewer than K candidates
    keep everything they have — the shortfall is visible on the result, not
    an error, because sparse tail concepts are the expected case, not a
    malfunction.
    """
    if k < 1:
        raise InputError(f"K must be >= 1, got {k}")
    candidates: dict[int, set[int]] = {cid: set() for cid in queries}
    for h in hits:
        if h.concept_id not in candidates:
            continue
        if restrict_to is not None and (h.caption_id, h.concept_id) not in restrict_to:
            continue
        candidates[h.concept_id].add(h.caption_id)

    ranked: dict[int, list[tuple[int, float]]] = {}
    for cid, caption_ids in candidates.items():
        if not caption_ids:
            ranked[cid] = []
            continue
        ids = sorted(caption_ids)
        mat = np.stack([caption_embeddings.vector(str(i)) for i in ids]).astype(np.float64)
        norms = np.linalg.norm(mat, axis=1)
        if np.any(norms == 0.0):
            bad = ids[int(np.argmin(norms))]
            raise InputError(f"caption {bad}: zero embedding vector")
        scores = (mat @ queries[cid]) / (norms * float(np.linalg.norm(queries[cid])))
        order = sorted(range(len(ids)), key=lambda i: (-scores[i], ids[i]))[:k]
        ranked[cid] = [(ids[i], float(scores[i])) for i in order]
    result = RetrievalSet(k=k, ranked=ranked)
    for cid, missing in sorted(result.shortfall.items()):
        logger.info("concept %d: retrieved %d of K=%d", cid, k - missing, k)
    return result


@dataclass
class TrainConfig:
    """Hyperparameters for the linear probe.

    Defaults are sized for large retrieval pools (hundreds of examples per
    class); small synthetic problems usually want a larger learning rate.
    The cosine schedule anneals the learning rate to 0 over all steps,
    weight decay enters the gradient as an additive L2 term, and shuffling
    draws one permutation per epoch from a Philox4x64-10 counter-based
    generator seeded with `seed`, so a run is reproducible bit-for-bit from
    the config alone.
    """

    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    mode: str = "cross_modal"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InputError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise InputError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise InputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise InputError(f"epochs must be >= 0, got {self.epochs}")
        if self.mode not in TRAIN_MODES:
            raise InputError(f"unknown train mode {self.mode!r}; expected one of {TRAIN_MODES}")


def softmax_xent_loss_and_grad(
    weights: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
    weight_decay: float = 0.0,
) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy (+ L2 penalty) and its gradient in W.

    weights: (C × d); x: (n × d); y: (n,) int class indices in [0, C).
    The L2 penalty is 0.5 * weight_decay * ||W||², so its gradient is the
    conventional additive weight_decay * W term.
    """
    weights = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    logits = x @ weights.T  # (n × C)
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = x.shape[0]
    loss = float(-np.mean(np.log(probs[np.arange(n), y])))
    delta = probs
    delta[np.arange(n), y] -= 1.0
    grad = (delta.T @ x) / n
    if weight_decay:
        loss += 0.5 * weight_decay * float(np.sum(weights**2))
        grad = grad + weight_decay * weights
    return loss, grad


def build_text_examples(
    sets: list[SynonymSet],
    synonym_embeddings: EmbeddingMatrix,
    zeroshot: ClassifierWeights,
) -> tuple[np.ndarray, np.ndarray]:
    """Text-side training examples for cross-modal mode.

    One example per synonym per concept (its normalized embedding) plus one
    per concept's prompt-averaged name row taken from W_zs. Returns
    (features, labels) with labels as row indices into zeroshot.concept_ids.
    """
    row_of = {cid: i for i, cid in enumerate(zeroshot.concept_ids)}
    feats = []
    labels = []
    for synset in sets:
        if synset.concept_id not in row_of:
            raise InputError(f"synonym set for unknown concept {synset.concept_id}")
        row = row_of[synset.concept_id]
        for s in synset.synonyms:
            v = np.asarray(synonym_embeddings.vector(s), dtype=np.float64)
            norm = np.linalg.norm(v)
            if norm == 0.0:
                raise InputError(f"synonym {s!r} has a zero embedding")
            feats.append(v / norm)
            labels.append(row)
    for row in range(len(zeroshot.concept_ids)):
        feats.append(zeroshot.matrix[row].astype(np.float64))
        labels.append(row)
    return np.stack(feats), np.asarray(labels, dtype=np.int64)


def train_crossmodal(
    image_features: np.ndarray,
    image_labels: np.ndarray,
    text_features: np.ndarray | None,
    text_labels: np.ndarray | None,
    config: TrainConfig,
    init: ClassifierWeights,
) -> ClassifierWeights:
    """Mini-batch SGD on softmax cross-entropy from a zero-shot init.

    Labels are row indices into init.concept_ids. cross_modal pools image
    and text examples; image_only drops the text side and requires every
    class to keep at least one image example (a classifier row with no
    gradient signal would silently stay at init). epochs=0 returns the
    initialization bit-exactly. Internally float64; the returned matrix is
    float32 like every ClassifierWeights.
    """
    image_features = np.asarray(image_features, dtype=np.float64)
    image_labels = np.asarray(image_labels, dtype=np.int64)
    if image_features.ndim != 2 or image_features.shape[0] != image_labels.shape[0]:
        raise InputError("image features and labels disagree in length")
    if image_features.shape[0] and image_features.shape[1] != init.dim:
        raise InputError(
            f"image feature dim {image_features.shape[1]} != weights dim {init.dim}"
        )

    n_classes = len(init.concept_ids)
    if config.mode == "cross_modal":
        if text_features is None or text_labels is None:
            raise InputError("cross_modal mode requires text examples")
        text_features = np.asarray(text_features, dtype=np.float64)
        text_labels = np.asarray(text_labels, dtype=np.int64)
        x = np.concatenate([image_features, text_features], axis=0)
        y = np.concatenate([image_labels, text_labels], axis=0)
    else:
        x, y = image_features, image_labels
        present = set(int(c) for c in np.unique(y))
        missing = [init.concept_ids[i] for i in range(n_classes) if i not in present]
        if missing:
            raise InputError(
                f"image_only training with no examples for concepts {missing[:5]}"
            )
    if x.shape[0] == 0:
        raise InputError("no training examples")
    if y.min() < 0 or y.max() >= n_classes:
        raise InputError("a training label is outside the class range")

    w = init.matrix.astype(np.float64)
    if config.epochs == 0:
        return ClassifierWeights(
            role="W",
            concept_ids=list(init.concept_ids),
            matrix=init.matrix.copy(),
            provenance={"init": init.role, "config": vars(config).copy(), "steps": 0},
        )

    n = x.shape[0]
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = steps_per_epoch * config.epochs
    rng = np.random.Generator(np.random.Philox(config.seed))
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            batch = order[b * config.batch_size : (b + 1) * config.batch_size]
            loss, grad = softmax_xent_loss_and_grad(
                w, x[batch], y[batch], weight_decay=config.weight_decay
            )
            if not np.isfinite(loss):
                raise DivergenceError(step=step, epoch=epoch)
            # Cosine annealing from learning_rate to 0 across total_steps.
            lr = config.learning_rate * 0.5 * (1.0 + np.cos(np.pi * step / total_steps))
            w -= lr * grad
            step += 1
    return ClassifierWeights(
        role="W",
        concept_ids=list(init.concept_ids),
        matrix=w.astype(np.float32),
        provenance={"init": init.role, "config": vars(config).copy(), "steps": step},
    )


def ensemble(trained: ClassifierWeights, zeroshot: ClassifierWeights) -> ClassifierWeights:
    """Elementwise sum of trained and zero-shot matrices — nothing else.

    No renormalization and no mixing coefficient: both matrices live in the
    same embedding space at comparable scale, and the plain sum is the
    whole trick.
    """
    if trained.concept_ids != zeroshot.concept_ids:
        raise InputError("cannot ensemble weights over different concept orders")
    if trained.matrix.shape != zeroshot.matrix.shape:
        raise InputError(
            f"shape mismatch: {trained.matrix.shape} vs {zeroshot.matrix.shape}"
        )
    return ClassifierWeights(
        role="W_ensemble",
        concept_ids=list(trained.concept_ids),
        matrix=trained.matrix + zeroshot.matrix,
        provenance={"parents": [trained.role, zeroshot.role]},
    )


def evaluate(
    weights: ClassifierWeights,
    image_features: np.ndarray,
    gold_concept_ids: list[int],
    model_id: str = "",
) -> tuple[float, AccuracyTable]:
    """Mean per-class accuracy of the classifier on labeled image features."""
    from .realprompt import classify_batch

    image_features = np.asarray(image_features, dtype=np.float32)
    if image_features.ndim != 2 or image_features.shape[0] != len(gold_concept_ids):
        raise InputError("image features and gold labels disagree in length")
    preds = classify_batch(weights, image_features)
    pairs = list(zip([int(g) for g in gold_concept_ids], [int(p) for p in preds]))
    return mean_per_class_accuracy(
        pairs, concepts=list(weights.concept_ids), model_id=model_id or weights.role
    )
