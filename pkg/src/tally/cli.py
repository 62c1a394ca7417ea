"""The `tally` command-line pipeline.

Each subcommand reads declared file inputs, writes declared outputs, and
prints a single-line JSON summary to stdout. Failures print a machine-
readable JSON error to stderr and exit nonzero:

    0  success
    1  usage error (bad flags)
    2  bad input (missing/malformed files, inconsistent artifacts)
    3  provider failure (synonym or judge endpoint)
    4  internal error

Runs are idempotent: identical inputs (and seed) produce byte-identical
outputs. Nothing touches the network unless a provider URL flag is given.
The on-disk provider caches live under --cache-dir, the TALLY_CACHE_DIR
environment variable, or ./.tally_cache, in that order of precedence.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import analytics, judge as judge_mod, lexicon, matcher, reallinear, realprompt
from .analytics import AccuracyTable, FrequencyTable
from .corpus import open_corpus, shard_corpus
from .embeddings import load_embeddings
from .errors import DivergenceError, InputError, ProviderError, TallyError
from .realprompt import ClassifierWeights, PromptTemplateSet

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_PROVIDER = 3
EXIT_INTERNAL = 4

EMBEDDING_ROLES = ("images", "captions", "names", "synonyms", "prompts")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse defaults to exit code 2 on usage errors; we reserve 2 for
    bad input data, so usage failures are rethrown and mapped to 1."""

    def error(self, message):
        raise UsageError(message)


def _parse_embeddings(pairs: list[str] | None) -> dict[str, str]:
    out: dict[str, str] = {}
    for pair in pairs or []:
        role, sep, path = pair.partition("=")
        if not sep or not path:
            raise UsageError(f"--embeddings expects role=path, got {pair!r}")
        if role not in EMBEDDING_ROLES:
            raise UsageError(
                f"unknown embedding role {role!r}; expected one of {EMBEDDING_ROLES}"
            )
        if role in out:
            raise UsageError(f"duplicate embedding role {role!r}")
        out[role] = path
    return out


def _require_embedding(embs: dict[str, str], role: str):
    if role not in embs:
        raise UsageError(f"this command requires --embeddings {role}=<path>")
    return load_embeddings(embs[role])


def _cache_dir(args) -> str:
    if getattr(args, "cache_dir", None):
        return args.cache_dir
    return os.environ.get("TALLY_CACHE_DIR", ".tally_cache")


def _load_captions_for(hit_ids: set[int], path: str, fmt: str) -> dict[int, str]:
    """Stream the corpus once, keeping normalized text only for needed ids."""
    captions: dict[int, str] = {}
    for rec in open_corpus(path, fmt):
        if rec.id in hit_ids:
            captions[rec.id] = rec.norm_text
    return captions


# ---------------------------------------------------------------- synonyms


def cmd_synonyms(args) -> dict:
    concepts = lexicon.ConceptSet.from_jsonl(args.concepts)
    if args.provider_url:
        provider = lexicon.HttpSynonymProvider(args.provider_url, timeout=args.timeout)
    elif args.fixture:
        provider = lexicon.FixtureSynonymProvider.from_jsonl(args.fixture)
    else:
        raise UsageError("one of --provider-url or --fixture is required")
    cache = lexicon.SynonymCache(_cache_dir(args))
    sets = [lexicon.expand_synonyms(c, provider, cache) for c in concepts]

    dropped = 0
    if args.filter:
        embs = _parse_embeddings(args.embeddings)
        names = _require_embedding(embs, "names")
        synonyms = _require_embedding(embs, "synonyms")
        before = sum(len(s.synonyms) for s in sets)
        sets = lexicon.filter_synonyms(sets, concepts, names, synonyms)
        dropped = before - sum(len(s.synonyms) for s in sets)

    lexicon.save_synonym_sets(sets, concepts, args.out)
    return {
        "command": "synonyms",
        "concepts": len(concepts),
        "synonyms": sum(len(s.synonyms) for s in sets),
        "filtered_out": dropped,
        "provider": provider.provider_id,
        "out": args.out,
    }


# -------------------------------------------------------------------- scan


def cmd_scan(args) -> dict:
    sets = lexicon.load_synonym_sets(args.synonyms)
    automaton = matcher.compile(sets, mode=args.mode)
    if args.threads > 1:
        shards = shard_corpus(args.corpus, args.threads, args.format)
        result = matcher.scan_shards(
            shards, automaton, args.format, threads=args.threads, per_synonym=True
        )
    else:
        result = matcher.scan(open_corpus(args.corpus, args.format), automaton, per_synonym=True)
    matcher.save_hits(result.hits, args.out)
    if args.freq_out:
        names = None
        if args.concepts:
            concepts = lexicon.ConceptSet.from_jsonl(args.concepts)
            names = {c.concept_id: c.name for c in concepts}
        result.table.to_csv(args.freq_out, names=names)
    return {
        "command": "scan",
        "records": result.n_records,
        "skipped": result.n_skipped,
        "hits": len(result.hits),
        "patterns": automaton.pattern_count,
        "mode": args.mode,
        "threads": args.threads,
        "out": args.out,
        "freq_out": args.freq_out,
    }


# ------------------------------------------------------------------- judge


def cmd_judge(args) -> dict:
    concepts = lexicon.ConceptSet.from_jsonl(args.concepts)
    if args.judge_url:
        judge = judge_mod.HttpJudge(args.judge_url, timeout=args.timeout)
    elif args.blocklist:
        judge = judge_mod.RuleStubJudge.from_jsonl(args.blocklist)
    else:
        raise UsageError("one of --judge-url or --blocklist is required")

    if args.precision:
        if not args.validation:
            raise UsageError("--precision requires --validation")
        validation = judge_mod.ValidationSet.from_jsonl(args.validation)
        needed = {caption_id for caption_id, _, _ in validation.pairs}
        captions = _load_captions_for(needed, args.corpus, args.format)
        definitions: dict[int, list[str]] = {}
        if args.definitions:
            with open(args.definitions, encoding="utf-8") as f:
                for line in f:
                    line = line.strip()
                    if line:
                        obj = json.loads(line)
                        definitions[int(obj["concept_id"])] = [str(d) for d in obj["definitions"]]
        else:
            definitions = {c.concept_id: [c.definition] for c in concepts}
        rows = []
        for cid in sorted(definitions):
            for definition in definitions[cid]:
                precision = judge_mod.definition_precision(
                    concepts[cid], definition, validation, judge, captions
                )
                rows.append((cid, definition, precision))
        with open(args.out, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["concept_id", "definition", "precision"])
            for cid, definition, precision in rows:
                w.writerow([cid, definition, repr(precision)])
        return {
            "command": "judge",
            "mode": "precision",
            "judge_id": judge.judge_id,
            "rows": len(rows),
            "out": args.out,
        }

    if not args.hits:
        raise UsageError("--hits is required unless --precision is given")
    hits = matcher.load_hits(args.hits)
    needed = {h.caption_id for h in hits}
    captions = _load_captions_for(needed, args.corpus, args.format)
    cache = judge_mod.VerdictCache(_cache_dir(args))
    outcome = judge_mod.judge_hits(
        hits,
        concepts,
        captions,
        judge,
        cache=cache,
        max_attempts=args.max_attempts,
        backoff_s=args.backoff,
        max_workers=args.workers,
    )
    judge_mod.save_verdicts(outcome, args.out)
    return {
        "command": "judge",
        "judge_id": judge.judge_id,
        "pairs": len(outcome.verdicts) + len(outcome.undecided),
        "relevant": sum(1 for v in outcome.verdicts if v.relevant),
        "undecided": len(outcome.undecided),
        "out": args.out,
    }


# -------------------------------------------------------------------- freq


def cmd_freq(args) -> dict:
    hits = matcher.load_hits(args.hits)
    concepts = lexicon.ConceptSet.from_jsonl(args.concepts) if args.concepts else None
    names = {c.concept_id: c.name for c in concepts} if concepts else None

    if args.verdicts:
        outcome = judge_mod.load_verdicts(args.verdicts)
        table = judge_mod.filtered_frequency(
            hits, outcome.verdicts, concepts, undecided=outcome.undecided
        )
        syn_counts_raw = _raw_synonym_counts(hits)
        syn_counts_filt = judge_mod.filtered_synonym_counts(
            hits, outcome.verdicts, undecided=outcome.undecided
        )
        count_source = "filtered"
        undecided = len(outcome.undecided)
    else:
        caps: dict[int, set[int]] = {}
        for h in hits:
            caps.setdefault(h.concept_id, set()).add(h.caption_id)
        ids = concepts.ids if concepts else sorted(caps)
        table = FrequencyTable({cid: (len(caps.get(cid, ())),) * 2 for cid in ids})
        syn_counts_raw = _raw_synonym_counts(hits)
        syn_counts_filt = syn_counts_raw
        count_source = "raw"
        undecided = 0

    table.to_csv(args.out, names=names)
    if args.syn_out:
        keys = sorted(set(syn_counts_raw) | set(syn_counts_filt))
        with open(args.syn_out, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["concept_id", "synonym", "raw", "filtered", "count_source"])
            for cid, syn in keys:
                w.writerow(
                    [
                        cid,
                        syn,
                        syn_counts_raw.get((cid, syn), 0),
                        syn_counts_filt.get((cid, syn), 0),
                        count_source,
                    ]
                )
    return {
        "command": "freq",
        "concepts": len(table.counts),
        "raw_total": sum(table.raw(c) for c in table.counts),
        "filtered_total": sum(table.filtered(c) for c in table.counts),
        "undecided": undecided,
        "count_source": count_source,
        "out": args.out,
        "syn_out": args.syn_out,
    }


def _raw_synonym_counts(hits: list[matcher.MatchHit]) -> dict[tuple[int, str], int]:
    caps: dict[tuple[int, str], set[int]] = {}
    for h in hits:
        caps.setdefault((h.concept_id, h.synonym), set()).add(h.caption_id)
    return {key: len(ids) for key, ids in caps.items()}


# ----------------------------------------------------------------- analyze


def cmd_analyze(args) -> dict:
    freq = FrequencyTable.from_csv(args.freq)
    acc = AccuracyTable.from_csv(args.acc)
    os.makedirs(args.out_dir, exist_ok=True)

    bins = analytics.log_bins(freq, acc, base=args.base)
    with open(os.path.join(args.out_dir, "bins.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["bin", "mean_acc", "count"])
        for b in bins:
            w.writerow([b.bin, repr(b.mean_accuracy), b.count])

    head, tail = analytics.head_tail_split(freq, tail_fraction=args.tail)
    with open(os.path.join(args.out_dir, "split.csv"), "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["concept_id", "split"])
        for cid in sorted(freq.counts):
            w.writerow([cid, "tail" if cid in set(tail) else "head"])

    correlations = {}
    for method in ("pearson", "spearman"):
        correlations[method] = analytics.correlate(freq, acc, method)
    with open(
        os.path.join(args.out_dir, "correlation.csv"), "w", newline="", encoding="utf-8"
    ) as f:
        w = csv.writer(f)
        w.writerow(["method", "value", "n"])
        for method in sorted(correlations):
            w.writerow([method, repr(correlations[method]), len(freq.counts)])

    return {
        "command": "analyze",
        "concepts": len(freq.counts),
        "head": len(head),
        "tail": len(tail),
        "pearson": correlations["pearson"],
        "spearman": correlations["spearman"],
        "out_dir": args.out_dir,
    }


# ------------------------------------------------------------------ prompt


def cmd_prompt(args) -> dict:
    sets = lexicon.load_synonym_sets(args.synonyms)
    syn_counts, count_source = _load_syn_counts(args.syn_counts)
    if args.templates in realprompt.BUILTIN_TEMPLATES:
        templates = PromptTemplateSet.builtin(args.templates)
    else:
        templates = PromptTemplateSet.from_file(args.templates)
    prompt_embs = _require_embedding(_parse_embeddings(args.embeddings), "prompts")

    names = _names_from_synonym_file(args.synonyms)
    chosen_rows = realprompt.chosen_synonym_report(sets, syn_counts, names)
    concept_prompts = [
        (cid, realprompt.build_prompts(chosen, templates))
        for cid, _, chosen, _ in chosen_rows
    ]
    weights = realprompt.build_zeroshot(
        concept_prompts,
        prompt_embs,
        provenance={
            "templates": templates.source,
            "count_source": count_source,
            "synonyms": args.synonyms,
        },
    )
    weights.save(args.out)
    if args.report:
        with open(args.report, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["concept_id", "name", "chosen", "count"])
            for row in chosen_rows:
                w.writerow(list(row))
    switched = sum(1 for cid, name, chosen, _ in chosen_rows if chosen != lexicon.normalize_text(name))
    return {
        "command": "prompt",
        "concepts": len(sets),
        "templates": len(templates.templates),
        "switched": switched,
        "count_source": count_source,
        "out": args.out,
        "report": args.report,
    }


def _load_syn_counts(path: str) -> tuple[dict[tuple[int, str], int], str]:
    counts: dict[tuple[int, str], int] = {}
    source = "raw"
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        required = {"concept_id", "synonym", "raw", "filtered"}
        if not required.issubset(reader.fieldnames or ()):
            raise InputError(f"{path}: expected columns {sorted(required)}")
        for row in reader:
            source = row.get("count_source", "filtered") or "filtered"
            column = "filtered" if source == "filtered" else "raw"
            counts[(int(row["concept_id"]), row["synonym"])] = int(row[column])
    return counts, source


def _names_from_synonym_file(path: str) -> dict[int, str]:
    names = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                obj = json.loads(line)
                names[int(obj["concept_id"])] = str(obj.get("name", obj["synonyms"][0]))
    return names


# ---------------------------------------------------------------- retrieve


def cmd_retrieve(args) -> dict:
    sets = lexicon.load_synonym_sets(args.synonyms)
    embs = _parse_embeddings(args.embeddings)
    caption_embs = _require_embedding(embs, "captions")
    synonym_embs = _require_embedding(embs, "synonyms")
    hits = matcher.load_hits(args.hits)

    restrict = None
    if args.verdicts:
        outcome = judge_mod.load_verdicts(args.verdicts)
        restrict = {
            (v.caption_id, v.concept_id) for v in outcome.verdicts if v.relevant
        }
    queries = reallinear.concept_queries(sets, synonym_embs, use_synonyms=(args.query == "synonyms"))
    result = reallinear.retrieve_balanced(hits, caption_embs, queries, k=args.k, restrict_to=restrict)
    result.to_jsonl(args.out)
    if args.shortfall_out:
        with open(args.shortfall_out, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["concept_id", "requested", "retrieved"])
            for cid in sorted(result.ranked):
                w.writerow([cid, args.k, len(result.ranked[cid])])
    return {
        "command": "retrieve",
        "k": args.k,
        "query": args.query,
        "concepts": len(result.ranked),
        "rows": sum(len(v) for v in result.ranked.values()),
        "shortfall_concepts": len(result.shortfall),
        "out": args.out,
        "shortfall_out": args.shortfall_out,
    }


# ------------------------------------------------------------------- train


def cmd_train(args) -> dict:
    init = ClassifierWeights.load(args.init)
    retrieval = reallinear.RetrievalSet.from_jsonl(args.retrieval)
    embs = _parse_embeddings(args.embeddings)
    images = _require_embedding(embs, "images")

    row_of = {cid: i for i, cid in enumerate(init.concept_ids)}
    feats = []
    labels = []
    for cid in init.concept_ids:
        for caption_id, _ in retrieval.ranked.get(cid, []):
            feats.append(images.vector(str(caption_id)).astype(np.float64))
            labels.append(row_of[cid])
    image_features = (
        np.stack(feats) if feats else np.empty((0, init.dim), dtype=np.float64)
    )
    image_labels = np.asarray(labels, dtype=np.int64)

    config = reallinear.TrainConfig(
        learning_rate=args.lr,
        weight_decay=args.weight_decay,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        mode=args.mode,
    )
    text_features = text_labels = None
    if config.mode == "cross_modal":
        sets = lexicon.load_synonym_sets(args.synonyms) if args.synonyms else None
        if sets is None:
            raise UsageError("cross_modal training requires --synonyms")
        synonym_embs = _require_embedding(embs, "synonyms")
        text_features, text_labels = reallinear.build_text_examples(sets, synonym_embs, init)

    trained = reallinear.train_crossmodal(
        image_features, image_labels, text_features, text_labels, config, init
    )
    trained.save(args.out)
    summary = {
        "command": "train",
        "mode": config.mode,
        "seed": config.seed,
        "epochs": config.epochs,
        "image_examples": int(image_features.shape[0]),
        "text_examples": int(text_features.shape[0]) if text_features is not None else 0,
        "steps": trained.provenance.get("steps", 0),
        "out": args.out,
        "ensemble_out": args.ensemble_out,
    }
    if args.ensemble_out:
        reallinear.ensemble(trained, init).save(args.ensemble_out)
    return summary


# -------------------------------------------------------------------- eval


def cmd_eval(args) -> dict:
    weights = ClassifierWeights.load(args.weights)
    images = _require_embedding(_parse_embeddings(args.embeddings), "images")
    ids = []
    gold = []
    with open(args.labels, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if not {"id", "concept_id"}.issubset(reader.fieldnames or ()):
            raise InputError(f"{args.labels}: expected columns id,concept_id")
        for row in reader:
            ids.append(row["id"])
            gold.append(int(row["concept_id"]))
    if not ids:
        raise InputError(f"{args.labels}: no labeled examples")
    feats = np.stack([images.vector(i) for i in ids])
    model_id = args.model_id or weights.role
    mpca, table = reallinear.evaluate(weights, feats, gold, model_id=model_id)
    table.to_csv(args.out)
    return {
        "command": "eval",
        "model_id": model_id,
        "examples": len(ids),
        "classes": len(table.accuracies),
        "mean_per_class_accuracy": mpca,
        "out": args.out,
    }


# ------------------------------------------------------------------ report


def _read_csv_rows(path: str) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def cmd_report(args) -> dict:
    run = args.run_dir
    freq_path = os.path.join(run, "freq.csv")
    missing = [name for name in ["freq.csv"] if not os.path.exists(os.path.join(run, name))]
    if missing:
        raise InputError(f"run dir {run} is missing required artifacts: {missing}")

    lines: list[str] = ["# tally run report", ""]
    sections = []

    freq_rows = _read_csv_rows(freq_path)
    freq_rows.sort(key=lambda r: (-int(r["filtered"]), int(r["concept_id"])))
    total_raw = sum(int(r["raw"]) for r in freq_rows)
    total_filtered = sum(int(r["filtered"]) for r in freq_rows)
    lines += [
        "## Concept frequency",
        "",
        f"- concepts: {len(freq_rows)}",
        f"- raw matched captions (sum over concepts): {total_raw}",
        f"- filtered matched captions (sum over concepts): {total_filtered}",
        "",
        "| rank | concept_id | name | raw | filtered |",
        "|---|---|---|---|---|",
    ]
    show = freq_rows[:10] if len(freq_rows) > 20 else freq_rows
    for rank, r in enumerate(show, 1):
        lines.append(
            f"| {rank} | {r['concept_id']} | {r.get('name', '')} | {r['raw']} | {r['filtered']} |"
        )
    if len(freq_rows) > 20:
        lines += ["", "Least frequent:", "", "| rank | concept_id | name | raw | filtered |", "|---|---|---|---|---|"]
        for rank, r in zip(
            range(len(freq_rows) - 9, len(freq_rows) + 1), freq_rows[-10:]
        ):
            lines.append(
                f"| {rank} | {r['concept_id']} | {r.get('name', '')} | {r['raw']} | {r['filtered']} |"
            )
    lines.append("")
    sections.append("frequency")

    bins_path = os.path.join(run, "bins.csv")
    if os.path.exists(bins_path):
        rows = _read_csv_rows(bins_path)
        lines += ["## Frequency bins (log scale)", "", "| bin | mean accuracy | concepts |", "|---|---|---|"]
        for r in rows:
            lines.append(f"| {r['bin']} | {float(r['mean_acc']):.6f} | {r['count']} |")
        lines.append("")
        sections.append("bins")

    split_rows = None
    split_path = os.path.join(run, "split.csv")
    if os.path.exists(split_path):
        split_rows = _read_csv_rows(split_path)
        n_head = sum(1 for r in split_rows if r["split"] == "head")
        n_tail = sum(1 for r in split_rows if r["split"] == "tail")
        lines += [
            "## Head/tail split",
            "",
            f"- head: {n_head} concepts",
            f"- tail: {n_tail} concepts",
            "",
        ]
        sections.append("split")

    corr_path = os.path.join(run, "correlation.csv")
    if os.path.exists(corr_path):
        rows = _read_csv_rows(corr_path)
        lines += ["## Frequency–accuracy correlation", "", "| method | value | n |", "|---|---|---|"]
        for r in rows:
            lines.append(f"| {r['method']} | {float(r['value']):.6f} | {r['n']} |")
        lines.append("")
        sections.append("correlation")

    chosen_path = os.path.join(run, "chosen.csv")
    if os.path.exists(chosen_path):
        rows = _read_csv_rows(chosen_path)
        switched = [r for r in rows if r["chosen"] != lexicon.normalize_text(r["name"])]
        lines += [
            "## Chosen synonyms",
            "",
            f"- concepts: {len(rows)}",
            f"- switched away from the original name: {len(switched)}",
            "",
        ]
        if switched:
            lines += ["| concept_id | name | chosen | count |", "|---|---|---|---|"]
            for r in switched:
                lines.append(
                    f"| {r['concept_id']} | {r['name']} | {r['chosen']} | {r['count']} |"
                )
            lines.append("")
        sections.append("chosen")

    acc_files = sorted(
        name
        for name in os.listdir(run)
        if name.startswith("acc") and name.endswith(".csv")
    )
    if acc_files:
        split_of = (
            {int(r["concept_id"]): r["split"] for r in split_rows} if split_rows else None
        )
        header = "| model | mean per-class acc |"
        rule = "|---|---|"
        if split_of:
            header += " head acc | tail acc |"
            rule += "---|---|"
        lines += ["## Accuracy", "", header, rule]
        model_stats = []
        for name in acc_files:
            rows = _read_csv_rows(os.path.join(run, name))
            accs = {int(r["concept_id"]): float(r["accuracy"]) for r in rows}
            mean = sum(accs.values()) / len(accs)
            label = name[:-4]
            row = f"| {label} | {mean:.6f} |"
            head_mean = tail_mean = None
            if split_of:
                head_vals = [a for cid, a in accs.items() if split_of.get(cid) == "head"]
                tail_vals = [a for cid, a in accs.items() if split_of.get(cid) == "tail"]
                if head_vals and tail_vals:
                    head_mean = sum(head_vals) / len(head_vals)
                    tail_mean = sum(tail_vals) / len(tail_vals)
                    row += f" {head_mean:.6f} | {tail_mean:.6f} |"
                else:
                    row += " n/a | n/a |"
            lines.append(row)
            model_stats.append((label, mean, head_mean, tail_mean))
        if len(model_stats) > 1:
            base = model_stats[0]
            lines += ["", f"Deltas vs `{base[0]}`:", "", header, rule]
            for label, mean, head_mean, tail_mean in model_stats[1:]:
                row = f"| {label} | {mean - base[1]:+.6f} |"
                if split_of and head_mean is not None and base[2] is not None:
                    row += f" {head_mean - base[2]:+.6f} | {tail_mean - base[3]:+.6f} |"
                elif split_of:
                    row += " n/a | n/a |"
                lines.append(row)
        lines.append("")
        sections.append("accuracy")

    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines))
    return {"command": "report", "sections": sections, "out": args.out}


# ------------------------------------------------------------------ parser


def build_parser() -> _Parser:
    parser = _Parser(prog="tally", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(handler=handler)
        return p

    p = add("synonyms", cmd_synonyms, "expand concept names into synonym sets")
    p.add_argument("--concepts", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--provider-url")
    p.add_argument("--fixture")
    p.add_argument("--cache-dir")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--filter", action="store_true", help="drop synonyms nearer to other concepts")
    p.add_argument("--embeddings", action="append", metavar="ROLE=PATH")

    p = add("scan", cmd_scan, "match synonyms against a caption corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", choices=["jsonl", "tsv"], default="jsonl")
    p.add_argument("--synonyms", required=True)
    p.add_argument("--mode", choices=list(matcher.MODES), default="whole_word")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--freq-out")
    p.add_argument("--concepts")

    p = add("judge", cmd_judge, "judge hit relevance (or definition precision)")
    p.add_argument("--concepts", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--format", choices=["jsonl", "tsv"], default="jsonl")
    p.add_argument("--hits")
    p.add_argument("--judge-url")
    p.add_argument("--blocklist")
    p.add_argument("--cache-dir")
    p.add_argument("--timeout", type=float, default=30.0)
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--backoff", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--precision", action="store_true", help="score definitions instead of hits")
    p.add_argument("--validation")
    p.add_argument("--definitions")

    p = add("freq", cmd_freq, "build the per-concept frequency table")
    p.add_argument("--hits", required=True)
    p.add_argument("--verdicts")
    p.add_argument("--concepts")
    p.add_argument("--out", required=True)
    p.add_argument("--syn-out")

    p = add("analyze", cmd_analyze, "bins, head/tail split, correlations")
    p.add_argument("--freq", required=True)
    p.add_argument("--acc", required=True)
    p.add_argument("--tail", type=float, default=0.2)
    p.add_argument("--base", type=float, default=10.0)
    p.add_argument("--out-dir", required=True)

    p = add("prompt", cmd_prompt, "build the zero-shot classifier from frequent synonyms")
    p.add_argument("--synonyms", required=True)
    p.add_argument("--syn-counts", required=True)
    p.add_argument("--templates", required=True, help="builtin set name or a template file")
    p.add_argument("--embeddings", action="append", metavar="ROLE=PATH")
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    p = add("retrieve", cmd_retrieve, "balanced top-K caption retrieval per concept")
    p.add_argument("--hits", required=True)
    p.add_argument("--verdicts")
    p.add_argument("--synonyms", required=True)
    p.add_argument("--embeddings", action="append", metavar="ROLE=PATH")
    p.add_argument("--k", type=int, default=reallinear.DEFAULT_K)
    p.add_argument("--query", choices=["synonyms", "name"], default="synonyms")
    p.add_argument("--out", required=True)
    p.add_argument("--shortfall-out")

    p = add("train", cmd_train, "train the linear probe on retrieved examples")
    p.add_argument("--retrieval", required=True)
    p.add_argument("--init", required=True, help="zero-shot weights file")
    p.add_argument("--synonyms")
    p.add_argument("--embeddings", action="append", metavar="ROLE=PATH")
    p.add_argument("--mode", choices=list(reallinear.TRAIN_MODES), default="cross_modal")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--ensemble-out")

    p = add("eval", cmd_eval, "mean per-class accuracy of a weights file")
    p.add_argument("--weights", required=True)
    p.add_argument("--embeddings", action="append", metavar="ROLE=PATH")
    p.add_argument("--labels", required=True)
    p.add_argument("--model-id")
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "render a Markdown report from run artifacts")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", required=True)

    return parser


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message}, sort_keys=True), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        return _fail("UsageError", str(e), EXIT_USAGE)
    try:
        summary = args.handler(args)
    except UsageError as e:
        return _fail("UsageError", str(e), EXIT_USAGE)
    except ProviderError as e:
        return _fail(type(e).__name__, str(e), EXIT_PROVIDER)
    except DivergenceError as e:
        return _fail(type(e).__name__, str(e), EXIT_INTERNAL)
    except (TallyError, OSError, json.JSONDecodeError, ValueError, KeyError) as e:
        return _fail(type(e).__name__, str(e), EXIT_INPUT)
    except Exception as e:  # pragma: no cover - defensive
        return _fail(type(e).__name__, str(e), EXIT_INTERNAL)
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
