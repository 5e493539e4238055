"""Datasets, metrics, sentiment/stance analyses and the synthetic benchmark suite."""
from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .kgraph import KnowledgeGraph, induced, word_tokens
from .numerics import RngStream

LABELS = ("pro", "con", "neu")
PHENOMENA = ("Imp", "mlT", "mlS", "Qte", "Sarc")
SENTIMENTS = ("Pos", "Neg", "Neu")
DEFAULT_LABEL_MAP = {"pro": "pro", "con": "con", "neutral": "neu", "neu": "neu"}
DEFAULT_SHOT_MAP = {"zero": "zero", "few": "few", "": "n/a", "n/a": "n/a"}


class DatasetError(ValueError):
    pass


@dataclass
class StanceExample:
    id: str
    document: str
    topic: str
    gold: str | None
    split: str = "train"
    shot: str = "n/a"
    phenomena: dict = field(default_factory=dict)


@dataclass
class DatasetColumns:
    id: str | None = "id"
    document: str = "document"
    topic: str = "topic"
    label: str = "label"
    split: str | None = "split"
    shot: str | None = "shot"
    phenomena: dict = field(default_factory=lambda: {p: p.lower() for p in PHENOMENA})


def _truthy(value: str) -> bool:
    return value.strip().lower() in ("1", "true", "yes", "y", "t")


def load_dataset(path: str | Path, columns: DatasetColumns | None = None,
                 label_map: Mapping[str, str] | None = None, shot_map: Mapping[str, str] | None = None,
                 split: str | None = None) -> list[StanceExample]:
    """Read a stance CSV; labels go through ``label_map`` (textual by default)."""
    columns = columns or DatasetColumns()
    label_map = {k.lower(): v for k, v in (label_map or DEFAULT_LABEL_MAP).items()}
    shot_map = {k.lower(): v for k, v in (shot_map or DEFAULT_SHOT_MAP).items()}
    out = []
    with open(path, encoding="utf8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (columns.document, columns.topic, columns.label):
            if col not in header:
                raise DatasetError(f"{path}: missing required column {col!r}")
        for lineno, row in enumerate(reader, 2):
            doc, topic, raw = row.get(columns.document), row.get(columns.topic), row.get(columns.label)
            if doc is None or topic is None or raw is None or not topic.strip() or not raw.strip():
                raise DatasetError(f"{path}:{lineno}: missing document/topic/label")
            label = label_map.get(raw.strip().lower())
            if label not in LABELS:
                raise DatasetError(f"{path}:{lineno}: unknown label {raw!r}")
            shot = "n/a"
            if columns.shot and columns.shot in header:
                raw_shot = (row.get(columns.shot) or "").strip().lower()
                if raw_shot not in shot_map:
                    raise DatasetError(f"{path}:{lineno}: unknown shot value {raw_shot!r}")
                shot = shot_map[raw_shot]
            flags = {p: _truthy(row.get(c) or "") for p, c in columns.phenomena.items() if c in header}
            ex_split = split or ((row.get(columns.split) or "train").strip() if columns.split else "train")
            ex_id = row.get(columns.id) if columns.id and columns.id in header else None
            out.append(StanceExample(ex_id or str(lineno - 1), doc, topic, label, ex_split, shot, flags))
    return out


def write_dataset(path: str | Path, examples: Sequence[StanceExample]) -> None:
    cols = ["id", "document", "topic", "label", "split", "shot"] + [p.lower() for p in PHENOMENA]
    with open(path, "w", encoding="utf8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for e in examples:
            w.writerow([e.id, e.document, e.topic, e.gold, e.split, e.shot]
                       + [int(bool(e.phenomena.get(p, False))) for p in PHENOMENA])


@dataclass
class MetricReport:
    per_class: dict[str, float]
    macro: float
    accuracy: float
    confusion: dict[tuple[str, str], int]
    n: int
    by_shot: dict[str, "MetricReport"] = field(default_factory=dict)

    def table_row(self) -> dict:
        """Table-2 style row: per-class and macro F1 for zero-shot, few-shot and all."""
        row = {}
        for name, rep in (("zero", self.by_shot.get("zero")), ("few", self.by_shot.get("few")), ("all", self)):
            for lab in LABELS:
                row[f"{name}.{lab}"] = rep.per_class[lab] if rep else None
            row[f"{name}.all"] = rep.macro if rep else None
        return row

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "per_class_f1": self.per_class,
            "macro_f1": self.macro,
            "accuracy": self.accuracy,
            "confusion": {f"{g}->{p}": c for (g, p), c in sorted(self.confusion.items())},
            "by_shot": {k: v.to_json() for k, v in self.by_shot.items()},
        }


def _report(preds: Sequence[str], golds: Sequence[str]) -> MetricReport:
    conf = Counter(zip(golds, preds))
    per_class = {}
    for lab in LABELS:
        tp = conf[(lab, lab)]
        fp = sum(c for (g, p), c in conf.items() if p == lab and g != lab)
        fn = sum(c for (g, p), c in conf.items() if g == lab and p != lab)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        per_class[lab] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    acc = sum(conf[(lab, lab)] for lab in LABELS) / len(golds)
    return MetricReport(per_class, sum(per_class.values()) / len(LABELS), acc, dict(conf), len(golds))


def macro_f1(predictions: Sequence[str], golds: Sequence[str], shots: Sequence[str] | None = None) -> MetricReport:
    """Per-class and macro F1, optionally broken down by zero-/few-shot tags."""
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")
    if not golds:
        raise ValueError("cannot score an empty prediction list")
    report = _report(predictions, golds)
    if shots is not None:
        for shot in ("zero", "few"):
            idx = [i for i, s in enumerate(shots) if s == shot]
            if idx:
                report.by_shot[shot] = _report([predictions[i] for i in idx], [golds[i] for i in idx])
    return report


def breakdown_eval(predictions: Sequence[str], golds: Sequence[str],
                   phenomena: Sequence[Mapping[str, bool]]) -> dict[str, float | None]:
    """Accuracy per phenomenon flag; ``None`` when no example carries the flag."""
    out = {}
    for ph in PHENOMENA:
        idx = [i for i, flags in enumerate(phenomena) if flags.get(ph)]
        out[ph] = sum(predictions[i] == golds[i] for i in idx) / len(idx) if idx else None
    return out


def doc_sentiment(document: str, lexicon: Mapping[str, str]) -> str:
    """Pos/Neg by strict majority of lexicon words; ties and no hits give Neu."""
    counts = Counter(lexicon.get(t) for t in word_tokens(document))
    if counts["pos"] > counts["neg"]:
        return "Pos"
    if counts["neg"] > counts["pos"]:
        return "Neg"
    return "Neu"


def sentiment_stance_matrix(predictions: Sequence[str], golds: Sequence[str], documents: Sequence[str],
                            lexicon: Mapping[str, str]) -> dict[str, dict[str, float | None]]:
    """Accuracy per (document sentiment, gold stance) cell; empty cells are ``None``."""
    hits: Counter = Counter()
    totals: Counter = Counter()
    for p, g, d in zip(predictions, golds, documents):
        key = (doc_sentiment(d, lexicon), g)
        totals[key] += 1
        hits[key] += p == g
    return {s: {lab: (hits[(s, lab)] / totals[(s, lab)] if totals[(s, lab)] else None) for lab in LABELS}
            for s in SENTIMENTS}


def matrix_counts(golds: Sequence[str], documents: Sequence[str], lexicon) -> dict[str, dict[str, int]]:
    totals = Counter((doc_sentiment(d, lexicon), g) for g, d in zip(golds, documents))
    return {s: {lab: totals[(s, lab)] for lab in LABELS} for s in SENTIMENTS}


def subsample_concepts(graph: KnowledgeGraph, percent: float, rng: RngStream, mode: str = "concepts") -> KnowledgeGraph:
    """Keep ``percent`` of concepts (or edges) at random and the triples they induce."""
    if not 0 < percent <= 100:
        raise ValueError("percent must lie in (0, 100]")
    if percent == 100:
        return graph
    if mode == "concepts":
        n = graph.num_concepts
        k = int(round(n * percent / 100))
        keep = set(rng.choice(n, size=k, replace=False).tolist()) if k else set()
        triples = [t for t in graph.triples if t.head in keep and t.tail in keep]
    elif mode == "edges":
        k = int(round(len(graph) * percent / 100))
        keep = set(rng.choice(len(graph), size=k, replace=False).tolist()) if k else set()
        triples = [t for i, t in enumerate(graph.triples) if i in keep]
    else:
        raise ValueError(f"unknown subsampling mode {mode!r}")
    if not triples:
        return KnowledgeGraph([], [], [])
    return induced(graph, triples)


def coverage_ablation(graph: KnowledgeGraph, percents: Sequence[float], run_point, rng: RngStream,
                      mode: str = "concepts") -> list[tuple[float, float]]:
    """(percent, macro-F1) per requested coverage; ``run_point(graph)`` runs the pipeline.

    A subsample left without triples is recorded as NaN (undefined) and not run.
    """
    curve = []
    for pct in percents:
        sub = subsample_concepts(graph, pct, rng.spawn(f"coverage-{pct}"), mode)
        curve.append((pct, float(run_point(sub)) if len(sub) else float("nan")))
    return curve


def write_curve(path: str | Path, curve: Iterable[tuple[float, float]]) -> None:
    lines = ["percent\tmacro_f1"] + [f"{p:g}\t{'nan' if math.isnan(f) else f'{f:.6f}'}" for p, f in curve]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf8")


# --- synthetic suite ---------------------------------------------------------

_POS_WORDS = ("good great excellent wonderful superb brilliant lovely amazing fantastic pleasant "
              "delightful splendid terrific admirable marvelous charming graceful superior "
              "impressive reliable").split()
_NEG_WORDS = ("bad terrible awful horrible dreadful poor nasty lousy dismal appalling "
              "miserable inferior disgusting pathetic tragic shameful atrocious unreliable "
              "clumsy grim").split()
_FILLERS = "the a this that really quite so very i we they think feel say it is was seems".split()
_ALIAS_STEMS = ("game athlete stadium medal league coach reactor uranium plant fuel tuition campus "
                "lecture degree vaccine clinic dose nurse tariff export import trade ballot voter "
                "senate election carbon emission climate glacier robot algorithm chip software "
                "rocket orbit launch satellite claw cat paw kitten soil farm crop harvest salary wage "
                "union worker").split()


@dataclass
class SyntheticConfig:
    n_train_topics: int = 6
    n_eval_topics: int = 4
    train_aliases: int = 3
    eval_aliases: int = 3
    n_distractors: int = 60
    distractor_degree: int = 3
    n_train: int = 600
    n_dev: int = 300
    n_test: int = 600
    n_corpus: int = 800
    few_shot_frac: float = 0.3
    p_linked: float = 0.65
    p_polar: float = 0.8
    negation_train: float = 0.03
    negation_eval: float = 0.1
    heldout_sentiment_frac: float = 0.5


@dataclass
class SyntheticSuite:
    graph: KnowledgeGraph
    lexicon: dict[str, str]
    pos_tags: dict[str, str]
    corpus: list[tuple[str, int]]
    train: list[StanceExample]
    dev: list[StanceExample]
    test: list[StanceExample]
    linked_alias: dict[str, str] = field(default_factory=dict)


def _name(prefix: str, i: int) -> str:
    letters = "abcdefghijklmnopqrstuvwxyz"
    out = ""
    i += 1
    while i:
        i, r = divmod(i - 1, 26)
        out = letters[r] + out
    return prefix + out


def generate_synthetic_suite(config: SyntheticConfig, rng: RngStream) -> SyntheticSuite:
    """Build a KG, a rated review corpus and a stance dataset whose labels need both
    document sentiment and KG linkage between the mentioned alias and the topic.

    Gold is pro iff the latent sentiment is positive and the document mentions an
    alias linked to the topic, con iff negative and linked, neu otherwise. Dev/test
    use sentiment words and aliases that never occur in the training split.
    """
    c = config
    topics = [_name("topic", i) for i in range(c.n_train_topics + c.n_eval_topics)]
    train_topics, eval_topics = topics[:c.n_train_topics], topics[c.n_train_topics:]
    stems = iter(_ALIAS_STEMS * 100)
    aliases: dict[str, dict[str, list[str]]] = {}
    counter = 0
    for t in topics:
        aliases[t] = {"train": [], "eval": []}
        n_train = c.train_aliases if t in train_topics else 0
        for j in range(n_train + c.eval_aliases):
            a = f"{next(stems)}{counter}"
            counter += 1
            aliases[t]["train" if j < n_train else "eval"].append(a)
    distractors = [f"{_name('misc', i)}" for i in range(c.n_distractors)]
    hub = "miscellany"
    rows = []
    for t in topics:
        every = aliases[t]["train"] + aliases[t]["eval"]
        for a in every:
            rows.append((a, "RelatedTo", t))
        for a, b in zip(every, every[1:]):
            rows.append((a, "Synonym", b))
    # a dense off-topic region, so even small concept subsamples keep some edges
    for i, d in enumerate(distractors):
        rows.append((d, "HasContext", hub))
        for k in range(1, c.distractor_degree + 1):
            rows.append((d, "RelatedTo", distractors[(i + k) % len(distractors)]))
    graph = KnowledgeGraph.from_labeled(rows)

    pos_words = list(_POS_WORDS)
    neg_words = list(_NEG_WORDS)
    n_held = int(round(len(pos_words) * c.heldout_sentiment_frac))
    sent_split = {
        "train": (pos_words[n_held:], neg_words[n_held:]),
        "eval": (pos_words[:n_held], neg_words[:n_held]),
    }
    lexicon = {w: "pos" for w in pos_words} | {w: "neg" for w in neg_words}
    pos_tags = {w: "ADJ" for w in lexicon}
    for t in topics:
        pos_tags[t] = "NOUN"
        for a in aliases[t]["train"] + aliases[t]["eval"]:
            pos_tags[a] = "NOUN"
    for d in distractors:
        pos_tags[d] = "NOUN"
    pos_tags["not"] = "PART"

    crng = rng.spawn("corpus")
    corpus = []
    for i in range(c.n_corpus):
        rating = int(crng.integers(1, 6))
        n_words = abs(rating - 3)
        pool = pos_words if rating > 3 else neg_words
        words = [pool[int(crng.integers(len(pool)))] for _ in range(n_words)]
        filler = [_FILLERS[int(crng.integers(len(_FILLERS)))] for _ in range(3)]
        toks = filler[:2] + ["product"] + filler[2:] + words
        corpus.append((" ".join(toks), rating))
    pos_tags["product"] = "NOUN"

    def make(split: str, n: int, srng: RngStream) -> list[StanceExample]:
        out = []
        pos_pool, neg_pool = sent_split["train" if split == "train" else "eval"]
        neg_rate = c.negation_train if split == "train" else c.negation_eval
        if split == "train":
            d_pool = distractors[: len(distractors) // 2]
        else:
            d_pool = distractors[len(distractors) // 2:]
        for i in range(n):
            if split == "train":
                topic, shot = train_topics[int(srng.integers(len(train_topics)))], "n/a"
                alias_pool = aliases[topic]["train"]
            elif srng.random() < c.few_shot_frac:
                topic, shot = train_topics[int(srng.integers(len(train_topics)))], "few"
                alias_pool = aliases[topic]["eval"]
            else:
                topic, shot = eval_topics[int(srng.integers(len(eval_topics)))], "zero"
                alias_pool = aliases[topic]["eval"]
            linked = srng.random() < c.p_linked
            mention = alias_pool[int(srng.integers(len(alias_pool)))] if linked else d_pool[int(srng.integers(len(d_pool)))]
            u = srng.random()
            sentiment = "pos" if u < c.p_polar / 2 else ("neg" if u < c.p_polar else "neu")
            f = [_FILLERS[int(srng.integers(len(_FILLERS)))] for _ in range(4)]
            if sentiment == "neu":
                words = []
            elif srng.random() < neg_rate:
                pool = neg_pool if sentiment == "pos" else pos_pool
                words = ["not", pool[int(srng.integers(len(pool)))]]
            else:
                pool = pos_pool if sentiment == "pos" else neg_pool
                words = [pool[int(srng.integers(len(pool)))] for _ in range(1 + int(srng.integers(2)))]
            toks = f[:2] + [mention] + f[2:] + words
            if linked and sentiment != "neu":
                gold = "pro" if sentiment == "pos" else "con"
            else:
                gold = "neu"
            flags = {"Imp": gold != "neu" and topic not in toks}
            out.append(StanceExample(f"{split}-{i}", " ".join(toks), topic, gold, split, shot, flags))
        return out

    train = make("train", c.n_train, rng.spawn("train"))
    dev = make("dev", c.n_dev, rng.spawn("dev"))
    test = make("test", c.n_test, rng.spawn("test"))
    linked_alias = {a: t for t in topics for a in aliases[t]["train"] + aliases[t]["eval"]}
    return SyntheticSuite(graph, lexicon, pos_tags, corpus, train, dev, test, linked_alias)


def best_rule_accuracy(examples: Sequence[StanceExample], feature) -> float:
    """Accuracy of the Bayes-optimal rule that sees only ``feature(example)``."""
    groups: dict = {}
    for e in examples:
        groups.setdefault(feature(e), Counter())[e.gold] += 1
    return sum(max(cnt.values()) for cnt in groups.values()) / len(examples)


def kg_link_feature(graph: KnowledgeGraph, pos_oracle: Mapping[str, str]):
    """Whether any seed term of the document is adjacent to the topic concept."""
    def feature(e: StanceExample) -> bool:
        tid = graph.concept_id(e.topic)
        if tid is None:
            return False
        nbrs = graph.neighbors(tid)
        for tok in word_tokens(e.document):
            if pos_oracle.get(tok) in ("NOUN", "ADJ", "ADV"):
                cid = graph.concept_id(tok)
                if cid is not None and cid in nbrs:
                    return True
        return False
    return feature
