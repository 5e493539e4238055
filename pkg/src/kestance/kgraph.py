"""Knowledge-graph data model, triple-dump ingestion and subgraph extraction."""
from __future__ import annotations

import csv
import logging
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

logger = logging.getLogger(__name__)

SEED_POS = frozenset({"NOUN", "ADJ", "ADV"})
_TOKEN_RE = re.compile(r"[\w']+|[^\w\s]", re.UNICODE)


def normalize(surface: str) -> str:
    """Lowercase, trim and replace internal whitespace with underscores."""
    return re.sub(r"\s+", "_", surface.strip().lower())


def word_tokens(text: str) -> list[str]:
    return [t.lower() for t in _TOKEN_RE.findall(text)]


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class Concept:
    id: int
    surface: str


@dataclass(frozen=True)
class RelationType:
    id: int
    name: str


@dataclass(frozen=True, order=True)
class Triple:
    head: int
    rel: int
    tail: int


class KnowledgeGraph:
    """Immutable directed labeled multigraph over dense concept/relation ids.

    ``adjacency[(rel, direction)][node]`` lists neighbor ids, where direction
    ``"out"`` follows head->tail and ``"in"`` follows tail->head. ``id_map``
    records the parent-graph ids of concepts when the graph was extracted
    from a larger one.
    """

    def __init__(self, concepts: Sequence[str], relations: Sequence[str],
                 triples: Iterable[tuple[int, int, int]], id_map: Mapping[int, int] | None = None):
        self._concepts = tuple(Concept(i, s) for i, s in enumerate(concepts))
        self._relations = tuple(RelationType(i, r) for i, r in enumerate(relations))
        if len({c.surface for c in self._concepts}) != len(self._concepts):
            raise ValueError("concept surfaces must be unique")
        if len({r.name for r in self._relations}) != len(self._relations):
            raise ValueError("relation names must be unique")
        seen = set()
        kept = []
        nc, nr = len(self._concepts), len(self._relations)
        for h, r, t in triples:
            tr = Triple(int(h), int(r), int(t))
            if not (0 <= tr.head < nc and 0 <= tr.tail < nc and 0 <= tr.rel < nr):
                raise ValueError(f"triple {tr} references unknown ids")
            if tr not in seen:
                seen.add(tr)
                kept.append(tr)
        self._triples = tuple(kept)
        self._triple_set = frozenset(seen)
        self._index = {c.surface: c.id for c in self._concepts}
        self._rel_index = {r.name: r.id for r in self._relations}
        self._adjacency = self.build_adjacency(self._triples)
        self.id_map = dict(id_map) if id_map is not None else None

    @staticmethod
    def build_adjacency(triples: Iterable[Triple]) -> dict:
        adj: dict = defaultdict(lambda: defaultdict(list))
        for tr in triples:
            adj[(tr.rel, "out")][tr.head].append(tr.tail)
            adj[(tr.rel, "in")][tr.tail].append(tr.head)
        return {k: {n: tuple(v) for n, v in d.items()} for k, d in adj.items()}

    @property
    def concepts(self) -> tuple[Concept, ...]:
        return self._concepts

    @property
    def relations(self) -> tuple[RelationType, ...]:
        return self._relations

    @property
    def triples(self) -> tuple[Triple, ...]:
        return self._triples

    @property
    def adjacency(self) -> dict:
        return self._adjacency

    @property
    def num_concepts(self) -> int:
        return len(self._concepts)

    @property
    def num_relations(self) -> int:
        return len(self._relations)

    def __len__(self) -> int:
        return len(self._triples)

    def __contains__(self, triple) -> bool:
        return Triple(*triple) in self._triple_set

    def concept_id(self, surface: str) -> int | None:
        return self._index.get(normalize(surface))

    def relation_id(self, name: str) -> int | None:
        return self._rel_index.get(name)

    def surface(self, cid: int) -> str:
        return self._concepts[cid].surface

    def neighbors(self, cid: int) -> set[int]:
        out = set()
        for (_, _), nodes in self._adjacency.items():
            out.update(nodes.get(cid, ()))
        return out

    def labeled_triples(self) -> list[tuple[str, str, str]]:
        return [(self.surface(t.head), self._relations[t.rel].name, self.surface(t.tail)) for t in self._triples]

    def __repr__(self) -> str:
        return f"KnowledgeGraph(concepts={self.num_concepts}, relations={self.num_relations}, triples={len(self)})"

    @classmethod
    def from_labeled(cls, rows: Iterable[tuple[str, str, str]], id_map=None) -> "KnowledgeGraph":
        """Build from (head, relation, tail) surfaces; tables in first-seen order."""
        concepts: dict[str, int] = {}
        relations: dict[str, int] = {}
        triples = []
        for h, r, t in rows:
            h, t = normalize(h), normalize(t)
            hi = concepts.setdefault(h, len(concepts))
            ri = relations.setdefault(r, len(relations))
            ti = concepts.setdefault(t, len(concepts))
            triples.append((hi, ri, ti))
        return cls(list(concepts), list(relations), triples, id_map=id_map)

    # serialized form: header line, then concept, relation and triple tables as TSV
    def dumps(self) -> str:
        lines = [f"#concepts {self.num_concepts} #relations {self.num_relations} #triples {len(self)}"]
        lines += [f"{c.id}\t{c.surface}" for c in self._concepts]
        lines += [f"{r.id}\t{r.name}" for r in self._relations]
        lines += [f"{t.head}\t{t.rel}\t{t.tail}" for t in self._triples]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf8")

    @classmethod
    def loads(cls, text: str) -> "KnowledgeGraph":
        lines = text.splitlines()
        m = re.match(r"#concepts (\d+) #relations (\d+) #triples (\d+)", lines[0] if lines else "")
        if not m:
            raise IngestError("missing graph header line")
        nc, nr, nt = map(int, m.groups())
        body = lines[1:]
        if len(body) < nc + nr + nt:
            raise IngestError("graph file truncated")
        concepts = [ln.split("\t", 1)[1] for ln in body[:nc]]
        relations = [ln.split("\t", 1)[1] for ln in body[nc:nc + nr]]
        triples = [tuple(map(int, ln.split("\t"))) for ln in body[nc + nr:nc + nr + nt]]
        return cls(concepts, relations, triples)

    @classmethod
    def load(cls, path: str | Path) -> "KnowledgeGraph":
        return cls.loads(Path(path).read_text(encoding="utf8"))


@dataclass
class IngestConfig:
    format: str = "tsv"  # "tsv" or "conceptnet"
    language: str | None = "en"
    relations: frozenset[str] | None = None
    strict: bool = False


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_kept: int = 0
    rows_dropped: int = 0
    rejects: list[tuple[int, str]] = field(default_factory=list)


_CN_URI = re.compile(r"^/c/([a-z]+)/([^/]+)")


def _parse_conceptnet(row: list[str], lang: str | None):
    # assertion CSV: uri, relation, head, tail, json
    if len(row) < 4:
        raise ValueError("expected at least 4 tab-separated columns")
    rel = row[1].rsplit("/", 1)[-1] if row[1].startswith("/r/") else row[1]
    heads = _CN_URI.match(row[2])
    tails = _CN_URI.match(row[3])
    if not heads or not tails:
        raise ValueError("unparseable concept URI")
    if lang is not None and (heads.group(1) != lang or tails.group(1) != lang):
        return None
    return heads.group(2), rel, tails.group(2)


def read_triple_rows(lines: Iterable[str], config: IngestConfig, report: IngestReport) -> Iterator[tuple[str, str, str]]:
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        report.rows_read += 1
        row = line.split("\t")
        try:
            if config.format == "conceptnet":
                parsed = _parse_conceptnet(row, config.language)
            else:
                if len(row) != 3 or not all(c.strip() for c in row):
                    raise ValueError(f"expected 3 non-empty columns, got {len(row)}")
                parsed = (row[0], row[1].strip(), row[2])
        except ValueError as exc:
            if config.strict:
                raise IngestError(f"line {lineno}: {exc}") from exc
            report.rejects.append((lineno, str(exc)))
            report.rows_dropped += 1
            continue
        if parsed is None or (config.relations is not None and parsed[1] not in config.relations):
            report.rows_dropped += 1
            continue
        report.rows_kept += 1
        yield parsed


def ingest_triples(source, config: IngestConfig | None = None) -> tuple[KnowledgeGraph, IngestReport]:
    """Read a triple dump (path or iterable of lines) into a deduplicated graph."""
    config = config or IngestConfig()
    report = IngestReport()
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf8") as fh:
            rows = list(read_triple_rows(fh, config, report))
    else:
        rows = list(read_triple_rows(source, config, report))
    if not rows:
        raise IngestError("no triples survived ingestion")
    graph = KnowledgeGraph.from_labeled(rows)
    logger.info("ingested %d rows: kept %d, dropped %d, %r",
                report.rows_read, report.rows_kept, report.rows_dropped, graph)
    return graph, report


class LexiconTagger(dict):
    """word -> POS mapping read from a ``word<TAB>POS`` file."""

    @classmethod
    def load(cls, path: str | Path) -> "LexiconTagger":
        tagger = cls()
        with open(path, encoding="utf8") as fh:
            for line in fh:
                parts = line.rstrip("\n").split("\t")
                if len(parts) >= 2 and parts[0]:
                    tagger[parts[0].lower()] = parts[1].strip().upper()
        return tagger

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf8") as fh:
            for w in sorted(self):
                fh.write(f"{w}\t{self[w]}\n")


def extract_seed_terms(documents: Iterable[str], pos_oracle: Mapping[str, str]) -> set[str]:
    """Unique normalized nouns, adjectives and adverbs across ``documents``."""
    seeds = set()
    for doc in documents:
        for tok in word_tokens(doc):
            if pos_oracle.get(tok) in SEED_POS:
                seeds.add(normalize(tok))
    return seeds


def resolve_seeds(graph: KnowledgeGraph, seeds: Iterable) -> tuple[set[int], int]:
    """Map seed surfaces (or ids) to concept ids; returns (ids, unresolved count)."""
    ids, missing = set(), 0
    for s in seeds:
        cid = s if isinstance(s, int) else graph.concept_id(s)
        if cid is None or not (0 <= cid < graph.num_concepts):
            missing += 1
        else:
            ids.add(cid)
    return ids, missing


def select_triples(graph: KnowledgeGraph, seed_ids: set[int], mode: str) -> list[Triple]:
    if mode == "incident":
        keep = seed_ids
    elif mode == "vicinity":
        keep = set(seed_ids)
        for s in seed_ids:
            keep |= graph.neighbors(s)
    else:
        raise ValueError(f"unknown extraction mode {mode!r}")
    return [t for t in graph.triples if t.head in keep or t.tail in keep]


def induced(graph: KnowledgeGraph, triples: Sequence[Triple]) -> KnowledgeGraph:
    """Re-index the concepts and relations touched by ``triples`` densely.

    Concept and relation order follows the parent tables; ``id_map`` maps
    parent concept id to new id.
    """
    used_c = sorted({t.head for t in triples} | {t.tail for t in triples})
    used_r = sorted({t.rel for t in triples})
    cmap = {old: new for new, old in enumerate(used_c)}
    rmap = {old: new for new, old in enumerate(used_r)}
    return KnowledgeGraph(
        [graph.surface(c) for c in used_c],
        [graph.relations[r].name for r in used_r],
        [(cmap[t.head], rmap[t.rel], cmap[t.tail]) for t in triples],
        id_map=cmap,
    )


def extract_subgraph(graph: KnowledgeGraph, seeds: Iterable, mode: str = "incident") -> KnowledgeGraph:
    """Triples touching the seeds ("incident") or their radius-1 vicinity ("vicinity")."""
    seed_ids, missing = resolve_seeds(graph, seeds)
    if missing:
        logger.debug("%d seeds did not resolve", missing)
    return induced(graph, select_triples(graph, seed_ids, mode))


def read_seed_list(path: str | Path) -> set[str]:
    with open(path, encoding="utf8") as fh:
        return {normalize(ln) for ln in fh if ln.strip()}


def write_seed_list(path: str | Path, seeds: Iterable[str]) -> None:
    Path(path).write_text("".join(f"{s}\n" for s in sorted(seeds)), encoding="utf8")


def write_triples_tsv(path: str | Path, rows: Iterable[tuple[str, str, str]]) -> None:
    with open(path, "w", encoding="utf8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerows(rows)
