import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kestance.kgraph import (IngestConfig, IngestError, KnowledgeGraph, LexiconTagger, extract_seed_terms,
                             extract_subgraph, ingest_triples, normalize, read_seed_list, write_seed_list,
                             write_triples_tsv)


def chain():
    return KnowledgeGraph.from_labeled([("a", "r", "b"), ("b", "r", "c"), ("c", "r", "d")])


def labeled_set(g):
    return set(g.labeled_triples())


def test_ingest_three_rows():
    g, report = ingest_triples(["a\tRelatedTo\tb\n", "b\tIsA\tc\n", "a\tIsA\tc\n"])
    assert (g.num_concepts, g.num_relations, len(g)) == (3, 2, 3)
    assert report.rows_kept == 3


def test_ingest_dedups():
    g, _ = ingest_triples(["a\tRelatedTo\tb", "a\tRelatedTo\tb", "b\tIsA\tc", "a\tIsA\tc"])
    assert len(g) == 3


def test_ingest_conceptnet_rows_keeps_english():
    rows = [
        "/a/x\t/r/IsA\t/c/en/teacher/n\t/c/en/job\t{}",
        "/a/y\t/r/IsA\t/c/fr/chat\t/c/fr/animal\t{}",
        "/a/z\t/r/RelatedTo\t/c/en/ice_cream\t/c/en/cold\t{}",
    ]
    g, report = ingest_triples(rows, IngestConfig(format="conceptnet"))
    assert labeled_set(g) == {("teacher", "IsA", "job"), ("ice_cream", "RelatedTo", "cold")}
    assert report.rows_dropped == 1


def test_ingest_bad_rows_dropped_or_fatal():
    rows = ["a\tr\tb", "broken line", "c\tr\td"]
    g, report = ingest_triples(rows)
    assert len(g) == 2 and report.rejects[0][0] == 2
    with pytest.raises(IngestError, match="line 2"):
        ingest_triples(rows, IngestConfig(strict=True))
    with pytest.raises(IngestError):
        ingest_triples(["only junk"])


def test_relation_filter():
    g, _ = ingest_triples(["a\tIsA\tb", "a\tRelatedTo\tc"], IngestConfig(relations=frozenset({"IsA"})))
    assert labeled_set(g) == {("a", "IsA", "b")}


def test_seed_terms_by_pos():
    oracle = {"quick": "ADJ", "fox": "NOUN", "quickly": "ADV", "runs": "VERB", "the": "DET"}
    assert extract_seed_terms(["The quick fox runs quickly"], oracle) == {"quick", "fox", "quickly"}
    assert extract_seed_terms(["a fox", "the fox"], oracle) == {"fox"}
    assert extract_seed_terms([], oracle) == set()


def test_incident_on_chain():
    sub = extract_subgraph(chain(), {"b"}, "incident")
    assert labeled_set(sub) == {("a", "r", "b"), ("b", "r", "c")}


def test_vicinity_on_chain():
    sub = extract_subgraph(chain(), {"b"}, "vicinity")
    assert labeled_set(sub) == {("a", "r", "b"), ("b", "r", "c"), ("c", "r", "d")}


def test_unknown_seed_gives_empty_graph():
    sub = extract_subgraph(chain(), {"z"}, "incident")
    assert len(sub) == 0 and sub.num_concepts == 0


def test_induced_ids_map_back_to_parent():
    g = chain()
    sub = extract_subgraph(g, {"c"}, "incident")
    for old, new in sub.id_map.items():
        assert g.surface(old) == sub.surface(new)


def test_serialization_roundtrip(tmp_path):
    g = KnowledgeGraph.from_labeled([("ice cream", "IsA", "food"), ("food", "RelatedTo", "eat")])
    g.save(tmp_path / "g.txt")
    text = (tmp_path / "g.txt").read_text()
    assert text.splitlines()[0] == "#concepts 3 #relations 2 #triples 2"
    back = KnowledgeGraph.load(tmp_path / "g.txt")
    assert back.labeled_triples() == g.labeled_triples()


def test_surface_normalization():
    assert normalize("  Ice  Cream ") == "ice_cream"
    g = KnowledgeGraph.from_labeled([("Ice Cream", "IsA", "Food")])
    assert g.concept_id("ice cream") == 0


def test_seed_and_tagger_files(tmp_path):
    write_seed_list(tmp_path / "s.txt", {"b", "a"})
    assert (tmp_path / "s.txt").read_text() == "a\nb\n"
    assert read_seed_list(tmp_path / "s.txt") == {"a", "b"}
    LexiconTagger({"fox": "NOUN"}).save(tmp_path / "t.tsv")
    assert LexiconTagger.load(tmp_path / "t.tsv") == {"fox": "NOUN"}


# --- properties -----------------------------------------------------------------

triples_strategy = st.lists(
    st.tuples(st.integers(0, 11), st.integers(0, 2), st.integers(0, 11)), min_size=1, max_size=60)


def make_graph(raw):
    return KnowledgeGraph.from_labeled([(f"c{h}", f"r{r}", f"c{t}") for h, r, t in raw])


def brute_force(g, seed_surfaces, mode):
    seeds = {s for s in seed_surfaces if g.concept_id(s) is not None}
    keep = set(seeds)
    if mode == "vicinity":
        for h, _, t in g.labeled_triples():
            if h in seeds:
                keep.add(t)
            if t in seeds:
                keep.add(h)
    return {tr for tr in g.labeled_triples() if tr[0] in keep or tr[2] in keep}


@settings(max_examples=80, deadline=None)
@given(triples_strategy, st.sets(st.integers(0, 14), max_size=4))
def test_extract_matches_brute_force(raw, seeds):
    g = make_graph(raw)
    names = {f"c{s}" for s in seeds}
    for mode in ("incident", "vicinity"):
        assert labeled_set(extract_subgraph(g, names, mode)) == brute_force(g, names, mode)


@settings(max_examples=80, deadline=None)
@given(triples_strategy, st.sets(st.integers(0, 11), max_size=4))
def test_incident_subset_of_vicinity(raw, seeds):
    g = make_graph(raw)
    names = {f"c{s}" for s in seeds}
    assert labeled_set(extract_subgraph(g, names, "incident")) <= labeled_set(extract_subgraph(g, names, "vicinity"))


@settings(max_examples=80, deadline=None)
@given(triples_strategy)
def test_adjacency_rebuild(raw):
    g = make_graph(raw)
    assert KnowledgeGraph.build_adjacency(g.triples) == g.adjacency


@settings(max_examples=50, deadline=None)
@given(triples_strategy)
def test_ingest_is_idempotent(raw):
    g = make_graph(raw)
    lines = ["\t".join(tr) for tr in g.labeled_triples()]
    again, _ = ingest_triples(lines)
    assert sorted(again.labeled_triples()) == sorted(g.labeled_triples())
    assert sorted(KnowledgeGraph.loads(g.dumps()).labeled_triples()) == sorted(g.labeled_triples())


def test_brute_force_agreement_at_ten_thousand_triples(tmp_path):
    rnd = random.Random(5)
    rows = {(f"c{rnd.randrange(3000)}", f"r{rnd.randrange(5)}", f"c{rnd.randrange(3000)}") for _ in range(10_000)}
    path = tmp_path / "big.tsv"
    write_triples_tsv(path, sorted(rows))
    g, _ = ingest_triples(path)
    seeds = {f"c{rnd.randrange(3000)}" for _ in range(40)}
    for mode in ("incident", "vicinity"):
        assert labeled_set(extract_subgraph(g, seeds, mode)) == brute_force(g, seeds, mode)
