"""Knowledge graph tests: scripted growth, fusion against an offline
similarity-threshold oracle, replay determinism, query filters against a
linear-scan oracle, and persistence round-trips."""

import json
import random

import numpy as np
import pytest

from guidebench.embeddings import StaticEmbeddingProvider
from guidebench.gateway import stub_gateway
from guidebench.kgraph import (FUSION_SIMILARITY_THRESHOLD, GraphError,
                               KnowledgeGraph, PageContext, fuse_entity,
                               grow_graph, load_graph, match_entity, query,
                               replay_growth, save_graph)


def page(page_no, text="some page text", section="n0001"):
    return PageContext(doc_id="anchor", page_no=page_no, text=text,
                       section_id=section, section_title="Section")


def scripted_gateway(payload, contains=None):
    rule = {"role": "extraction", "response_json": payload}
    if contains:
        rule["contains"] = contains
    return stub_gateway([rule])


BASIC_PAYLOAD = {
    "entities": [{"label": "part-solid lung nodule", "kind": "condition"},
                 {"label": "CT surveillance", "kind": "intervention"}],
    "relations": [{"subject": "part-solid lung nodule",
                   "object": "CT surveillance", "rel_type": "follow_up",
                   "qualifiers": [{"name": "size", "value": 8, "unit": "mm"}]}],
    "knowledge_points": [{"entity": "part-solid lung nodule",
                          "kind": "definition",
                          "text": "A nodule with solid and ground-glass parts."}],
}


def test_empty_page_is_noop():
    graph = KnowledgeGraph()
    grow_graph(graph, page(1, text="   "), scripted_gateway({}))
    assert not graph.entities and not graph.relations
    assert graph.growth_log[-1]["noop"] is True


def test_scripted_growth_adds_validated_structures():
    graph = KnowledgeGraph()
    grow_graph(graph, page(3), scripted_gateway(BASIC_PAYLOAD))
    assert len(graph.entities) == 2
    assert len(graph.relations) == 1
    assert len(graph.knowledge_points) == 1
    relation = next(iter(graph.relations.values()))
    assert relation.provenance == [{"doc_id": "anchor", "section": "n0001",
                                    "page": 3}]
    kinds = {e.kind for e in graph.entities.values()}
    assert kinds == {"condition", "intervention"}


def test_invalid_proposals_dropped_and_logged():
    payload = {
        "entities": [{"label": "thing", "kind": "gadget"},
                     {"label": "lobectomy", "kind": "intervention"}],
        "relations": [
            {"subject": "lobectomy", "object": "missing entity",
             "rel_type": "indication"},
            {"subject": "lobectomy", "object": "lobectomy",
             "rel_type": "made_up_relation"},
            {"subject": "lobectomy", "object": "lobectomy",
             "rel_type": "indication",
             "qualifiers": [{"name": "dose", "value": 5, "unit": None}]},
        ],
        "knowledge_points": [{"entity": "lobectomy", "kind": "rumor", "text": "x"}],
    }
    graph = KnowledgeGraph()
    grow_graph(graph, page(1), scripted_gateway(payload))
    assert len(graph.entities) == 1
    assert len(graph.relations) == 0
    reasons = {d["reason"] for d in graph.growth_log[-1]["dropped"]}
    assert reasons == {"invalid_entity", "unresolvable_endpoint",
                       "unknown_rel_type", "numeric_qualifier_without_unit",
                       "invalid_knowledge_point"}


def test_rel_type_alias_mapped():
    payload = {
        "entities": [{"label": "NSCLC", "kind": "condition"},
                     {"label": "chemo", "kind": "intervention"}],
        "relations": [{"subject": "NSCLC", "object": "chemo",
                       "rel_type": "treats"}],
        "knowledge_points": [],
    }
    graph = KnowledgeGraph()
    grow_graph(graph, page(1), scripted_gateway(payload))
    assert next(iter(graph.relations.values())).rel_type == "indication"


def test_gateway_failure_marks_page_pending():
    graph = KnowledgeGraph()
    gateway = stub_gateway([{"role": "extraction", "response": "x",
                             "fail_times": 99}])
    gateway.max_retries = 0
    gateway.backoff_base = 0.0
    grow_graph(graph, page(4), gateway)
    assert graph.pending_pages == [4]
    assert graph.growth_log == []


# -- fusion ---------------------------------------------------------------------

def test_exact_label_match_returns_existing():
    graph = KnowledgeGraph()
    first = fuse_entity(graph, "Lung Nodule", "condition")
    second = fuse_entity(graph, "lung nodule", "condition")
    assert first == second
    assert len(graph.entities) == 1


def test_fusion_idempotent():
    graph = KnowledgeGraph()
    a = fuse_entity(graph, "NSCLC", "condition")
    state = json.dumps(graph.to_state_dict(), sort_keys=True, default=str)
    b = fuse_entity(graph, "NSCLC", "condition")
    assert a == b
    assert json.dumps(graph.to_state_dict(), sort_keys=True, default=str) == state


def test_abbreviation_resolved_via_synonym_table():
    graph = KnowledgeGraph(synonym_table={
        "nsclc": "non small cell lung cancer"})
    eid = fuse_entity(graph, "non-small cell lung cancer", "condition")
    assert fuse_entity(graph, "NSCLC", "condition") == eid
    assert "NSCLC" in graph.entities[eid].synonyms


def test_fusion_never_crosses_kinds():
    graph = KnowledgeGraph()
    cond = fuse_entity(graph, "resection", "condition")
    interv = fuse_entity(graph, "resection", "intervention")
    assert cond != interv
    assert len(graph.entities) == 2


def test_unknown_kind_rejected():
    with pytest.raises(GraphError):
        fuse_entity(KnowledgeGraph(), "x", "procedure")


def test_fifty_pair_fusion_matches_threshold_oracle():
    """Fusion decisions over 50 mention/entity pairs with precomputed fixture
    vectors must match brute-force cosine thresholding."""
    rng = np.random.default_rng(99)
    vectors = {}
    entities = [f"entity {i}" for i in range(10)]
    mentions = [f"mention {i}" for i in range(50)]
    for i, name in enumerate(entities):
        vectors[name] = rng.normal(size=16)
    for i, name in enumerate(mentions):
        if i % 2 == 0:
            base = vectors[entities[i % 10]]
            vectors[name] = base + rng.normal(scale=0.05, size=16)
        else:
            vectors[name] = rng.normal(size=16)

    def cos01(u, v):
        denom = np.linalg.norm(u) * np.linalg.norm(v)
        return (float(np.dot(u, v) / denom) + 1.0) / 2.0

    provider = StaticEmbeddingProvider(vectors)
    graph = KnowledgeGraph(embedder=provider)
    ids = {}
    for name in entities:
        ids[name] = fuse_entity(graph, name, "condition")

    for mention in mentions:
        sims = {name: cos01(vectors[mention], vectors[name]) for name in entities}
        best_name = max(entities, key=lambda n: (sims[n], ))
        expect_match = sims[best_name] >= FUSION_SIMILARITY_THRESHOLD
        got = match_entity(graph, mention, "condition")
        if expect_match:
            assert got == ids[best_name], mention
        else:
            assert got is None, mention


# -- replay -----------------------------------------------------------------------

def grow_fixture_graph():
    graph = KnowledgeGraph(synonym_table={"psn": "part solid lung nodule"})
    payloads = {
        1: BASIC_PAYLOAD,
        2: {"entities": [{"label": "PSN", "kind": "condition"}],
            "relations": [{"subject": "PSN", "object": "CT surveillance",
                           "rel_type": "monitoring",
                           "qualifiers": [{"name": "interval", "value": 12,
                                           "unit": "months"}]}],
            "knowledge_points": [{"entity": "CT surveillance", "kind": "procedure",
                                  "text": "Low-dose CT at defined intervals."}]},
        3: {"entities": [], "relations": [], "knowledge_points": []},
    }
    for page_no, payload in payloads.items():
        gateway = scripted_gateway(payload)
        grow_graph(graph, page(page_no, text=f"page {page_no} content",
                               section=f"n000{page_no}"), gateway)
    return graph


def test_synonym_table_fuses_during_growth():
    graph = grow_fixture_graph()
    # "PSN" maps through the synonym table onto the existing condition entity
    conditions = [e for e in graph.entities.values() if e.kind == "condition"]
    assert len(conditions) == 1
    assert "PSN" in conditions[0].synonyms


def test_growth_log_replay_reproduces_graph():
    graph = grow_fixture_graph()
    replayed = replay_growth(graph.growth_log,
                             synonym_table={"psn": "part solid lung nodule"})
    assert replayed.to_state_dict() == graph.to_state_dict()


def test_duplicate_relation_merges_provenance():
    graph = KnowledgeGraph()
    grow_graph(graph, page(1), scripted_gateway(BASIC_PAYLOAD))
    grow_graph(graph, page(2), scripted_gateway(BASIC_PAYLOAD))
    assert len(graph.relations) == 1
    relation = next(iter(graph.relations.values()))
    assert [p["page"] for p in relation.provenance] == [1, 2]


def test_knowledge_point_dedup_by_normalized_text():
    graph = KnowledgeGraph()
    grow_graph(graph, page(1), scripted_gateway(BASIC_PAYLOAD))
    variant = json.loads(json.dumps(BASIC_PAYLOAD))
    variant["knowledge_points"][0]["text"] = \
        "  A nodule with solid AND ground-glass parts. "
    grow_graph(graph, page(2), scripted_gateway(variant))
    assert len(graph.knowledge_points) == 1
    kp = next(iter(graph.knowledge_points.values()))
    assert len(kp.provenance) == 2


# -- query ------------------------------------------------------------------------

def test_query_empty_graph():
    assert query(KnowledgeGraph(), {"rel_type": "indication"}) == []


def test_query_rel_type_filter():
    graph = grow_fixture_graph()
    follow = query(graph, {"rel_type": "follow_up"})
    monitoring = query(graph, {"rel_type": "monitoring"})
    assert len(follow) == 1 and len(monitoring) == 1
    assert follow[0][0].rel_type == "follow_up"


def test_query_matches_linear_scan_oracle():
    graph = grow_fixture_graph()
    rng = random.Random(5)
    rel_types = [None, "follow_up", "monitoring", "indication"]
    entities = [None, "part-solid lung nodule", "CT surveillance", "nothing"]
    for _ in range(40):
        pattern = {}
        rel_type = rng.choice(rel_types)
        entity = rng.choice(entities)
        if rel_type:
            pattern["rel_type"] = rel_type
        if entity:
            pattern["entity"] = entity
        got = [r.relation_id for r, _ in query(graph, pattern)]

        expected = []
        for rid in sorted(graph.relations):
            relation = graph.relations[rid]
            if rel_type and relation.rel_type != rel_type:
                continue
            if entity:
                labels = set()
                for eid in (relation.subject, relation.object):
                    ent = graph.entities[eid]
                    labels.add(ent.canonical_label.lower())
                    labels.update(s.lower() for s in ent.synonyms)
                if entity.lower() not in labels:
                    continue
            expected.append(rid)
        expected.sort(key=lambda rid: (graph.relations[rid].rel_type, rid))
        assert got == expected, pattern


def test_query_qualifier_filter_unit_normalized():
    graph = grow_fixture_graph()
    # 12 months stored; 360 days normalizes to the same base quantity
    hits = query(graph, {"qualifier": {"name": "interval", "value": 360,
                                       "unit": "days"}})
    assert len(hits) == 1
    assert hits[0][0].rel_type == "monitoring"


def test_query_semantic_mode_ranks_by_probe():
    graph = grow_fixture_graph()
    results = query(graph, probe="CT surveillance interval monitoring")
    assert results  # ordered by similarity; top relation mentions surveillance
    top_text = results[0][0].rel_type
    assert top_text in ("monitoring", "follow_up")


def test_attached_knowledge_points_come_from_endpoints():
    graph = grow_fixture_graph()
    for relation, kps in query(graph):
        valid = set(graph.entities[relation.subject].knowledge_point_ids
                    + graph.entities[relation.object].knowledge_point_ids)
        assert {kp.kp_id for kp in kps} == valid


# -- persistence --------------------------------------------------------------------

def test_graph_roundtrip_exact(tmp_path):
    graph = grow_fixture_graph()
    save_graph(graph, tmp_path / "kg")
    loaded = load_graph(tmp_path / "kg")
    assert loaded.to_state_dict() == graph.to_state_dict()
    assert loaded.synonym_table == graph.synonym_table
    save_graph(loaded, tmp_path / "kg2")
    assert (tmp_path / "kg" / "entities.jsonl").read_bytes() == \
        (tmp_path / "kg2" / "entities.jsonl").read_bytes()
