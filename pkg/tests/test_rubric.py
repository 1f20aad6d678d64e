"""Rubric agent tests: structured-query formulation, ladder-ordered
retrieval with synonym expansion, controlled relaxation, the full scripted
loop with certainty grading and conflict resolution, budget enforcement,
and batch statistics against a hand-computed table."""

import json

import pytest

from guidebench.canonical import canonical_json
from guidebench.corpus import (ContentStore, FixtureCitationProvider,
                               assemble_neighborhood, freeze)
from guidebench.gateway import stub_gateway
from guidebench.items import Item, ItemNucleus
from guidebench.kgraph import KnowledgeGraph, grow_graph
from guidebench.rubric import (AgentTrace, BudgetExceeded, PICOCriterion,
                               PICOQuery, RelaxationLimitError, RetrievalTools,
                               Rubric, RubricAgentError, RubricElement,
                               ToolBudget, formulate_pico, relax,
                               retrieve_tiered, rubric_stats, run_agent,
                               save_rubrics, load_rubrics,
                               verify_citation_soundness)
from test_corpus import write_fixture
from test_kgraph import page as kg_page, scripted_gateway


def follow_up_item():
    return Item(item_id="g1-0001", g_level="G1", p_level="P0",
                stem=("What is the recommended follow-up interval for an 8 mm "
                      "part-solid lung nodule in a low-risk patient?"),
                nucleus=ItemNucleus(
                    entities=["part-solid lung nodule", "CT surveillance"],
                    values=[{"quantity": 8, "unit": "mm"}],
                    qualifiers=[{"text": "low-risk", "safety_critical": False}]))


@pytest.fixture
def tools(tmp_path, fixture_tree, fixture_document):
    from guidebench.kgraph import PageContext

    graph = KnowledgeGraph()
    grow_graph(graph, PageContext(doc_id="anchor-guideline", page_no=8,
                                  text="follow-up content", section_id="n0007",
                                  section_title="Follow-up Schedule"),
               scripted_gateway({
                   "entities": [
                       {"label": "part-solid lung nodule", "kind": "condition"},
                       {"label": "CT surveillance", "kind": "intervention"}],
                   "relations": [{
                       "subject": "part-solid lung nodule",
                       "object": "CT surveillance", "rel_type": "follow_up",
                       "qualifiers": [{"name": "size", "value": 8, "unit": "mm"},
                                      {"name": "risk", "value": "low-risk"}]}],
                   "knowledge_points": [{
                       "entity": "CT surveillance", "kind": "recommendation",
                       "text": "CT surveillance at 12 months for low-risk "
                               "part-solid nodules."}],
               }))
    write_fixture(tmp_path / "citations.txt",
                  {"anchor-guideline": ["TRIAL01", "COHORT01"]},
                  metadata={
                      "anchor-guideline": {"title": "Anchor", "pub_type": "guideline"},
                      "TRIAL01": {"title": "Surveillance RCT",
                                  "pub_type": "randomized trial"},
                      "COHORT01": {"title": "Cohort study",
                                   "pub_type": "cohort"},
                  },
                  content={
                      "anchor-guideline": "Anchor guideline text.",
                      "TRIAL01": "Randomized trial of CT surveillance in "
                                 "low-risk patients with part-solid nodules.",
                      "COHORT01": "Cohort data on CT surveillance adherence in "
                                  "low-risk populations.",
                  })
    provider = FixtureCitationProvider(tmp_path / "citations.txt")
    manifest = assemble_neighborhood("anchor-guideline", 1, provider)
    corpus = freeze(manifest, ContentStore(tmp_path / "store"),
                    fetch=lambda r: provider.content_of(r.doc_id))
    return RetrievalTools(graph=graph, tree=fixture_tree, doc=fixture_document,
                          corpus=corpus)


def base_query(population=None, intervention="CT surveillance", outcomes=None):
    return PICOQuery(query_id="q1",
                     population=population or [
                         PICOCriterion(text="low-risk", safety_critical=False)],
                     intervention=intervention, outcomes=outcomes or [])


# -- formulate ----------------------------------------------------------------

def test_formulate_derives_population_from_nucleus():
    item = follow_up_item()
    gateway = stub_gateway([{"role": "rubric_agent", "response_json": {
        "queries": [{"population": [], "intervention": "CT surveillance",
                     "comparators": [], "outcomes": []}]}}])
    queries = formulate_pico(item, gateway)
    assert len(queries) == 1
    assert [c.text for c in queries[0].population] == ["low-risk"]


def test_formulate_two_variants_distinct_ids():
    item = follow_up_item()
    gateway = stub_gateway([{"role": "rubric_agent", "response_json": {
        "queries": [{"intervention": "CT surveillance"},
                    {"intervention": "surveillance imaging"}]}}])
    queries = formulate_pico(item, gateway)
    assert [q.query_id for q in queries] == ["g1-0001-q1", "g1-0001-q2"]


def test_formulate_safety_critical_propagates():
    item = follow_up_item()
    item.nucleus.qualifiers.append({"text": "pregnancy", "safety_critical": True})
    gateway = stub_gateway([{"role": "rubric_agent", "response_json": {
        "queries": [{"intervention": "CT surveillance"}]}}])
    query = formulate_pico(item, gateway)[0]
    flags = {c.text: c.safety_critical for c in query.population}
    assert flags == {"low-risk": False, "pregnancy": True}


def test_formulate_retries_then_fails():
    item = follow_up_item()
    gateway = stub_gateway([{"role": "rubric_agent", "response": "not json"}])
    with pytest.raises(RubricAgentError):
        formulate_pico(item, gateway)


# -- retrieval -----------------------------------------------------------------

def test_ladder_order_guideline_first(tools):
    snippets = retrieve_tiered(base_query(), tools)
    assert snippets
    tiers = [s.tier for s in snippets]
    assert tiers == sorted(tiers, key=["guideline", "systematic_review", "rct",
                                       "observational", "definitional"].index)
    assert tiers[0] == "guideline"
    assert "rct" in tiers  # the trial document passed the filter


def test_synonym_expansion_recorded(tools):
    tools.graph.synonym_table["psn"] = "part solid lung nodule"
    retrieve_tiered(base_query(population=[
        PICOCriterion(text="PSN", safety_critical=False)]), tools)
    expansions = [e for e in tools.log if e["tool"] == "expand_terms"]
    assert expansions
    assert any("PSN" in e["expansion"] and
               any("part-solid" in v for v in e["expansion"]["PSN"])
               for e in expansions)


def test_dedup_same_snippet_once(tools):
    snippets = retrieve_tiered(base_query(), tools)
    keys = [(canonical_json(s.provenance), s.text) for s in snippets]
    assert len(keys) == len(set(keys))


def test_zero_snippets_empty_list(tools):
    query = base_query(population=[
        PICOCriterion(text="zebra criterion", safety_critical=True)])
    assert retrieve_tiered(query, tools) == []


# -- relaxation ------------------------------------------------------------------

def test_relax_order_and_bound():
    query = base_query(population=[
        PICOCriterion(text="low-risk", safety_critical=False),
        PICOCriterion(text="pregnancy", safety_critical=True)])
    level1 = relax(query)
    assert level1.relaxation_level == 1
    flags = {c.text: c.active for c in level1.population}
    assert flags == {"low-risk": False, "pregnancy": True}  # generalized vs intact
    level2 = relax(level1)
    level3 = relax(level2)
    assert level3.relaxation_level == 3
    assert all(c.text != "pregnancy" or c.active for c in level3.population)
    with pytest.raises(RelaxationLimitError):
        relax(level3)


def test_non_relaxable_present_in_all_outputs():
    query = base_query(population=[
        PICOCriterion(text="renal impairment", safety_critical=True)])
    current = query
    for _ in range(3):
        current = relax(current)
        texts = [c.text for c in current.population]
        assert "renal impairment" in texts
        assert all(c.active for c in current.population if c.safety_critical)


def test_relaxation_monotone_snippet_sets(tools):
    query = base_query(population=[
        PICOCriterion(text="low-risk", safety_critical=False),
        PICOCriterion(text="adherence", safety_critical=False)])
    previous: set = set()
    current = query
    while True:
        tools.budget = ToolBudget(limit=100)
        snippets = retrieve_tiered(current, tools)
        got = {(canonical_json(s.provenance), s.text) for s in snippets}
        assert previous <= got
        previous = got
        if current.relaxation_level >= 3:
            break
        current = relax(current)


# -- full agent loop -----------------------------------------------------------------

HAPPY_SYNTHESIS = {
    "conclusions": [{"text": "CT surveillance at 12 months is appropriate",
                     "certainty": "high", "conflict": False, "limitations": ""}],
    "positives": [
        {"tier": "A1", "text": "Recommend CT surveillance", "snippets": [0]},
        {"tier": "A1", "text": "Interval of 12 months", "snippets": [0]},
        {"tier": "A2", "text": "Note the low-risk status", "snippets": [0]},
        {"tier": "A2", "text": "Confirm nodule size 8 mm", "snippets": [0]},
        {"tier": "A3", "text": "Mention smoking cessation counselling",
         "snippets": [0]},
    ],
    "negatives": [
        {"tier": "S2", "text": "Mislabel the nodule type", "snippets": [0]},
        {"tier": "S3", "text": "PET-CT as the first step", "snippets": [0]},
        {"tier": "S4", "text": "Immediate lobectomy without workup",
         "snippets": [0]},
    ],
}


def formulate_rule(intervention="CT surveillance", population=None):
    return {"role": "rubric_agent", "contains": '"attempt": 0',
            "response_json": {"queries": [{
                "population": population or [], "intervention": intervention,
                "comparators": [], "outcomes": []}]}}


def synthesis_rule(payload=None):
    return {"role": "rubric_agent", "contains": '"snippets"',
            "response_json": payload or HAPPY_SYNTHESIS}


def test_run_agent_happy_path(tools):
    item = follow_up_item()
    gateway = stub_gateway([formulate_rule(), synthesis_rule()])
    rubric, trace = run_agent(item, tools, gateway)
    assert rubric is not None
    assert trace.termination_reason == "high_certainty"
    tiers = sorted(e.tier for e in rubric.positives)
    assert tiers == ["A1", "A1", "A2", "A2", "A3"]
    assert sorted(e.tier for e in rubric.negatives) == ["S2", "S3", "S4"]
    assert [e.element_id for e in rubric.positives] == \
        ["A1-1", "A1-2", "A2-1", "A2-2", "A3-1"]
    assert verify_citation_soundness(rubric, trace) == []
    assert not rubric.warnings


def test_run_agent_sparse_then_found_records_relaxation(tools):
    item = follow_up_item()
    item.nucleus.qualifiers.append({"text": "eighteen-wheeler driver",
                                    "safety_critical": False})
    gateway = stub_gateway([formulate_rule(), synthesis_rule()])
    rubric, trace = run_agent(item, tools, gateway)
    assert rubric is not None
    relax_steps = [s for s in trace.steps
                   if s["kind"] == "decision" and s["text"] == "relaxed query"]
    assert relax_steps and relax_steps[0]["relaxation_level"] == 1
    found = [s for s in trace.steps if s["kind"] == "tool_result" and s["results"]]
    assert found
    assert trace.termination_reason == "high_certainty"


def test_run_agent_conflict_prefers_higher_tier_citation(tools):
    item = follow_up_item()
    conflicted = json.loads(json.dumps(HAPPY_SYNTHESIS))
    conflicted["conclusions"][0]["conflict"] = True
    conflicted["conclusions"][0]["certainty"] = "moderate"
    # cite a late (lower-tier) snippet and an early guideline snippet
    conflicted["positives"][0]["snippets"] = [3, 0]
    gateway = stub_gateway([formulate_rule(), synthesis_rule(conflicted)])
    rubric, trace = run_agent(item, tools, gateway)
    assert rubric is not None
    assert rubric.certainty_notes[0]["conflict"] is True
    first_element = rubric.positives[0]
    assert len(first_element.citations) == 1
    assert first_element.citations[0]["doc_id"] == "anchor-guideline"


def test_run_agent_budget_exhausted(tools):
    item = follow_up_item()
    gateway = stub_gateway([formulate_rule(), synthesis_rule()])
    rubric, trace = run_agent(item, tools, gateway, budget=2)
    assert rubric is None
    assert trace.termination_reason == "budget_exhausted"


def test_run_agent_within_budget_on_sparse_fixture(tools):
    """Relaxes in fixed order, keeps safety qualifiers, terminates in budget."""
    item = follow_up_item()
    item.nucleus.qualifiers = [
        {"text": "unobtainium exposure", "safety_critical": False},
        {"text": "low-risk", "safety_critical": False},
    ]
    gateway = stub_gateway([
        formulate_rule(intervention="nonexistent intervention"),
        synthesis_rule({"conclusions": [{"text": "insufficient evidence",
                                         "certainty": "low", "conflict": False,
                                         "limitations": "sparse"}],
                        "positives": [{"tier": "A1",
                                       "text": "State the uncertainty",
                                       "snippets": []}],
                        "negatives": []}),
    ])
    rubric, trace = run_agent(item, tools, gateway, budget=20)
    assert tools.budget.used <= 20
    assert trace.termination_reason == "low_certainty_fallback"
    levels = [s["relaxation_level"] for s in trace.steps
              if s["kind"] == "decision" and s["text"] == "relaxed query"]
    assert levels == [1, 2, 3]
    assert rubric is not None


def test_missing_a1_warning(tools):
    item = follow_up_item()
    payload = json.loads(json.dumps(HAPPY_SYNTHESIS))
    payload["positives"] = [p for p in payload["positives"]
                            if p["tier"] != "A1"]
    gateway = stub_gateway([formulate_rule(), synthesis_rule(payload)])
    rubric, _trace = run_agent(item, tools, gateway)
    assert rubric is not None
    assert any("no A1 element" in w for w in rubric.warnings)


def test_s1_tier_rejected_from_rubric(tools):
    item = follow_up_item()
    payload = json.loads(json.dumps(HAPPY_SYNTHESIS))
    payload["negatives"].append({"tier": "S1", "text": "off topic", "snippets": [0]})
    gateway = stub_gateway([formulate_rule(), synthesis_rule(payload)])
    rubric, _ = run_agent(item, tools, gateway)
    assert all(e.tier != "S1" for e in rubric.negatives)
    assert any("S1" in w for w in rubric.warnings)


def test_element_text_unit_normalization(tools):
    item = follow_up_item()
    payload = json.loads(json.dumps(HAPPY_SYNTHESIS))
    payload["positives"][1]["text"] = "Interval of 1 cm threshold at 12 months"
    gateway = stub_gateway([formulate_rule(), synthesis_rule(payload)])
    rubric, _ = run_agent(item, tools, gateway)
    texts = [e.text for e in rubric.positives]
    assert "Interval of 10 mm threshold at 360 day" in texts


# -- statistics -------------------------------------------------------------------

def element(tier, n, polarity):
    return RubricElement(element_id=f"{tier}-{n}", polarity=polarity, tier=tier,
                         text=f"{tier} {n}", citations=[{"doc_id": "a"}])


def synthetic_rubric(item_id, counts):
    positives, negatives = [], []
    for tier in ("A1", "A2", "A3"):
        positives += [element(tier, i + 1, "positive")
                      for i in range(counts.get(tier, 0))]
    for tier in ("S2", "S3", "S4"):
        negatives += [element(tier, i + 1, "negative")
                      for i in range(counts.get(tier, 0))]
    return Rubric(rubric_id=f"rub-{item_id}", item_id=item_id,
                  positives=positives, negatives=negatives)


def synthetic_item(item_id, g_level):
    return Item(item_id=item_id, g_level=g_level, p_level="P0", stem="s",
                nucleus=ItemNucleus(entities=["e"]))


def test_single_rubric_stats_min_equals_max():
    rubric = synthetic_rubric("i1", {"A1": 2, "S4": 1})
    table = rubric_stats([rubric], [synthetic_item("i1", "G1")])
    assert table["G1"]["A1"] == {"min": 2, "mean": 2.0, "max": 2, "n_items": 1}
    assert table["G1"]["S4"]["min"] == table["G1"]["S4"]["max"] == 1


def test_ten_rubric_batch_matches_hand_computed():
    """Synthetic batch with known counts; expected cells computed by hand."""
    spec = [
        ("i1", "G1", {"A1": 1, "A2": 2}),
        ("i2", "G1", {"A1": 3, "S2": 1}),
        ("i3", "G1", {"A1": 2, "A3": 1, "S4": 2}),
        ("i4", "G2", {"A1": 4}),
        ("i5", "G2", {"A2": 1, "S3": 2}),
        ("i6", "G3", {"A1": 1, "A2": 1, "S4": 1}),
        ("i7", "G3", {"A1": 5}),
        ("i8", "G4", {"A2": 2, "S3": 1}),
        ("i9", "G4", {"A1": 2, "S2": 3}),
        ("i10", "G4", {"A1": 1, "A3": 2}),
    ]
    rubrics = [synthetic_rubric(i, c) for i, _, c in spec]
    items = [synthetic_item(i, g) for i, g, _ in spec]
    table = rubric_stats(rubrics, items)
    # hand-computed: G1 A1 counts are [1, 3, 2] -> min 1, mean 2.0, max 3
    assert table["G1"]["A1"] == {"min": 1, "mean": 2.0, "max": 3, "n_items": 3}
    # G4 A1 counts are [0, 2, 1] -> mean 1.0
    assert table["G4"]["A1"] == {"min": 0, "mean": 1.0, "max": 2, "n_items": 3}
    # G2 S3 counts are [0, 2]
    assert table["G2"]["S3"] == {"min": 0, "mean": 1.0, "max": 2, "n_items": 2}
    assert table["G3"]["A2"] == {"min": 0, "mean": 0.5, "max": 1, "n_items": 2}


def test_empty_batch_rejected():
    with pytest.raises(RubricAgentError):
        rubric_stats([], [])


def test_rubric_roundtrip(tmp_path):
    rubrics = [synthetic_rubric("i1", {"A1": 1, "S2": 1})]
    save_rubrics(rubrics, tmp_path / "r.jsonl")
    loaded = load_rubrics(tmp_path / "r.jsonl")
    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in rubrics]
