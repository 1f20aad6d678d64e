"""Run the rubric-synthesis agent over a tiny frozen corpus.

The agent formulates a structured query from the item nucleus, retrieves in
evidence-ladder order over three tools, relaxes the query once when the
population criterion finds nothing, then synthesizes graded conclusions and
tiered elements with citations. The trace records every step.
"""

import tempfile
from pathlib import Path

from guidebench.corpus import (ContentStore, FixtureCitationProvider,
                               assemble_neighborhood, freeze)
from guidebench.doctree import NormalizedDocument, build_tree
from guidebench.gateway import stub_gateway
from guidebench.items import Item, ItemNucleus
from guidebench.kgraph import KnowledgeGraph, PageContext, grow_graph
from guidebench.rubric import RetrievalTools, run_agent

doc = NormalizedDocument.from_dict({
    "schema_version": "normalized-document/1", "doc_id": "demo-anchor",
    "pages": [{"page_no": 1,
               "text": "CT surveillance at 12 months for small nodules.",
               "blocks": []}],
    "outline": [{"level": 1, "title": "Surveillance", "page": 1}],
    "link_annotations": [],
})
tree = build_tree(doc)

graph = KnowledgeGraph()
grow_graph(graph, PageContext(doc_id="demo-anchor", page_no=1,
                              text=doc.pages[0].text, section_id="n0001"),
           stub_gateway([{"role": "extraction", "response_json": {
               "entities": [{"label": "small nodule", "kind": "condition"},
                            {"label": "CT surveillance", "kind": "intervention"}],
               "relations": [{"subject": "small nodule",
                              "object": "CT surveillance",
                              "rel_type": "follow_up", "qualifiers": []}],
               "knowledge_points": []}}]))

with tempfile.TemporaryDirectory() as td:
    workdir = Path(td)
    (workdir / "cites.txt").write_text(
        "[edges]\ndemo-anchor -> TRIAL\n[metadata]\n"
        'demo-anchor\t{"title": "Anchor", "pub_type": "guideline"}\n'
        'TRIAL\t{"title": "Trial", "pub_type": "randomized trial"}\n'
        "[content]\ndemo-anchor\tAnchor text.\n"
        "TRIAL\tTrial of CT surveillance intervals for small nodules.\n")
    provider = FixtureCitationProvider(workdir / "cites.txt")
    manifest = assemble_neighborhood("demo-anchor", 1, provider)
    corpus = freeze(manifest, ContentStore(workdir / "store"),
                    fetch=lambda r: provider.content_of(r.doc_id))

    item = Item(item_id="demo-1", g_level="G1", p_level="P0",
                stem="What follow-up is advised for a small nodule?",
                nucleus=ItemNucleus(
                    entities=["small nodule", "CT surveillance"],
                    qualifiers=[{"text": "asymptomatic outpatient",
                                 "safety_critical": False}]))

    gateway = stub_gateway([
        {"role": "rubric_agent", "contains": '"attempt": 0',
         "response_json": {"queries": [{
             "population": [], "intervention": "CT surveillance",
             "comparators": [], "outcomes": []}]}},
        {"role": "rubric_agent", "contains": '"snippets"',
         "response_json": {
             "conclusions": [{"text": "Surveillance at 12 months",
                              "certainty": "high", "conflict": False,
                              "limitations": ""}],
             "positives": [
                 {"tier": "A1", "text": "Recommend CT surveillance",
                  "snippets": [0]},
                 {"tier": "A2", "text": "State the 12 month interval",
                  "snippets": [0]}],
             "negatives": [
                 {"tier": "S4", "text": "Immediate thoracotomy",
                  "snippets": [0]}]}},
    ])

    tools = RetrievalTools(graph=graph, tree=tree, doc=doc, corpus=corpus)
    rubric, trace = run_agent(item, tools, gateway, budget=20)

print(f"Termination: {trace.termination_reason}; "
      f"tool calls used: {tools.budget.used}/20")
print("\nAgent trace:")
for step in trace.steps:
    if step["kind"] == "tool_result":
        print(f"  tool_result: {len(step['results'])} snippets")
    else:
        detail = {k: v for k, v in step.items() if k != "kind"}
        print(f"  {step['kind']}: {detail}")

print("\nSynthesized rubric:")
for element in rubric.elements():
    print(f"  {element.element_id} [{element.tier}] {element.text!r}"
          f" cites {element.citations}")
