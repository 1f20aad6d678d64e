"""Generate clean items from graph relations and derive perturbed variants.

A follow-up relation becomes a factual question whose clinical nucleus
(entities, unit-normalized values, qualifiers) is hashed; paraphrase and
redundancy variants must keep that hash, and a candidate that tampers with
a threshold is rejected by the validator.
"""

from guidebench.doctree import NormalizedDocument, build_tree
from guidebench.gateway import stub_gateway
from guidebench.kgraph import KnowledgeGraph, PageContext, grow_graph
from guidebench.items import generate_g1
from guidebench.perturb import perturb, validate_variant, PerturbationSpec, compute_edit_log

doc = NormalizedDocument.from_dict({
    "schema_version": "normalized-document/1", "doc_id": "demo",
    "pages": [{"page_no": 1, "text": "Follow-up guidance text.", "blocks": []}],
    "outline": [{"level": 1, "title": "Follow-up", "page": 1}],
    "link_annotations": [],
})
tree = build_tree(doc)

graph = KnowledgeGraph()
grow_graph(graph, PageContext(doc_id="demo", page_no=1,
                              text="Follow-up guidance text.",
                              section_id="n0001"),
           stub_gateway([{"role": "extraction", "response_json": {
               "entities": [
                   {"label": "part-solid lung nodule", "kind": "condition"},
                   {"label": "CT surveillance", "kind": "intervention"}],
               "relations": [{"subject": "part-solid lung nodule",
                              "object": "CT surveillance",
                              "rel_type": "follow_up",
                              "qualifiers": [
                                  {"name": "size", "value": 8, "unit": "mm"},
                                  {"name": "risk", "value": "low-risk"}]}],
               "knowledge_points": []}}]))

[item] = generate_g1(graph, tree)
print(f"Generated item {item.item_id} ({item.g_level}/{item.p_level}):")
print(f"  {item.stem}")
print(f"  nucleus hash: {item.nucleus.nucleus_hash[:28]}...")

paraphrase = item.stem.replace("recommended", "advised")
got = perturb(item, "P1", stub_gateway([{"role": "perturber",
                                         "response": paraphrase}]))
variant, spec = got
print(f"\nP1 variant keeps the nucleus: "
      f"{variant.nucleus.nucleus_hash == item.nucleus.nucleus_hash}")
print(f"  {variant.stem}")

tampered = item.stem.replace("8 mm", "9 mm")
bad_spec = PerturbationSpec(level="P1",
                            edit_log=compute_edit_log(item.stem, tampered))
from dataclasses import replace
bad_variant = replace(variant, stem=tampered)
result = validate_variant(item, bad_variant, bad_spec)
print(f"\nTampered threshold is rejected with findings: "
      f"{[f['kind'] for f in result.findings]}")
