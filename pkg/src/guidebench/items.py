"""Clean (P0) evaluation item generation across the four grounding levels.

G1/G2 items are realized from graph relations through a fixed template
library; G3/G4 items come from synthesized vignettes that are aligned to the
graph and classified by evidentiary support. Every item carries an immutable
clinical nucleus (entities, unit-normalized values, applicability
qualifiers) whose hash is the invariant preserved by later perturbation.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

from .canonical import digest
from .doctree import DocTree
from .gateway import Gateway, GatewayError, ModelRequest, extract_json
from .kgraph import KnowledgeGraph, Relation, match_entity, query
from .units import value_key

ITEMS_SCHEMA = "items/1"

G_LEVELS = ("G1", "G2", "G3", "G4")
P_LEVELS = ("P0", "P1", "P2", "P3")
SUPPORT_CLASSES = ("supported", "partially_supported", "unsupported")

G1_REL_TYPES = ("indication", "contraindication", "line_of_therapy",
                "follow_up", "monitoring")
G2_REL_TYPES = ("risk_factor", "diagnostic_criterion")

# Qualifier names whose presence is non-negotiable for retrieval relaxation.
SAFETY_CRITICAL_QUALIFIER_NAMES = frozenset(
    {"pregnancy", "allergy", "contraindication", "renal_function",
     "hepatic_function", "organ_function"})


class ItemGenerationError(Exception):
    pass


def load_templates() -> dict:
    data = resources.files("guidebench.data").joinpath("templates.json").read_text()
    return json.loads(data)


@dataclass
class ItemNucleus:
    entities: list[str] = field(default_factory=list)
    values: list[dict] = field(default_factory=list)      # {quantity, unit}
    qualifiers: list[dict] = field(default_factory=list)  # {text, safety_critical}

    def canonical(self) -> dict:
        return {
            "entities": sorted({e.strip().lower() for e in self.entities}),
            "values": sorted({value_key(v["quantity"], v["unit"]) for v in self.values}),
            "qualifiers": sorted({(q["text"].strip().lower(),
                                   bool(q.get("safety_critical")))
                                  for q in self.qualifiers}),
        }

    @property
    def nucleus_hash(self) -> str:
        canon = self.canonical()
        canon["qualifiers"] = [list(q) for q in canon["qualifiers"]]
        return digest(canon)

    def value_keys(self) -> set[str]:
        return {value_key(v["quantity"], v["unit"]) for v in self.values}


@dataclass
class Item:
    item_id: str
    g_level: str
    p_level: str
    stem: str
    nucleus: ItemNucleus
    provenance: list[dict] = field(default_factory=list)
    parent_item_id: str | None = None
    rubric_id: str | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.g_level not in G_LEVELS:
            raise ItemGenerationError(f"bad g_level {self.g_level!r}")
        if self.p_level not in P_LEVELS:
            raise ItemGenerationError(f"bad p_level {self.p_level!r}")
        if self.p_level == "P0" and self.parent_item_id is not None:
            raise ItemGenerationError("P0 items cannot have a parent")
        if self.p_level != "P0" and self.parent_item_id is None:
            raise ItemGenerationError("perturbed items must reference a P0 parent")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["nucleus_hash"] = self.nucleus.nucleus_hash
        return d

    @staticmethod
    def from_dict(d: dict) -> "Item":
        d = dict(d)
        d.pop("nucleus_hash", None)
        d["nucleus"] = ItemNucleus(**d["nucleus"])
        return Item(**d)


@dataclass
class Vignette:
    vignette_id: str
    narrative: str
    extracted: dict = field(default_factory=dict)
    matched_subgraph: dict = field(default_factory=lambda: {"entities": [], "relations": []})
    support_class: str | None = None
    support_meta: dict = field(default_factory=dict)


@dataclass
class ExclusionLedger:
    entries: list[dict] = field(default_factory=list)

    def record(self, stage: str, ref: str, reason: str) -> None:
        self.entries.append({"stage": stage, "ref": ref, "reason": reason})

    def save(self, path: str | Path) -> None:
        from .canonical import canonical_json

        Path(path).write_text("".join(canonical_json(e) + "\n" for e in self.entries))


# -- phrase rendering ------------------------------------------------------

def _is_number(value) -> bool:
    if isinstance(value, bool):
        return False
    if isinstance(value, (int, float)):
        return True
    try:
        float(str(value))
        return True
    except (TypeError, ValueError):
        return False


def _fmt_number(value) -> str:
    f = float(value)
    return str(int(f)) if f == int(f) else str(f)


def indefinite_article(phrase: str) -> str:
    head = phrase.strip().lower()
    return "an" if head[:1] in ("a", "e", "i", "o", "u", "8") else "a"


def render_entity_phrase(label: str, qualifiers: list[dict]) -> str:
    """Compose an entity descriptor from relation qualifiers.

    Numeric qualifiers prefix the label ("8 mm part-solid lung nodule");
    risk-style qualifiers become a patient clause; remaining qualifiers trail
    as "with ..." clauses.
    """
    prefixes, patient, trailing = [], [], []
    for q in qualifiers:
        value, unit = q.get("value"), q.get("unit")
        if _is_number(value) and unit:
            prefixes.append(f"{_fmt_number(value)} {unit}")
        elif q.get("name") == "risk" or str(value).endswith("-risk"):
            patient.append(str(value))
        else:
            trailing.append(str(value))
    core = " ".join(prefixes + [label]) if prefixes else label
    phrase = f"{indefinite_article(core)} {core}"
    for p in patient:
        phrase += f" in a {p} patient"
    for t in trailing:
        phrase += f" with {t}"
    return phrase


def nucleus_from_relation(relation: Relation, subject_label: str,
                          object_label: str) -> ItemNucleus:
    values, qualifiers = [], []
    for q in relation.qualifiers:
        value, unit = q.get("value"), q.get("unit")
        if _is_number(value) and unit:
            values.append({"quantity": float(value), "unit": unit})
        else:
            qualifiers.append({
                "text": str(value),
                "safety_critical": (q.get("name") in SAFETY_CRITICAL_QUALIFIER_NAMES
                                    or relation.rel_type == "contraindication"),
            })
    return ItemNucleus(entities=[subject_label, object_label], values=values,
                       qualifiers=qualifiers)


def _corroborating_span(relation: Relation, tree: DocTree) -> dict | None:
    for prov in relation.provenance:
        section = prov.get("section")
        if section in tree.nodes:
            return {"doc_id": prov.get("doc_id"), "node_id": section,
                    "page": prov.get("page")}
        page = prov.get("page")
        first, last = tree.root.page_span
        if isinstance(page, int) and first <= page <= last:
            return {"doc_id": prov.get("doc_id"),
                    "node_id": tree.covering_node(page).node_id, "page": page}
    return None


# -- G1 / G2 ---------------------------------------------------------------

def generate_g1(graph: KnowledgeGraph, tree: DocTree,
                ledger: ExclusionLedger | None = None) -> list[Item]:
    return _generate_relation_items(graph, tree, "G1", G1_REL_TYPES, ledger)


def generate_g2(graph: KnowledgeGraph, tree: DocTree,
                ledger: ExclusionLedger | None = None) -> list[Item]:
    return _generate_relation_items(graph, tree, "G2", G2_REL_TYPES, ledger)


def _generate_relation_items(graph: KnowledgeGraph, tree: DocTree, g_level: str,
                             rel_types: tuple[str, ...],
                             ledger: ExclusionLedger | None) -> list[Item]:
    templates = load_templates()[g_level]
    items = []
    n = 0
    for relation_id in sorted(graph.relations):
        relation = graph.relations[relation_id]
        if relation.rel_type not in rel_types:
            continue
        span = _corroborating_span(relation, tree)
        if span is None:
            if ledger:
                ledger.record(f"generate_{g_level.lower()}", relation_id,
                              "no corroborating tree span")
            continue
        subject = graph.entities[relation.subject].canonical_label
        obj = graph.entities[relation.object].canonical_label
        stem = templates[relation.rel_type].format(
            subject_phrase=render_entity_phrase(subject, relation.qualifiers),
            object_phrase=render_entity_phrase(obj, []),
            subject=subject, object=obj)
        n += 1
        items.append(Item(
            item_id=f"{g_level.lower()}-{n:04d}", g_level=g_level, p_level="P0",
            stem=stem, nucleus=nucleus_from_relation(relation, subject, obj),
            provenance=[{"relation_id": relation_id}, span],
            metadata={"rel_type": relation.rel_type}))
    return items


# -- vignettes ---------------------------------------------------------------

_VALUE_RE = re.compile(
    r"(\d+(?:\.\d+)?)\s*(months|month|weeks|week|years|year|days|day|mcg|ug|"
    r"mm|cm|mg|m|g|%)(?![A-Za-z])")


def harvest_values(text: str) -> list[dict]:
    """Deterministic numeric (value, unit) sweep of a narrative."""
    found = []
    seen = set()
    for quantity, unit in _VALUE_RE.findall(text):
        key = value_key(float(quantity), unit)
        if key not in seen:
            seen.add(key)
            found.append({"quantity": float(quantity), "unit": unit})
    return found


def synthesize_vignettes(domain_seed: str, count: int, gateway: Gateway,
                         ledger: ExclusionLedger | None = None) -> list[Vignette]:
    """Generate narratives then extract structure from each.

    The extraction pass merges the model's structured output with a
    deterministic sweep for numeric values, so quantitative thresholds in
    the narrative are always captured. Vignettes extracting zero entities
    are discarded.
    """
    vignettes = []
    for i in range(count):
        vignette_id = f"v{i + 1:03d}"
        gen = gateway.complete(ModelRequest(role_tag="vignette_gen", parts={
            "system": "Write one concise, de-identified clinical vignette ending "
                      "in a management decision point.",
            "user": json.dumps({"domain": domain_seed, "index": i}, sort_keys=True),
        }))
        narrative = gen.text.strip()
        extracted = extract_vignette_structure(narrative, gateway)
        if not extracted.get("entities"):
            if ledger:
                ledger.record("synthesize_vignettes", vignette_id,
                              "extraction yielded zero entities")
            continue
        vignettes.append(Vignette(vignette_id=vignette_id, narrative=narrative,
                                  extracted=extracted))
    return vignettes


def extract_vignette_structure(narrative: str, gateway: Gateway) -> dict:
    response = gateway.complete(ModelRequest(role_tag="extraction", parts={
        "system": "Extract structured clinical content. Reply with JSON "
                  '{"entities": [{"label", "kind"}], "values": '
                  '[{"quantity", "unit"}], "qualifiers": ["..."], "decision": "..."}.',
        "user": narrative,
    }))
    payload = extract_json(response.text) or {}
    entities = [e for e in payload.get("entities", [])
                if e.get("label") and e.get("kind") in ("condition", "intervention")]
    values = [v for v in payload.get("values", [])
              if _is_number(v.get("quantity")) and v.get("unit")]
    keys = {value_key(float(v["quantity"]), v["unit"]) for v in values}
    for harvested in harvest_values(narrative):
        if value_key(harvested["quantity"], harvested["unit"]) not in keys:
            values.append(harvested)
    return {"entities": entities, "values": values,
            "qualifiers": [str(q) for q in payload.get("qualifiers", [])],
            "decision": str(payload.get("decision", ""))}


def align_subgraph(vignette: Vignette, graph: KnowledgeGraph) -> Vignette:
    """Match extracted entities read-only and induce their relation set."""
    matched = []
    for ent in vignette.extracted.get("entities", []):
        hit = match_entity(graph, ent["label"], ent["kind"])
        if hit is not None and hit not in matched:
            matched.append(hit)
    matched_set = set(matched)
    relations = [rid for rid in sorted(graph.relations)
                 if graph.relations[rid].subject in matched_set
                 and graph.relations[rid].object in matched_set]
    vignette.matched_subgraph = {"entities": sorted(matched), "relations": relations}
    return vignette


def classify_support(vignette: Vignette, gateway: Gateway) -> str:
    """Judge whether the vignette's decision is derivable from its subgraph.

    Ambiguity downgrades toward partially_supported; gateway refusal or an
    empty subgraph is conservatively unsupported.
    """
    if not vignette.matched_subgraph.get("entities"):
        vignette.support_class = "unsupported"
        vignette.support_meta = {"reason": "empty subgraph"}
        return vignette.support_class
    try:
        response = gateway.complete(ModelRequest(role_tag="support_class", parts={
            "system": "Decide whether the vignette's clinical decision is fully, "
                      "partially, or not derivable from the matched evidence. "
                      'Reply with JSON {"support": "supported" | '
                      '"partially_supported" | "unsupported", "rationale": "...", '
                      '"gap_kind": optional}.',
            "user": json.dumps({"vignette_id": vignette.vignette_id,
                                "narrative": vignette.narrative,
                                "subgraph": vignette.matched_subgraph},
                               sort_keys=True),
        }))
    except GatewayError:
        vignette.support_class = "unsupported"
        vignette.support_meta = {"reason": "gateway refusal"}
        return vignette.support_class

    payload = extract_json(response.text) or {}
    label = payload.get("support")
    rationale = str(payload.get("rationale", response.text))
    if label not in SUPPORT_CLASSES:
        lowered = response.text.lower()
        if "unsupported" in lowered or "not supported" in lowered:
            label = "unsupported"
        elif "partial" in lowered or "ambiguous" in lowered or "uncertain" in lowered:
            label = "partially_supported"
        elif "fully substantiated" in lowered or "supported" in lowered:
            label = "supported"
        else:
            label = "unsupported"
    if label == "supported" and ("ambiguous" in rationale.lower()
                                 or payload.get("ambiguous")):
        label = "partially_supported"
    vignette.support_class = label
    vignette.support_meta = {"rationale": rationale,
                             "gap_kind": payload.get("gap_kind")}
    return label


# -- G3 / G4 ---------------------------------------------------------------

def _vignette_nucleus(vignette: Vignette, graph: KnowledgeGraph) -> ItemNucleus:
    entities = [graph.entities[eid].canonical_label
                for eid in vignette.matched_subgraph["entities"]]
    subgraph_value_keys = set()
    for rid in vignette.matched_subgraph["relations"]:
        for q in graph.relations[rid].qualifiers:
            if _is_number(q.get("value")) and q.get("unit"):
                subgraph_value_keys.add(value_key(float(q["value"]), q["unit"]))
    values = [v for v in vignette.extracted.get("values", [])
              if value_key(v["quantity"], v["unit"]) in subgraph_value_keys]
    qualifiers = [{"text": q, "safety_critical": any(
        name in q.lower() for name in SAFETY_CRITICAL_QUALIFIER_NAMES)}
        for q in vignette.extracted.get("qualifiers", [])]
    return ItemNucleus(entities=entities, values=values, qualifiers=qualifiers)


def generate_g3(vignette: Vignette, graph: KnowledgeGraph,
                seq: int = 1) -> Item:
    if vignette.support_class != "supported":
        raise ItemGenerationError(
            f"G3 requires a supported vignette, got {vignette.support_class!r}")
    stem = load_templates()["G3"]["default"].format(narrative=vignette.narrative)
    provenance = [{"relation_id": rid}
                  for rid in vignette.matched_subgraph["relations"]]
    for rid in vignette.matched_subgraph["relations"]:
        for prov in graph.relations[rid].provenance:
            entry = {"doc_id": prov.get("doc_id"), "node_id": prov.get("section"),
                     "page": prov.get("page")}
            if entry not in provenance:
                provenance.append(entry)
    return Item(item_id=f"g3-{seq:04d}", g_level="G3", p_level="P0", stem=stem,
                nucleus=_vignette_nucleus(vignette, graph), provenance=provenance,
                metadata={"vignette_id": vignette.vignette_id})


def _nearby_evidence_provenance(vignette: Vignette,
                                graph: KnowledgeGraph) -> list[dict]:
    """Corpus anchors for a gray-zone vignette with no induced relations:
    relations touching any matched entity, then knowledge points."""
    matched = set(vignette.matched_subgraph["entities"])
    entries: list[dict] = []
    for rid in sorted(graph.relations):
        relation = graph.relations[rid]
        if relation.subject in matched or relation.object in matched:
            for prov in relation.provenance:
                entry = {"doc_id": prov.get("doc_id"),
                         "node_id": prov.get("section"), "page": prov.get("page")}
                if entry not in entries:
                    entries.append(entry)
    for eid in sorted(matched):
        for kp_id in graph.entities[eid].knowledge_point_ids:
            for prov in graph.knowledge_points[kp_id].provenance:
                entry = {"doc_id": prov.get("doc_id"),
                         "node_id": prov.get("section"), "page": prov.get("page")}
                if entry not in entries:
                    entries.append(entry)
    return entries


def generate_g4(vignette: Vignette, graph: KnowledgeGraph,
                seq: int = 1) -> Item:
    if vignette.support_class != "partially_supported":
        raise ItemGenerationError(
            f"G4 requires a partially_supported vignette, got {vignette.support_class!r}")
    stem = load_templates()["G4"]["default"].format(narrative=vignette.narrative)
    provenance = [{"relation_id": rid}
                  for rid in vignette.matched_subgraph["relations"]]
    if not provenance:
        provenance = _nearby_evidence_provenance(vignette, graph)
    if not provenance:
        raise ItemGenerationError(
            f"vignette {vignette.vignette_id} has no evidence anchor")
    gap_kind = vignette.support_meta.get("gap_kind") or "missing_threshold"
    return Item(item_id=f"g4-{seq:04d}", g_level="G4", p_level="P0", stem=stem,
                nucleus=_vignette_nucleus(vignette, graph), provenance=provenance,
                metadata={"vignette_id": vignette.vignette_id, "gap_kind": gap_kind,
                          "expects_uncertainty": True})


# -- verification gate -------------------------------------------------------

_G_DEFINITIONS = (
    "G1: the answer is a directly stated fact, definition, recommendation, or "
    "interval. "
    "G2: the answer explains why or how, synthesizing a rationale or mechanism. "
    "G3: a concrete patient case asks for the next management action that "
    "established recommendations cover. "
    "G4: the case sits in an evidentiary gray zone (incomplete, conflicting, or "
    "population-mismatched evidence) and the answer must reason about the gap "
    "with explicit uncertainty."
)

_G_TOKEN_RE = re.compile(r"\bG([1-4])\b")


def classify_g_level(item: Item, gateway: Gateway) -> str | None:
    """Assign a grounding level; None means unparseable (caller must flag)."""
    response = gateway.complete(ModelRequest(role_tag="g_classifier", parts={
        "system": "Classify the question into exactly one level. " + _G_DEFINITIONS
                  + ' Reply with JSON {"level": "G1".."G4"}.',
        "user": json.dumps({"item_id": item.item_id, "stem": item.stem},
                           sort_keys=True),
    }))
    payload = extract_json(response.text) or {}
    level = payload.get("level")
    if level in G_LEVELS:
        return level
    match = _G_TOKEN_RE.search(response.text)
    return f"G{match.group(1)}" if match else None


def verify_items(items: list[Item], gateway: Gateway,
                 ledger: ExclusionLedger | None = None) -> tuple[list[Item], dict]:
    """Quality-control gate: drop items whose classified level disagrees.

    Disagreement excludes rather than relabels; unparseable classifier output
    also excludes. Returns retained items plus a pass-rate report.
    """
    retained, excluded = [], []
    for item in items:
        classified = classify_g_level(item, gateway)
        if classified == item.g_level:
            retained.append(item)
        else:
            reason = ("classifier unparseable" if classified is None
                      else f"classified {classified}, intended {item.g_level}")
            excluded.append({"item_id": item.item_id, "reason": reason})
            if ledger:
                ledger.record("verify_items", item.item_id, reason)
    total = len(items)
    report = {"total": total, "passed": len(retained), "excluded": excluded,
              "pass_rate": (len(retained) / total) if total else 0.0}
    return retained, report


# -- persistence --------------------------------------------------------------

def save_items(items: list[Item], path: str | Path) -> None:
    from .canonical import canonical_json

    header = canonical_json({"schema": ITEMS_SCHEMA, "count": len(items)})
    body = "".join(canonical_json(i.to_dict()) + "\n" for i in items)
    Path(path).write_text(header + "\n" + body)


def load_items(path: str | Path) -> list[Item]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != ITEMS_SCHEMA:
        raise ItemGenerationError(f"unsupported items schema {header.get('schema')!r}")
    return [Item.from_dict(json.loads(line)) for line in lines[1:] if line]
