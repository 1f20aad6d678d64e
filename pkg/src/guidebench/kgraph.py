"""Relation-centric clinical knowledge graph.

Two entity kinds (conditions and interventions) linked by a closed set of
typed relations, each carrying provenance into the frozen corpus. The graph
grows page by page: model-proposed structures are validated, fused with
existing entities through exact, synonym-table and similarity matching, and
appended to a growth log whose replay reproduces the graph exactly.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .canonical import canonical_json
from .embeddings import EmbeddingProvider, HashingEmbeddingProvider
from .gateway import Gateway, GatewayError, ModelRequest, extract_json

GRAPH_SCHEMA = "knowledge-graph/1"

ENTITY_KINDS = ("condition", "intervention")
REL_TYPES = ("indication", "contraindication", "line_of_therapy", "follow_up",
             "diagnostic_criterion", "risk_factor", "monitoring")
KP_KINDS = ("definition", "indication", "caution", "procedure", "monitoring",
            "recommendation")

# Common model paraphrases of relation types; anything else is rejected.
REL_TYPE_ALIASES = {
    "treats": "indication", "treatment": "indication", "indicated_for": "indication",
    "contraindicated": "contraindication", "avoid": "contraindication",
    "first_line": "line_of_therapy", "therapy_line": "line_of_therapy",
    "followup": "follow_up", "follow-up": "follow_up", "surveillance": "monitoring",
    "monitor": "monitoring", "diagnosis": "diagnostic_criterion",
    "diagnostic": "diagnostic_criterion", "risk": "risk_factor",
}

FUSION_SIMILARITY_THRESHOLD = 0.85


class GraphError(Exception):
    pass


_LABEL_NORM_RE = re.compile(r"[^a-z0-9 ]+")


def normalize_label(text: str) -> str:
    return " ".join(_LABEL_NORM_RE.sub(" ", text.lower()).split())


@dataclass
class Entity:
    entity_id: str
    kind: str
    canonical_label: str
    synonyms: list[str] = field(default_factory=list)
    knowledge_point_ids: list[str] = field(default_factory=list)


@dataclass
class Relation:
    relation_id: str
    subject: str
    object: str
    rel_type: str
    qualifiers: list[dict] = field(default_factory=list)  # {name, value, unit}
    provenance: list[dict] = field(default_factory=list)  # {doc_id, section, page}


@dataclass
class KnowledgePoint:
    kp_id: str
    kind: str
    text: str
    provenance: list[dict] = field(default_factory=list)


@dataclass
class PageContext:
    doc_id: str
    page_no: int
    text: str
    section_id: str
    section_title: str = ""


@dataclass
class KnowledgeGraph:
    entities: dict[str, Entity] = field(default_factory=dict)
    relations: dict[str, Relation] = field(default_factory=dict)
    knowledge_points: dict[str, KnowledgePoint] = field(default_factory=dict)
    growth_log: list[dict] = field(default_factory=list)
    pending_pages: list[int] = field(default_factory=list)
    synonym_table: dict[str, str] = field(default_factory=dict)
    similarity_threshold: float = FUSION_SIMILARITY_THRESHOLD
    embedder: EmbeddingProvider = field(default_factory=HashingEmbeddingProvider)

    def _next_id(self, prefix: str, table: dict) -> str:
        return f"{prefix}{len(table) + 1:04d}"

    def entity_by_label(self, label: str) -> Entity | None:
        norm = normalize_label(label)
        for entity in self.entities.values():
            if normalize_label(entity.canonical_label) == norm:
                return entity
            if any(normalize_label(s) == norm for s in entity.synonyms):
                return entity
        return None

    def to_state_dict(self) -> dict:
        return {
            "entities": [asdict(self.entities[k]) for k in sorted(self.entities)],
            "relations": [asdict(self.relations[k]) for k in sorted(self.relations)],
            "knowledge_points": [asdict(self.knowledge_points[k])
                                 for k in sorted(self.knowledge_points)],
            "growth_log": self.growth_log,
        }


# -- fusion ---------------------------------------------------------------

def fuse_entity(graph: KnowledgeGraph, label: str, kind: str,
                context: str = "") -> str:
    """Reconcile a mention with the graph, creating an entity only as a last resort.

    Match order: normalized-label equality (canonical or synonym), synonym-table
    expansion, then embedding similarity at the fixed threshold. Matching never
    crosses entity kinds. The source label is retained as a synonym.
    """
    if kind not in ENTITY_KINDS:
        raise GraphError(f"unknown entity kind {kind!r}")
    match = match_entity(graph, label, kind, context)
    if match is not None:
        entity = graph.entities[match]
        if label != entity.canonical_label and label not in entity.synonyms:
            entity.synonyms.append(label)
        return match
    entity_id = graph._next_id("e", graph.entities)
    graph.entities[entity_id] = Entity(entity_id=entity_id, kind=kind,
                                       canonical_label=label)
    return entity_id


def match_entity(graph: KnowledgeGraph, label: str, kind: str,
                 context: str = "") -> str | None:
    """Read-only variant of fusion matching; never mutates the graph."""
    if kind not in ENTITY_KINDS:
        raise GraphError(f"unknown entity kind {kind!r}")
    norm = normalize_label(label)
    same_kind = [graph.entities[eid] for eid in sorted(graph.entities)
                 if graph.entities[eid].kind == kind]

    def norms(entity: Entity) -> set[str]:
        return {normalize_label(entity.canonical_label)} | {
            normalize_label(s) for s in entity.synonyms}

    for entity in same_kind:
        if norm in norms(entity):
            return entity.entity_id

    expanded = graph.synonym_table.get(norm)
    for entity in same_kind:
        entity_norms = norms(entity)
        if expanded and expanded in entity_norms:
            return entity.entity_id
        if any(graph.synonym_table.get(n) == norm for n in entity_norms):
            return entity.entity_id
        if expanded and any(graph.synonym_table.get(n) == expanded for n in entity_norms):
            return entity.entity_id

    best: tuple[float, str] | None = None
    for entity in same_kind:
        sim = max((graph.embedder.similarity(label, cand)
                   for cand in [entity.canonical_label, *entity.synonyms]),
                  default=0.0)
        if sim >= graph.similarity_threshold:
            if best is None or sim > best[0]:
                best = (sim, entity.entity_id)
    return best[1] if best else None


# -- growth ---------------------------------------------------------------

_EXTRACTION_SYSTEM = (
    "Extract clinical structure from the page. Reply with JSON of the form "
    '{"entities": [{"label", "kind"}], '
    '"relations": [{"subject", "object", "rel_type", "qualifiers": '
    '[{"name", "value", "unit"}]}], '
    '"knowledge_points": [{"entity", "kind", "text"}]}. '
    "kind is condition or intervention; rel_type is one of "
    + ", ".join(REL_TYPES) + "; knowledge point kind is one of "
    + ", ".join(KP_KINDS) + "."
)


def grow_graph(graph: KnowledgeGraph, page: PageContext,
               gateway: Gateway) -> KnowledgeGraph:
    """Extend the graph with validated structures proposed for one page."""
    if not page.text.strip():
        graph.growth_log.append({"doc_id": page.doc_id, "page": page.page_no,
                                 "section": page.section_id,
                                 "applied": _empty_payload(), "dropped": [],
                                 "noop": True})
        return graph

    request = ModelRequest(role_tag="extraction", parts={
        "system": _EXTRACTION_SYSTEM,
        "user": json.dumps({"doc_id": page.doc_id, "page": page.page_no,
                            "section": page.section_title, "text": page.text},
                           sort_keys=True),
    })
    try:
        payload = extract_json(gateway.complete(request).text)
    except GatewayError:
        graph.pending_pages.append(page.page_no)
        return graph
    if payload is None:
        graph.pending_pages.append(page.page_no)
        return graph

    applied, dropped = _validate_payload(graph, payload)
    provenance = {"doc_id": page.doc_id, "section": page.section_id,
                  "page": page.page_no}
    _apply_payload(graph, applied, provenance)
    graph.growth_log.append({"doc_id": page.doc_id, "page": page.page_no,
                             "section": page.section_id,
                             "applied": applied, "dropped": dropped,
                             "noop": False})
    return graph


def _empty_payload() -> dict:
    return {"entities": [], "relations": [], "knowledge_points": []}


def _is_numeric(value) -> bool:
    if isinstance(value, bool):
        return False
    if isinstance(value, (int, float)):
        return True
    try:
        float(str(value))
        return True
    except (TypeError, ValueError):
        return False


def _validate_payload(graph: KnowledgeGraph, payload: dict) -> tuple[dict, list]:
    applied = _empty_payload()
    dropped: list[dict] = []
    kinds_by_label: dict[str, str] = {}

    for ent in payload.get("entities", []):
        label, kind = str(ent.get("label", "")).strip(), ent.get("kind")
        if not label or kind not in ENTITY_KINDS:
            dropped.append({"reason": "invalid_entity", "payload": ent})
            continue
        applied["entities"].append({"label": label, "kind": kind})
        kinds_by_label[normalize_label(label)] = kind

    def kind_of(label: str) -> str | None:
        norm = normalize_label(label)
        if norm in kinds_by_label:
            return kinds_by_label[norm]
        for kind in ENTITY_KINDS:
            if match_entity(graph, label, kind) is not None:
                return kind
        return None

    for rel in payload.get("relations", []):
        raw_type = str(rel.get("rel_type", "")).strip().lower()
        rel_type = raw_type if raw_type in REL_TYPES else REL_TYPE_ALIASES.get(raw_type)
        if rel_type is None:
            dropped.append({"reason": "unknown_rel_type", "payload": rel})
            continue
        subject, obj = str(rel.get("subject", "")), str(rel.get("object", ""))
        subj_kind, obj_kind = kind_of(subject), kind_of(obj)
        if not subject or not obj or subj_kind is None or obj_kind is None:
            dropped.append({"reason": "unresolvable_endpoint", "payload": rel})
            continue
        qualifiers = []
        bad = False
        for q in rel.get("qualifiers", []):
            name, value, unit = q.get("name"), q.get("value"), q.get("unit")
            if _is_numeric(value) and not unit:
                bad = True
                break
            qualifiers.append({"name": name, "value": value, "unit": unit})
        if bad:
            dropped.append({"reason": "numeric_qualifier_without_unit", "payload": rel})
            continue
        applied["relations"].append({
            "subject": subject, "subject_kind": subj_kind,
            "object": obj, "object_kind": obj_kind,
            "rel_type": rel_type, "qualifiers": qualifiers,
        })

    for kp in payload.get("knowledge_points", []):
        label, kind, text = kp.get("entity"), kp.get("kind"), str(kp.get("text", ""))
        ent_kind = kind_of(str(label or ""))
        if kind not in KP_KINDS or not text.strip() or ent_kind is None:
            dropped.append({"reason": "invalid_knowledge_point", "payload": kp})
            continue
        applied["knowledge_points"].append({"entity": label, "entity_kind": ent_kind,
                                            "kind": kind, "text": text})
    return applied, dropped


def _apply_payload(graph: KnowledgeGraph, applied: dict, provenance: dict) -> None:
    for ent in applied["entities"]:
        fuse_entity(graph, ent["label"], ent["kind"])

    for rel in applied["relations"]:
        subj = fuse_entity(graph, rel["subject"], rel["subject_kind"])
        obj = fuse_entity(graph, rel["object"], rel["object_kind"])
        qual_key = canonical_json(sorted(
            (str(q["name"]), str(q["value"]), str(q["unit"])) for q in rel["qualifiers"]))
        existing = None
        for relation in graph.relations.values():
            if (relation.subject == subj and relation.object == obj
                    and relation.rel_type == rel["rel_type"]
                    and canonical_json(sorted((str(q["name"]), str(q["value"]),
                                               str(q["unit"]))
                                              for q in relation.qualifiers)) == qual_key):
                existing = relation
                break
        if existing is not None:
            if provenance not in existing.provenance:
                existing.provenance.append(dict(provenance))
            continue
        relation_id = graph._next_id("r", graph.relations)
        graph.relations[relation_id] = Relation(
            relation_id=relation_id, subject=subj, object=obj,
            rel_type=rel["rel_type"], qualifiers=[dict(q) for q in rel["qualifiers"]],
            provenance=[dict(provenance)])

    for kp in applied["knowledge_points"]:
        entity_id = fuse_entity(graph, kp["entity"], kp["entity_kind"])
        entity = graph.entities[entity_id]
        norm_text = " ".join(kp["text"].split()).lower()
        existing_kp = None
        for kp_id in entity.knowledge_point_ids:
            candidate = graph.knowledge_points[kp_id]
            if candidate.kind == kp["kind"] and " ".join(
                    candidate.text.split()).lower() == norm_text:
                existing_kp = candidate
                break
        if existing_kp is not None:
            if provenance not in existing_kp.provenance:
                existing_kp.provenance.append(dict(provenance))
            continue
        kp_id = graph._next_id("k", graph.knowledge_points)
        graph.knowledge_points[kp_id] = KnowledgePoint(
            kp_id=kp_id, kind=kp["kind"], text=kp["text"],
            provenance=[dict(provenance)])
        entity.knowledge_point_ids.append(kp_id)


def replay_growth(growth_log: list[dict], *, synonym_table: dict[str, str] | None = None,
                  embedder: EmbeddingProvider | None = None,
                  similarity_threshold: float = FUSION_SIMILARITY_THRESHOLD) -> KnowledgeGraph:
    """Rebuild a graph from its growth log; the result must deep-equal the original."""
    graph = KnowledgeGraph(synonym_table=dict(synonym_table or {}),
                           similarity_threshold=similarity_threshold,
                           embedder=embedder or HashingEmbeddingProvider())
    for entry in growth_log:
        if not entry.get("noop"):
            provenance = {"doc_id": entry["doc_id"], "section": entry["section"],
                          "page": entry["page"]}
            _apply_payload(graph, entry["applied"], provenance)
        graph.growth_log.append(entry)
    return graph


# -- querying -------------------------------------------------------------

def _resolve_filter_entities(graph: KnowledgeGraph, ref: str) -> set[str]:
    if ref in graph.entities:
        return {ref}
    norm = normalize_label(ref)
    hits = set()
    for entity in graph.entities.values():
        if normalize_label(entity.canonical_label) == norm or any(
                normalize_label(s) == norm for s in entity.synonyms):
            hits.add(entity.entity_id)
    return hits


def _qualifier_matches(relation: Relation, want: dict) -> bool:
    from .units import normalize_value

    for q in relation.qualifiers:
        if want.get("name") is not None and q.get("name") != want["name"]:
            continue
        if "value" in want and want["value"] is not None:
            if _is_numeric(want["value"]) and _is_numeric(q.get("value")):
                a = normalize_value(float(want["value"]), str(want.get("unit") or ""))
                b = normalize_value(float(q["value"]), str(q.get("unit") or ""))
                if a != b:
                    continue
            elif str(q.get("value")) != str(want["value"]):
                continue
        return True
    return False


def relation_text(graph: KnowledgeGraph, relation: Relation) -> str:
    subj = graph.entities[relation.subject]
    obj = graph.entities[relation.object]
    quals = " ".join(f"{q.get('name')} {q.get('value')} {q.get('unit') or ''}".strip()
                     for q in relation.qualifiers)
    kp_texts = " ".join(graph.knowledge_points[kid].text
                        for eid in (relation.subject, relation.object)
                        for kid in graph.entities[eid].knowledge_point_ids)
    return f"{subj.canonical_label} {relation.rel_type} {obj.canonical_label} {quals} {kp_texts}".strip()


def query(graph: KnowledgeGraph, pattern: dict | None = None,
          probe: str | None = None) -> list[tuple[Relation, list[KnowledgePoint]]]:
    """Filter relations by exact conjunctive pattern; optionally rank semantically.

    Pattern keys: entity (matches either endpoint), subject, object, rel_type,
    qualifier ({name, value, unit}). Results are ordered by (rel_type,
    relation_id); with a probe they are ordered by descending similarity to
    the probe text first.
    """
    pattern = pattern or {}
    entity_ids = (_resolve_filter_entities(graph, pattern["entity"])
                  if "entity" in pattern else None)
    subject_ids = (_resolve_filter_entities(graph, pattern["subject"])
                   if "subject" in pattern else None)
    object_ids = (_resolve_filter_entities(graph, pattern["object"])
                  if "object" in pattern else None)

    results = []
    for relation_id in sorted(graph.relations):
        relation = graph.relations[relation_id]
        if entity_ids is not None and relation.subject not in entity_ids \
                and relation.object not in entity_ids:
            continue
        if subject_ids is not None and relation.subject not in subject_ids:
            continue
        if object_ids is not None and relation.object not in object_ids:
            continue
        if "rel_type" in pattern and relation.rel_type != pattern["rel_type"]:
            continue
        if "qualifier" in pattern and not _qualifier_matches(relation, pattern["qualifier"]):
            continue
        kp_ids = sorted(set(graph.entities[relation.subject].knowledge_point_ids
                            + graph.entities[relation.object].knowledge_point_ids))
        results.append((relation, [graph.knowledge_points[k] for k in kp_ids]))

    if probe is not None:
        results.sort(key=lambda pair: (-graph.embedder.similarity(
            probe, relation_text(graph, pair[0])), pair[0].rel_type,
            pair[0].relation_id))
    else:
        results.sort(key=lambda pair: (pair[0].rel_type, pair[0].relation_id))
    return results


# -- persistence ----------------------------------------------------------

def save_graph(graph: KnowledgeGraph, directory: str | Path) -> None:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    _write_records(root / "entities.jsonl", "entities",
                   [asdict(graph.entities[k]) for k in sorted(graph.entities)])
    _write_records(root / "relations.jsonl", "relations",
                   [asdict(graph.relations[k]) for k in sorted(graph.relations)])
    _write_records(root / "knowledge_points.jsonl", "knowledge_points",
                   [asdict(graph.knowledge_points[k])
                    for k in sorted(graph.knowledge_points)])
    _write_records(root / "growth_log.jsonl", "growth_log", graph.growth_log)
    meta = {"schema": GRAPH_SCHEMA, "synonym_table": graph.synonym_table,
            "similarity_threshold": graph.similarity_threshold,
            "pending_pages": graph.pending_pages}
    (root / "meta.json").write_text(canonical_json(meta) + "\n")


def _write_records(path: Path, kind: str, records: list[dict]) -> None:
    header = canonical_json({"schema": GRAPH_SCHEMA, "kind": kind,
                             "count": len(records)})
    body = "".join(canonical_json(r) + "\n" for r in records)
    path.write_text(header + "\n" + body)


def _read_records(path: Path, kind: str) -> list[dict]:
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != GRAPH_SCHEMA or header.get("kind") != kind:
        raise GraphError(f"unexpected record file header in {path}")
    return [json.loads(line) for line in lines[1:] if line]


def load_graph(directory: str | Path,
               embedder: EmbeddingProvider | None = None) -> KnowledgeGraph:
    root = Path(directory)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("schema") != GRAPH_SCHEMA:
        raise GraphError(f"unsupported graph schema {meta.get('schema')!r}")
    graph = KnowledgeGraph(synonym_table=meta.get("synonym_table", {}),
                           similarity_threshold=meta.get("similarity_threshold",
                                                         FUSION_SIMILARITY_THRESHOLD),
                           embedder=embedder or HashingEmbeddingProvider())
    graph.pending_pages = list(meta.get("pending_pages", []))
    for record in _read_records(root / "entities.jsonl", "entities"):
        graph.entities[record["entity_id"]] = Entity(**record)
    for record in _read_records(root / "relations.jsonl", "relations"):
        graph.relations[record["relation_id"]] = Relation(**record)
    for record in _read_records(root / "knowledge_points.jsonl", "knowledge_points"):
        graph.knowledge_points[record["kp_id"]] = KnowledgePoint(**record)
    graph.growth_log = _read_records(root / "growth_log.jsonl", "growth_log")
    return graph
