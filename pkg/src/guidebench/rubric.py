"""Per-item rubric synthesis through an evidence-review agent.

The agent formulates structured clinical questions from the item nucleus,
retrieves evidence through three read-only tools (graph traversal, tree
reader, corpus search) in evidence-quality ladder order, relaxes query
constraints in a fixed order when evidence is sparse, synthesizes graded
conclusions, and extracts tiered positive (A1-A3) and negative (S2-S4)
elements with citations. Every run is bounded by a tool-call budget and
leaves a complete trace.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .canonical import canonical_json, sha256_hex
from .corpus import FrozenCorpus
from .doctree import DocTree, NormalizedDocument, node_text, normalize_title
from .gateway import Gateway, GatewayError, ModelRequest, extract_json
from .items import Item
from .kgraph import KnowledgeGraph, normalize_label, query as kg_query, relation_text
from .units import normalize_value

RUBRIC_SCHEMA = "rubrics/1"

TIER_ORDER = ("guideline", "systematic_review", "rct", "observational", "definitional")
POSITIVE_TIERS = ("A1", "A2", "A3")
NEGATIVE_TIERS = ("S2", "S3", "S4")
CERTAINTY_GRADES = ("high", "moderate", "low")

MAX_RELAXATION = 3
MAX_PICO_VARIANTS = 3
DEFAULT_TOOL_BUDGET = 20


class RubricAgentError(Exception):
    pass


class RelaxationLimitError(RubricAgentError):
    pass


class BudgetExceeded(RubricAgentError):
    pass


@dataclass
class PICOCriterion:
    text: str
    safety_critical: bool = False
    active: bool = True


@dataclass
class PICOQuery:
    query_id: str
    population: list[PICOCriterion]
    intervention: str
    comparators: list[str] = field(default_factory=list)
    outcomes: list[str] = field(default_factory=list)
    setting: str = ""
    time_horizon: str = ""
    relaxation_level: int = 0


@dataclass
class EvidenceSnippet:
    text: str
    tier: str
    provenance: dict
    pico_match: dict
    tool: str = ""


@dataclass
class RubricElement:
    element_id: str
    polarity: str
    tier: str
    text: str
    citations: list[dict] = field(default_factory=list)

    @property
    def weight_or_penalty_class(self) -> str:
        return self.tier


@dataclass
class Rubric:
    rubric_id: str
    item_id: str
    positives: list[RubricElement] = field(default_factory=list)
    negatives: list[RubricElement] = field(default_factory=list)
    certainty_notes: list[dict] = field(default_factory=list)
    agent_trace_ref: str | None = None
    warnings: list[str] = field(default_factory=list)

    def elements(self) -> list[RubricElement]:
        return list(self.positives) + list(self.negatives)

    def to_dict(self) -> dict:
        return {
            "rubric_id": self.rubric_id, "item_id": self.item_id,
            "positives": [asdict(e) for e in self.positives],
            "negatives": [asdict(e) for e in self.negatives],
            "certainty_notes": self.certainty_notes,
            "agent_trace_ref": self.agent_trace_ref,
            "warnings": self.warnings,
        }

    @staticmethod
    def from_dict(d: dict) -> "Rubric":
        return Rubric(rubric_id=d["rubric_id"], item_id=d["item_id"],
                      positives=[RubricElement(**e) for e in d["positives"]],
                      negatives=[RubricElement(**e) for e in d["negatives"]],
                      certainty_notes=list(d.get("certainty_notes", [])),
                      agent_trace_ref=d.get("agent_trace_ref"),
                      warnings=list(d.get("warnings", [])))


@dataclass
class AgentTrace:
    steps: list[dict] = field(default_factory=list)
    termination_reason: str | None = None

    def thought(self, text: str) -> None:
        self.steps.append({"kind": "thought", "text": text})

    def tool_call(self, tool: str, args: dict) -> None:
        self.steps.append({"kind": "tool_call", "tool": tool, "args": args})

    def tool_result(self, tool: str, snippets: list[EvidenceSnippet]) -> None:
        self.steps.append({"kind": "tool_result", "tool": tool, "results": [
            {"digest": s.text[:160], "hash": sha256_hex(s.text),
             "tier": s.tier, "provenance": s.provenance} for s in snippets]})

    def decision(self, text: str, **extra) -> None:
        self.steps.append({"kind": "decision", "text": text, **extra})


# -- tools ------------------------------------------------------------------

@dataclass
class ToolBudget:
    limit: int = DEFAULT_TOOL_BUDGET
    used: int = 0

    def spend(self, n: int = 1) -> None:
        if self.used + n > self.limit:
            raise BudgetExceeded(f"tool budget {self.limit} exceeded")
        self.used += n


@dataclass
class RetrievalTools:
    graph: KnowledgeGraph
    tree: DocTree
    doc: NormalizedDocument
    corpus: FrozenCorpus | None = None
    budget: ToolBudget = field(default_factory=ToolBudget)
    log: list[dict] = field(default_factory=list)

    def expand_terms(self, terms: list[str]) -> dict[str, list[str]]:
        """Controlled synonym expansion via the graph's entity synonym sets."""
        expanded: dict[str, list[str]] = {}
        for term in terms:
            variants = [term]
            norm = normalize_label(term)
            mapped = self.graph.synonym_table.get(norm)
            for entity in self.graph.entities.values():
                names = [entity.canonical_label, *entity.synonyms]
                if any(normalize_label(n) == norm for n in names) or (
                        mapped and any(normalize_label(n) == mapped for n in names)):
                    variants.extend(names)
            if mapped:
                variants.append(mapped)
            seen, uniq = set(), []
            for v in variants:
                key = normalize_label(v)
                if key and key not in seen:
                    seen.add(key)
                    uniq.append(v)
            expanded[term] = uniq
        self.log.append({"tool": "expand_terms", "expansion": expanded})
        return expanded

    def graph_query(self, terms: dict[str, list[str]]) -> list[EvidenceSnippet]:
        self.budget.spend()
        self.log.append({"tool": "graph_query", "terms": sorted(terms)})
        snippets = []
        for relation, kps in kg_query(self.graph):
            text = relation_text(self.graph, relation)
            for prov in relation.provenance:
                snippets.append(EvidenceSnippet(
                    text=text, tier="guideline", provenance=dict(prov),
                    pico_match={}, tool="graph_query"))
                break
            for kp in kps:
                snippets.append(EvidenceSnippet(
                    text=kp.text, tier="guideline",
                    provenance=dict(kp.provenance[0]) if kp.provenance else {},
                    pico_match={}, tool="graph_query"))
        return snippets

    def tree_locate(self, terms: dict[str, list[str]]) -> list[EvidenceSnippet]:
        self.budget.spend()
        self.log.append({"tool": "tree_locate", "terms": sorted(terms)})
        snippets = []
        variants = [v for vs in terms.values() for v in vs]
        for node in self.tree.iter_nodes():
            if node.node_id == self.tree.root_id:
                continue
            body = node_text(self.tree, self.doc, node.node_id)
            haystack = normalize_title(node.title) + " " + normalize_label(body)
            if any(normalize_label(v) in haystack for v in variants):
                snippets.append(EvidenceSnippet(
                    text=f"{node.title}. {body}".strip(), tier="guideline",
                    provenance={"doc_id": self.tree.doc_id,
                                "section": node.node_id,
                                "page": node.page_span[0]},
                    pico_match={}, tool="tree_locate"))
        return snippets

    def corpus_search(self, terms: dict[str, list[str]]) -> list[EvidenceSnippet]:
        self.budget.spend()
        self.log.append({"tool": "corpus_search", "terms": sorted(terms)})
        if self.corpus is None:
            return []
        snippets = []
        anchor = self.corpus.manifest.anchor_id
        for record in self.corpus.manifest.records:
            if record.doc_id == anchor or record.metadata_only:
                continue
            try:
                text = self.corpus.content_of(record.doc_id)
            except KeyError:
                continue
            tier = doc_tier(record.metadata)
            snippets.append(EvidenceSnippet(
                text=text, tier=tier,
                provenance={"doc_id": record.doc_id, "section": "abstract",
                            "page": None},
                pico_match={}, tool="corpus_search"))
        return snippets


def doc_tier(metadata: dict) -> str:
    pub = str(metadata.get("pub_type", "")).lower()
    if "guideline" in pub:
        return "guideline"
    if "systematic" in pub or "meta" in pub:
        return "systematic_review"
    if "rct" in pub or "randomized" in pub or "trial" in pub:
        return "rct"
    if "observational" in pub or "cohort" in pub or "case" in pub:
        return "observational"
    return "definitional"


# -- PICO ---------------------------------------------------------------------

def formulate_pico(item: Item, gateway: Gateway) -> list[PICOQuery]:
    """Derive one or more structured queries from the item nucleus.

    Population criteria always include the nucleus qualifiers with their
    safety-critical tags, whatever the model proposed. Unparseable output is
    retried once, then fails the item.
    """
    nucleus = item.nucleus
    payload = None
    for attempt in range(2):
        response = gateway.complete(ModelRequest(role_tag="rubric_agent", parts={
            "system": "Formulate one or more structured clinical questions "
                      "(population, intervention, comparators, outcomes, setting, "
                      "time_horizon) for the item. Reply with JSON "
                      '{"queries": [...]}.',
            "user": json.dumps({"item_id": item.item_id, "stem": item.stem,
                                "nucleus": nucleus.canonical(), "attempt": attempt},
                               sort_keys=True),
        }))
        payload = extract_json(response.text)
        if payload is not None and "queries" in payload:
            break
    if payload is None or "queries" not in payload:
        raise RubricAgentError(f"unparseable query formulation for {item.item_id}")

    nucleus_criteria = [PICOCriterion(text=q["text"],
                                      safety_critical=bool(q.get("safety_critical")))
                        for q in nucleus.qualifiers]
    queries = []
    for i, raw in enumerate(payload["queries"][:MAX_PICO_VARIANTS]):
        population = [PICOCriterion(text=str(c.get("text", c) if isinstance(c, dict) else c),
                                    safety_critical=bool(c.get("safety_critical"))
                                    if isinstance(c, dict) else False)
                      for c in raw.get("population", [])]
        have = {c.text.strip().lower() for c in population}
        for crit in nucleus_criteria:
            if crit.text.strip().lower() not in have:
                population.append(PICOCriterion(text=crit.text,
                                                safety_critical=crit.safety_critical))
            else:
                for c in population:
                    if c.text.strip().lower() == crit.text.strip().lower():
                        c.safety_critical = c.safety_critical or crit.safety_critical
        queries.append(PICOQuery(
            query_id=f"{item.item_id}-q{i + 1}",
            population=population,
            intervention=str(raw.get("intervention", "")),
            comparators=[str(c) for c in raw.get("comparators", [])],
            outcomes=[str(o) for o in raw.get("outcomes", [])],
            setting=str(raw.get("setting", "")),
            time_horizon=str(raw.get("time_horizon", "")),
        ))
    if not queries:
        raise RubricAgentError(f"no queries formulated for {item.item_id}")
    return queries


def relax(query: PICOQuery) -> PICOQuery:
    """One controlled relaxation step.

    Fixed order: (1) broaden population by deactivating non-critical criteria,
    (2) accept related comparators, (3) extend to surrogate outcomes. Safety-
    critical qualifiers are never removed or deactivated.
    """
    if query.relaxation_level >= MAX_RELAXATION:
        raise RelaxationLimitError(
            f"{query.query_id} already at relaxation level {query.relaxation_level}")
    new_level = query.relaxation_level + 1
    # Step 1 and beyond: non-critical population criteria are generalized
    # (deactivated but kept visible); safety-critical ones are untouchable.
    population = [PICOCriterion(text=c.text, safety_critical=c.safety_critical,
                                active=c.active if c.safety_critical else False)
                  for c in query.population]
    return PICOQuery(query_id=query.query_id, population=population,
                     intervention=query.intervention,
                     comparators=list(query.comparators),
                     outcomes=list(query.outcomes), setting=query.setting,
                     time_horizon=query.time_horizon, relaxation_level=new_level)


def _contains_any(text: str, variants: list[str]) -> bool:
    haystack = normalize_label(text)
    return any(normalize_label(v) in haystack for v in variants if v)


def _snippet_passes(snippet: EvidenceSnippet, query: PICOQuery,
                    expansion: dict[str, list[str]]) -> bool:
    """Relaxation-level filter; strictly weaker at every level (monotone)."""
    def variants(term: str) -> list[str]:
        return expansion.get(term, [term])

    for crit in query.population:
        if crit.safety_critical and not _contains_any(snippet.text, variants(crit.text)):
            return False
    level = query.relaxation_level
    if level == 0:
        for crit in query.population:
            if crit.active and not _contains_any(snippet.text, variants(crit.text)):
                return False
    has_intervention = (not query.intervention
                        or _contains_any(snippet.text, variants(query.intervention)))
    has_comparator = any(_contains_any(snippet.text, variants(c))
                         for c in query.comparators)
    if level <= 1:
        if not has_intervention:
            return False
    else:
        if not (has_intervention or has_comparator):
            return False
    if level <= 2 and query.outcomes:
        if not any(_contains_any(snippet.text, variants(o)) for o in query.outcomes):
            return False
    return True


def retrieve_tiered(query: PICOQuery, tools: RetrievalTools) -> list[EvidenceSnippet]:
    """Run the three tools, filter by the query, and order by evidence tier.

    The guideline-backed tools (graph, tree) run first, then corpus search
    whose snippets carry ladder tiers from document metadata. Duplicates by
    (provenance, text hash) collapse to their first, highest-tier occurrence.
    Gathering always uses the full term set (relaxation governs only the
    filter), so relaxed queries can never see fewer snippets.
    """
    terms = [query.intervention] + [c.text for c in query.population]
    terms += query.comparators + query.outcomes
    expansion = tools.expand_terms([t for t in terms if t])

    gathered: list[EvidenceSnippet] = []
    gathered.extend(tools.graph_query(expansion))
    gathered.extend(tools.tree_locate(expansion))
    gathered.extend(tools.corpus_search(expansion))

    kept: list[EvidenceSnippet] = []
    seen: set[tuple[str, str]] = set()
    for snippet in sorted(gathered, key=lambda s: TIER_ORDER.index(s.tier)):
        if not _snippet_passes(snippet, query, expansion):
            continue
        key = (canonical_json(snippet.provenance), sha256_hex(snippet.text))
        if key in seen:
            continue
        seen.add(key)
        snippet.pico_match = {"query_id": query.query_id,
                              "relaxation_level": query.relaxation_level}
        kept.append(snippet)
    tools.log.append({"tool": "ladder_order", "order": list(TIER_ORDER),
                      "query_id": query.query_id,
                      "relaxation_level": query.relaxation_level,
                      "kept": len(kept)})
    return kept


# -- synthesis ----------------------------------------------------------------

_UNIT_IN_TEXT_RE = re.compile(
    r"(\d+(?:\.\d+)?)\s*(months|month|weeks|week|years|year|days|day|mcg|ug|"
    r"mm|cm|mg|m|g|%)(?![A-Za-z])")


def normalize_element_text(text: str) -> str:
    """Whitespace-collapse and rewrite quantities in base units."""
    def repl(match: re.Match) -> str:
        qty, base = normalize_value(float(match.group(1)), match.group(2))
        qty_text = str(int(qty)) if qty == int(qty) else str(qty)
        return f"{qty_text} {base}"

    return " ".join(_UNIT_IN_TEXT_RE.sub(repl, text).split())


def _tier_rank(tier: str) -> int:
    return TIER_ORDER.index(tier)


def _resolve_citations(indices: list[int], snippets: list[EvidenceSnippet],
                       conflicted: bool) -> list[dict]:
    cited = [snippets[i] for i in indices if 0 <= i < len(snippets)]
    cited.sort(key=lambda s: (_tier_rank(s.tier),
                              s.pico_match.get("relaxation_level", 0),
                              canonical_json(s.provenance)))
    if conflicted and cited:
        cited = cited[:1]  # higher-tier, population-matched snippet wins
    out, seen = [], set()
    for s in cited:
        key = canonical_json(s.provenance)
        if key not in seen:
            seen.add(key)
            out.append(dict(s.provenance))
    return out


def run_agent(item: Item, tools: RetrievalTools, gateway: Gateway,
              budget: int = DEFAULT_TOOL_BUDGET) -> tuple[Rubric | None, AgentTrace]:
    """Full loop: formulate, retrieve (relaxing on sparsity), synthesize, tier.

    Returns (None, trace) with termination_reason "budget_exhausted" when the
    tool budget runs out before synthesis; the caller flags the item.
    """
    tools.budget = ToolBudget(limit=budget)
    trace = AgentTrace()
    trace.thought(f"formulate structured queries for {item.item_id}")
    queries = formulate_pico(item, gateway)
    trace.decision("formulated queries", query_ids=[q.query_id for q in queries])

    snippets: list[EvidenceSnippet] = []
    try:
        for query in queries:
            current = query
            while True:
                trace.tool_call("retrieve_tiered", {
                    "query_id": current.query_id,
                    "relaxation_level": current.relaxation_level})
                found = retrieve_tiered(current, tools)
                trace.tool_result("retrieve_tiered", found)
                if found:
                    snippets.extend(found)
                    break
                if current.relaxation_level >= MAX_RELAXATION:
                    trace.decision("relaxation exhausted; low-certainty fallback",
                                   query_id=current.query_id)
                    break
                current = relax(current)
                trace.decision("relaxed query", query_id=current.query_id,
                               relaxation_level=current.relaxation_level)
    except BudgetExceeded:
        trace.termination_reason = "budget_exhausted"
        trace.decision("tool budget exhausted before synthesis")
        return None, trace

    dedup: list[EvidenceSnippet] = []
    seen: set[tuple[str, str]] = set()
    for s in snippets:
        key = (canonical_json(s.provenance), sha256_hex(s.text))
        if key not in seen:
            seen.add(key)
            dedup.append(s)
    snippets = dedup

    trace.thought("synthesize conclusions and extract tiered elements")
    digest = [{"index": i, "text": s.text[:400], "tier": s.tier,
               "provenance": s.provenance,
               "relaxation_level": s.pico_match.get("relaxation_level", 0)}
              for i, s in enumerate(snippets)]
    response = gateway.complete(ModelRequest(role_tag="rubric_agent", parts={
        "system": "Synthesize the evidence into conclusions with certainty grades "
                  "(high/moderate/low) noting bias, consistency and directness "
                  "limitations, then extract scoring elements. Reply with JSON "
                  '{"conclusions": [{"text", "certainty", "conflict", '
                  '"limitations"}], "positives": [{"tier": "A1".."A3", "text", '
                  '"snippets": [index...]}], "negatives": [{"tier": "S2".."S4", '
                  '"text", "snippets": [...]}]}.',
        "user": json.dumps({"item_id": item.item_id, "stem": item.stem,
                            "snippets": digest}, sort_keys=True),
    }))
    payload = extract_json(response.text)
    if payload is None:
        raise RubricAgentError(f"unparseable synthesis for {item.item_id}")

    rubric = Rubric(rubric_id=f"rub-{item.item_id}", item_id=item.item_id,
                    agent_trace_ref=f"trace-{item.item_id}")
    for conclusion in payload.get("conclusions", []):
        certainty = conclusion.get("certainty")
        rubric.certainty_notes.append({
            "text": str(conclusion.get("text", "")),
            "certainty": certainty if certainty in CERTAINTY_GRADES else "low",
            "conflict": bool(conclusion.get("conflict")),
            "limitations": str(conclusion.get("limitations", "")),
        })

    seen_texts: set[tuple[str, str]] = set()
    counters: dict[str, int] = {}

    def add_element(raw: dict, polarity: str, allowed: tuple[str, ...]) -> None:
        tier = raw.get("tier")
        if tier not in allowed:
            rubric.warnings.append(f"dropped element with tier {tier!r}")
            return
        text = normalize_element_text(str(raw.get("text", "")))
        key = (polarity, text.lower())
        if not text or key in seen_texts:
            return
        seen_texts.add(key)
        conflicted = any(n["conflict"] for n in rubric.certainty_notes)
        citations = _resolve_citations([int(i) for i in raw.get("snippets", [])],
                                       snippets, conflicted)
        counters[tier] = counters.get(tier, 0) + 1
        element = RubricElement(element_id=f"{tier}-{counters[tier]}",
                                polarity=polarity, tier=tier, text=text,
                                citations=citations)
        (rubric.positives if polarity == "positive" else rubric.negatives).append(element)

    for raw in payload.get("positives", []):
        add_element(raw, "positive", POSITIVE_TIERS)
    for raw in payload.get("negatives", []):
        add_element(raw, "negative", NEGATIVE_TIERS)

    if item.g_level in ("G1", "G2", "G3") and not any(
            e.tier == "A1" for e in rubric.positives):
        rubric.warnings.append("no A1 element for a G1-G3 item")

    certainties = [n["certainty"] for n in rubric.certainty_notes]
    if certainties and "low" not in certainties:
        trace.termination_reason = "high_certainty"
    else:
        trace.termination_reason = "low_certainty_fallback"
    trace.decision("synthesis complete",
                   termination_reason=trace.termination_reason,
                   positives=len(rubric.positives), negatives=len(rubric.negatives))
    return rubric, trace


def verify_citation_soundness(rubric: Rubric, trace: AgentTrace) -> list[dict]:
    """Citations not present in any tool result step; empty means sound."""
    seen = set()
    for step in trace.steps:
        if step.get("kind") == "tool_result":
            for result in step.get("results", []):
                seen.add(canonical_json(result.get("provenance", {})))
    missing = []
    for element in rubric.elements():
        for citation in element.citations:
            if canonical_json(citation) not in seen:
                missing.append({"element_id": element.element_id,
                                "citation": citation})
    return missing


# -- statistics -----------------------------------------------------------------

def rubric_stats(rubrics: list[Rubric], items: list[Item]) -> dict:
    """Min/mean/max element counts per (grounding level, tier)."""
    if not rubrics:
        raise RubricAgentError("rubric batch is empty")
    g_of = {item.item_id: item.g_level for item in items}
    per_cell: dict[tuple[str, str], list[int]] = {}
    all_tiers = POSITIVE_TIERS + NEGATIVE_TIERS
    for rubric in rubrics:
        g = g_of.get(rubric.item_id)
        if g is None:
            continue
        counts = {tier: 0 for tier in all_tiers}
        for element in rubric.elements():
            counts[element.tier] = counts.get(element.tier, 0) + 1
        for tier in all_tiers:
            per_cell.setdefault((g, tier), []).append(counts[tier])
    table: dict[str, dict[str, dict]] = {}
    for (g, tier), values in sorted(per_cell.items()):
        table.setdefault(g, {})[tier] = {
            "min": min(values),
            "mean": round(sum(values) / len(values), 4),
            "max": max(values),
            "n_items": len(values),
        }
    return table


# -- persistence ------------------------------------------------------------------

def save_rubrics(rubrics: list[Rubric], path: str | Path) -> None:
    header = canonical_json({"schema": RUBRIC_SCHEMA, "count": len(rubrics)})
    body = "".join(canonical_json(r.to_dict()) + "\n" for r in rubrics)
    Path(path).write_text(header + "\n" + body)


def load_rubrics(path: str | Path) -> list[Rubric]:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("schema") != RUBRIC_SCHEMA:
        raise RubricAgentError(f"unsupported rubric schema {header.get('schema')!r}")
    return [Rubric.from_dict(json.loads(line)) for line in lines[1:] if line]


def save_traces(traces: dict[str, AgentTrace], path: str | Path) -> None:
    records = [{"trace_ref": ref, "termination_reason": t.termination_reason,
                "steps": t.steps} for ref, t in sorted(traces.items())]
    header = canonical_json({"schema": "traces/1", "count": len(records)})
    Path(path).write_text(header + "\n"
                          + "".join(canonical_json(r) + "\n" for r in records))
