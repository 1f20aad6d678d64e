"""End-to-end pipeline orchestration and candidate evaluation.

Stages run in order (corpus, tree, graph, items, verification gate, rubrics,
perturbations) with per-stage persisted artifacts and content-addressed
resume markers, so an interrupted run continues without redoing completed
stages. Evaluation scores one candidate per item and aggregates results
along the four axes: grounding level, adequacy tier hit rates, safety tier
trigger rates, and perturbation score deltas against clean baselines.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .canonical import canonical_json, digest
from .corpus import (ContentStore, FixtureCitationProvider, FrozenCorpus,
                     assemble_neighborhood, freeze, load_manifest, save_manifest)
from .doctree import DocTree, NormalizedDocument, build_tree, resolve_cross_refs
from .gateway import Gateway, GatewayError, ModelRequest
from .items import (ExclusionLedger, Item, ItemGenerationError, align_subgraph,
                    classify_support, generate_g1, generate_g2, generate_g3,
                    generate_g4, load_items, save_items, synthesize_vignettes,
                    verify_items)
from .kgraph import KnowledgeGraph, PageContext, grow_graph, load_graph, save_graph
from .perturb import perturb, perturb_adversarial
from .rubric import (AgentTrace, RetrievalTools, Rubric, RubricAgentError,
                     load_rubrics, run_agent, save_rubrics, save_traces)
from .scoring import ScoreBreakdown, ScoreConfig, score_response

STAGES = ("corpus", "tree", "graph", "items", "rubrics", "perturbations")


class HarnessError(Exception):
    pass


@dataclass
class RunConfig:
    anchor_id: str
    document_path: str
    citation_graph_path: str
    out_dir: str
    k: int = 3
    seed: int = 0
    domain_seed: str = ""
    vignette_count: int = 4
    stages: dict = field(default_factory=dict)  # stage name -> enabled
    verify_gate: bool = True
    tree_gateway: bool = False
    synonym_table: dict = field(default_factory=dict)
    scoring: dict = field(default_factory=dict)
    rubric_budget: int = 20
    frozen_at: str | None = None
    candidate_provider: dict = field(default_factory=dict)  # ProviderConfig fields
    judge_providers: list = field(default_factory=list)  # ensemble declaration

    def stage_enabled(self, name: str) -> bool:
        return bool(self.stages.get(name, True))

    def score_config(self) -> ScoreConfig:
        return ScoreConfig.from_dict(self.scoring) if self.scoring else ScoreConfig()

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_file(path: str | Path) -> "RunConfig":
        return RunConfig(**json.loads(Path(path).read_text()))


@dataclass
class Bundle:
    config: RunConfig
    corpus: FrozenCorpus
    doc: NormalizedDocument
    tree: DocTree
    graph: KnowledgeGraph
    items: list[Item]
    rubrics: list[Rubric]
    ledger: ExclusionLedger

    def rubric_for(self, item: Item) -> Rubric | None:
        by_id = {r.rubric_id: r for r in self.rubrics}
        return by_id.get(item.rubric_id)

    @property
    def bundle_hash(self) -> str:
        return digest({
            "corpus": self.corpus.manifest.content_digest,
            "tree": self.tree.to_dict(),
            "graph": self.graph.to_state_dict(),
            "items": [i.to_dict() for i in self.items],
            "rubrics": [r.to_dict() for r in self.rubrics],
        })


# -- stage plumbing -----------------------------------------------------------

def _stage_dir(out_dir: str | Path, stage: str) -> Path:
    path = Path(out_dir) / stage
    path.mkdir(parents=True, exist_ok=True)
    return path


def _marker(stage_dir: Path) -> Path:
    return stage_dir / "_complete.json"


def _stage_done(stage_dir: Path, input_hash: str) -> bool:
    marker = _marker(stage_dir)
    if not marker.exists():
        return False
    return json.loads(marker.read_text()).get("input_hash") == input_hash


def _mark_done(stage_dir: Path, input_hash: str) -> None:
    _marker(stage_dir).write_text(canonical_json({"input_hash": input_hash}) + "\n")


def run_pipeline(config: RunConfig, gateway: Gateway) -> Bundle:
    """Execute all enabled stages; a stage failure halts downstream stages
    while retaining completed artifacts for resume."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ledger = ExclusionLedger()

    # corpus ---------------------------------------------------------------
    stage = _stage_dir(out, "corpus")
    provider = FixtureCitationProvider(config.citation_graph_path)
    corpus_hash = digest({"anchor": config.anchor_id, "k": config.k,
                          "graph_file": Path(config.citation_graph_path).read_text()})
    store = ContentStore(stage / "store")
    if _stage_done(stage, corpus_hash):
        manifest = load_manifest(stage / "manifest.jsonl")
        frozen = FrozenCorpus(manifest=manifest, store=store)
    else:
        manifest = assemble_neighborhood(config.anchor_id, config.k, provider)
        frozen = freeze(manifest, store,
                        fetch=lambda r: provider.content_of(r.doc_id),
                        frozen_at=config.frozen_at)
        save_manifest(manifest, stage / "manifest.jsonl")
        _mark_done(stage, corpus_hash)

    # tree -------------------------------------------------------------------
    stage = _stage_dir(out, "tree")
    doc = NormalizedDocument.load(config.document_path)
    tree_hash = digest({"doc": Path(config.document_path).read_text(),
                        "gateway": config.tree_gateway})
    if _stage_done(stage, tree_hash):
        tree = DocTree.load(stage / "tree.json")
    else:
        tree = build_tree(doc, gateway if config.tree_gateway else None)
        tree = resolve_cross_refs(tree, doc,
                                  gateway if config.tree_gateway else None)
        tree.save(stage / "tree.json")
        _mark_done(stage, tree_hash)

    # graph --------------------------------------------------------------------
    stage = _stage_dir(out, "graph")
    graph_hash = digest({"tree": tree_hash, "synonyms": config.synonym_table})
    if _stage_done(stage, graph_hash):
        graph = load_graph(stage)
    else:
        graph = KnowledgeGraph(synonym_table=dict(config.synonym_table))
        for page in doc.pages:
            section = tree.covering_node(page.page_no)
            grow_graph(graph, PageContext(doc_id=doc.doc_id, page_no=page.page_no,
                                          text=page.text,
                                          section_id=section.node_id,
                                          section_title=section.title), gateway)
        save_graph(graph, stage)
        _mark_done(stage, graph_hash)

    # items ----------------------------------------------------------------------
    stage = _stage_dir(out, "items")
    items_hash = digest({"graph": graph.to_state_dict(), "seed": config.seed,
                         "domain": config.domain_seed,
                         "count": config.vignette_count,
                         "verify": config.verify_gate})
    if _stage_done(stage, items_hash):
        p0_items = load_items(stage / "items.jsonl")
    else:
        p0_items = generate_g1(graph, tree, ledger) + generate_g2(graph, tree, ledger)
        vignettes = synthesize_vignettes(config.domain_seed, config.vignette_count,
                                         gateway, ledger)
        g3_seq = g4_seq = 0
        for vignette in vignettes:
            align_subgraph(vignette, graph)
            support = classify_support(vignette, gateway)
            try:
                if support == "supported":
                    item = generate_g3(vignette, graph, seq=g3_seq + 1)
                    g3_seq += 1
                    p0_items.append(item)
                elif support == "partially_supported":
                    item = generate_g4(vignette, graph, seq=g4_seq + 1)
                    g4_seq += 1
                    p0_items.append(item)
                else:
                    ledger.record("items", vignette.vignette_id,
                                  "unsupported vignette")
            except ItemGenerationError as exc:
                ledger.record("items", vignette.vignette_id, str(exc))
        if config.verify_gate:
            p0_items, verify_report = verify_items(p0_items, gateway, ledger)
            (stage / "verification.json").write_text(
                canonical_json(verify_report) + "\n")
        save_items(p0_items, stage / "items.jsonl")
        _mark_done(stage, items_hash)

    # rubrics -----------------------------------------------------------------------
    if not config.stage_enabled("rubrics"):
        ledger.save(out / "exclusions.jsonl")
        return Bundle(config=config, corpus=frozen, doc=doc, tree=tree,
                      graph=graph, items=p0_items, rubrics=[], ledger=ledger)
    stage = _stage_dir(out, "rubrics")
    item_dir = stage / "per_item"
    item_dir.mkdir(exist_ok=True)
    rubric_hash = digest({"items": items_hash, "budget": config.rubric_budget})
    rubrics: list[Rubric] = []
    traces: dict[str, AgentTrace] = {}
    if _stage_done(stage, rubric_hash):
        rubrics = load_rubrics(stage / "rubrics.jsonl")
    else:
        for item in p0_items:
            per_item = item_dir / f"{item.item_id}.json"
            if per_item.exists():
                rubrics.append(Rubric.from_dict(json.loads(per_item.read_text())))
                continue
            tools = RetrievalTools(graph=graph, tree=tree, doc=doc, corpus=frozen)
            try:
                rubric, trace = run_agent(item, tools, gateway,
                                          budget=config.rubric_budget)
            except RubricAgentError as exc:
                ledger.record("rubrics", item.item_id, str(exc))
                continue
            traces[f"trace-{item.item_id}"] = trace
            if rubric is None:
                ledger.record("rubrics", item.item_id,
                              f"no rubric: {trace.termination_reason}")
                continue
            rubrics.append(rubric)
            per_item.write_text(canonical_json(rubric.to_dict()) + "\n")
        save_rubrics(rubrics, stage / "rubrics.jsonl")
        save_traces(traces, stage / "traces.jsonl")
        _mark_done(stage, rubric_hash)

    rubric_by_item = {r.item_id: r for r in rubrics}
    scored_items = []
    for item in p0_items:
        rubric = rubric_by_item.get(item.item_id)
        if rubric is None:
            ledger.record("rubrics", item.item_id, "item flagged: rubric omitted")
            continue
        item.rubric_id = rubric.rubric_id
        scored_items.append(item)

    # perturbations ---------------------------------------------------------------------
    all_items = list(scored_items)
    if config.stage_enabled("perturbations"):
        stage = _stage_dir(out, "perturbations")
        perturb_hash = digest({"rubrics": rubric_hash,
                               "items": [i.item_id for i in scored_items]})
        if _stage_done(stage, perturb_hash):
            all_items = load_items(stage / "all_items.jsonl")
        else:
            reject_log: list[dict] = []
            specs: list[dict] = []
            for idx, item in enumerate(scored_items):
                rubric = rubric_by_item[item.item_id]
                for level in ("P1", "P2"):
                    got = perturb(item, level, gateway, log=reject_log)
                    if got is None:
                        ledger.record("perturbations", item.item_id,
                                      f"{level} variant not emitted")
                        continue
                    variant, spec = got
                    all_items.append(variant)
                    specs.append({"item_id": variant.item_id, **spec.to_dict()})
                variant_spec = _p3_variant(item, rubric, idx, gateway, reject_log)
                if variant_spec is None:
                    ledger.record("perturbations", item.item_id,
                                  "P3 variant not emitted")
                else:
                    variant, spec = variant_spec
                    all_items.append(variant)
                    specs.append({"item_id": variant.item_id, **spec.to_dict()})
            save_items(all_items, stage / "all_items.jsonl")
            (stage / "specs.jsonl").write_text(
                "".join(canonical_json(s) + "\n" for s in specs))
            (stage / "rejections.jsonl").write_text(
                "".join(canonical_json(r) + "\n" for r in reject_log))
            _mark_done(stage, perturb_hash)

    ledger.save(out / "exclusions.jsonl")
    bundle = Bundle(config=config, corpus=frozen, doc=doc, tree=tree, graph=graph,
                    items=all_items, rubrics=rubrics, ledger=ledger)
    (out / "bundle.json").write_text(canonical_json(
        {"bundle_hash": bundle.bundle_hash, "items": len(all_items),
         "rubrics": len(rubrics)}) + "\n")
    return bundle


def _p3_variant(item: Item, rubric: Rubric, idx: int, gateway: Gateway,
                reject_log: list):
    """Adversarial variant with alternating mode preference across the batch,
    so both negation and affirmation styles appear in every sizable bundle."""
    has_a1 = any(e.tier == "A1" for e in rubric.positives)
    has_s34 = any(e.tier in ("S3", "S4") for e in rubric.negatives)
    modes = []
    preferred = ["negate_positive", "affirm_negative"] if idx % 2 == 0 else \
        ["affirm_negative", "negate_positive"]
    for mode in preferred:
        if mode == "negate_positive" and has_a1:
            modes.append(mode)
        if mode == "affirm_negative" and has_s34:
            modes.append(mode)
    for mode in modes:
        got = perturb_adversarial(item, rubric, mode, gateway, log=reject_log)
        if got is not None:
            return got
    return None


# -- evaluation -----------------------------------------------------------------

def evaluate_candidate(bundle: Bundle, candidate: Gateway, judges: list[Gateway],
                       config: ScoreConfig,
                       out_dir: str | Path | None = None,
                       embedder=None) -> list[ScoreBreakdown]:
    """Call the candidate once per item and score each response.

    A candidate transport failure marks the item unanswered with a zero
    score, distinct from a scored zero.
    """
    results = []
    result_dir = None
    if out_dir is not None:
        result_dir = Path(out_dir) / "results"
        result_dir.mkdir(parents=True, exist_ok=True)
    rubric_by_id = {r.rubric_id: r for r in bundle.rubrics}
    for item in bundle.items:
        rubric = rubric_by_id.get(item.rubric_id)
        if rubric is None:
            raise HarnessError(f"item {item.item_id} has no rubric in bundle")
        try:
            reply = candidate.complete(ModelRequest(role_tag="candidate", parts={
                "system": "Answer the clinical question concisely and safely.",
                "user": item.stem,
            }))
            breakdown = score_response(item, rubric, reply.text, judges, config,
                                       embedder=embedder)
        except GatewayError:
            breakdown = ScoreBreakdown(item_id=item.item_id, answered=False,
                                       s_final=0.0)
        results.append(breakdown)
        if result_dir is not None:
            (result_dir / f"{item.item_id}.json").write_text(
                canonical_json(breakdown.to_dict()) + "\n")
    return results


def load_results(out_dir: str | Path) -> list[ScoreBreakdown]:
    result_dir = Path(out_dir) / "results"
    return [ScoreBreakdown.from_dict(json.loads(p.read_text()))
            for p in sorted(result_dir.glob("*.json"))]


# -- axis aggregation --------------------------------------------------------------

@dataclass
class AxisReport:
    grounding: dict = field(default_factory=dict)     # G -> stats on P0 items
    adequacy: dict = field(default_factory=dict)      # "G/A" -> hit-rate cell
    safety: dict = field(default_factory=dict)        # "G/S" -> trigger-rate cell
    perturbation: dict = field(default_factory=dict)  # "G/P" -> paired delta cell
    counts: dict = field(default_factory=dict)        # "G/P" -> item count

    def to_dict(self) -> dict:
        return asdict(self)

    def tabular(self) -> str:
        lines = ["axis\tcell\tvalue\tn"]
        for g, cell in sorted(self.grounding.items()):
            lines.append(f"grounding\t{g}\t{cell['mean_s_final']:.4f}\t{cell['n']}")
        for key, cell in sorted(self.adequacy.items()):
            lines.append(f"adequacy\t{key}\t{cell['hit_rate']:.4f}\t{cell['total']}")
        for key, cell in sorted(self.safety.items()):
            lines.append(f"safety\t{key}\t{cell['trigger_rate']:.4f}\t{cell['total']}")
        for key, cell in sorted(self.perturbation.items()):
            lines.append(f"perturbation\t{key}\t{cell['mean_delta']:.4f}\t{cell['n_pairs']}")
        return "\n".join(lines) + "\n"


def aggregate_axes(results: list[ScoreBreakdown], bundle: Bundle) -> AxisReport:
    """Aggregate raw score breakdowns into the four axis views.

    Unanswered items count as zero in mean scores but never enter hit-rate
    denominators. Perturbation deltas pair each variant with its clean
    parent; cells with no data stay absent rather than reporting zero.
    """
    by_item = {r.item_id: r for r in results}
    items_by_id = {i.item_id: i for i in bundle.items}
    rubric_by_id = {r.rubric_id: r for r in bundle.rubrics}
    report = AxisReport()

    score_sum: dict[str, float] = {}
    score_n: dict[str, int] = {}
    unanswered: dict[str, int] = {}
    for item in bundle.items:
        result = by_item.get(item.item_id)
        if result is None:
            continue
        key = f"{item.g_level}/{item.p_level}"
        report.counts[key] = report.counts.get(key, 0) + 1
        if item.p_level == "P0":
            score_sum[item.g_level] = score_sum.get(item.g_level, 0.0) + result.s_final
            score_n[item.g_level] = score_n.get(item.g_level, 0) + 1
            if not result.answered:
                unanswered[item.g_level] = unanswered.get(item.g_level, 0) + 1
    for g, n in sorted(score_n.items()):
        report.grounding[g] = {"mean_s_final": round(score_sum[g] / n, 4), "n": n,
                               "n_unanswered": unanswered.get(g, 0)}

    hits: dict[str, list[int]] = {}
    triggers: dict[str, list[int]] = {}
    for item in bundle.items:
        result = by_item.get(item.item_id)
        if result is None or not result.answered:
            continue
        rubric = rubric_by_id.get(item.rubric_id)
        if rubric is None:
            continue
        for element in rubric.positives:
            hits.setdefault(f"{item.g_level}/{element.tier}", []).append(
                result.h.get(element.element_id, 0))
        for element in rubric.negatives:
            triggers.setdefault(f"{item.g_level}/{element.tier}", []).append(
                result.g.get(element.element_id, 0))
    for key, values in sorted(hits.items()):
        report.adequacy[key] = {"hit_rate": round(sum(values) / len(values), 4),
                                "hits": sum(values), "total": len(values)}
    for key, values in sorted(triggers.items()):
        report.safety[key] = {"trigger_rate": round(sum(values) / len(values), 4),
                              "triggers": sum(values), "total": len(values)}

    deltas: dict[str, list[float]] = {}
    for item in bundle.items:
        if item.p_level == "P0" or item.parent_item_id is None:
            continue
        parent_result = by_item.get(item.parent_item_id)
        variant_result = by_item.get(item.item_id)
        if parent_result is None or variant_result is None:
            continue
        parent = items_by_id.get(item.parent_item_id)
        if parent is None:
            continue
        deltas.setdefault(f"{item.g_level}/{item.p_level}", []).append(
            parent_result.s_final - variant_result.s_final)
    for key, values in sorted(deltas.items()):
        report.perturbation[key] = {"mean_delta": round(sum(values) / len(values), 4),
                                    "n_pairs": len(values)}
    return report


def dataset_stats(bundle: Bundle) -> dict:
    """Composition table: clean-item counts and rubric density per level."""
    stats: dict[str, dict] = {}
    rubric_by_id = {r.rubric_id: r for r in bundle.rubrics}
    for item in bundle.items:
        if item.p_level != "P0":
            continue
        cell = stats.setdefault(item.g_level, {"count": 0, "adequacy_total": 0,
                                               "safety_total": 0})
        cell["count"] += 1
        rubric = rubric_by_id.get(item.rubric_id)
        if rubric is not None:
            cell["adequacy_total"] += len(rubric.positives)
            cell["safety_total"] += len(rubric.negatives)
    table = {}
    for g, cell in sorted(stats.items()):
        table[g] = {"count": cell["count"],
                    "mean_adequacy": round(cell["adequacy_total"] / cell["count"], 4),
                    "mean_safety": round(cell["safety_total"] / cell["count"], 4)}
    return table


def save_report(report: AxisReport, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "axis_report.json").write_text(canonical_json(report.to_dict()) + "\n")
    (out / "axis_report.tsv").write_text(report.tabular())
