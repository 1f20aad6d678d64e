"""Command-line surface over the pipeline and evaluation stages."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .canonical import canonical_json
from .corpus import (ContentStore, FixtureCitationProvider, assemble_neighborhood,
                     freeze, load_manifest, save_manifest, verify_manifest)
from .doctree import NormalizedDocument, build_tree, resolve_cross_refs
from .gateway import (Gateway, HTTPChatProvider, ProviderConfig, StubProvider,
                      load_stub_script, stub_gateway)
from .harness import (RunConfig, aggregate_axes, dataset_stats, evaluate_candidate,
                      load_results, run_pipeline, save_report)
from .items import load_items, save_items, verify_items
from .kgraph import KnowledgeGraph, PageContext, grow_graph, save_graph
from .rubric import load_rubrics, rubric_stats
from .scoring import ScoreConfig


def _gateway_from(args) -> Gateway:
    if not args.stub:
        raise SystemExit("a --stub script directory is required for offline runs")
    return stub_gateway(load_stub_script(args.stub))


def _candidate_from(args, config) -> Gateway:
    if args.stub:
        return stub_gateway(load_stub_script(args.stub), provider_id="candidate")
    if config.candidate_provider:
        return Gateway(provider=HTTPChatProvider(
            ProviderConfig(**config.candidate_provider)))
    raise SystemExit("no candidate provider: pass --stub or configure "
                     "candidate_provider")


def _judges_from(args, config, size: int) -> list[Gateway]:
    if args.stub:
        script = load_stub_script(args.stub)
        return [Gateway(provider=StubProvider(script, provider_id=f"judge{i}"))
                for i in range(size)]
    if len(config.judge_providers) == size:
        return [Gateway(provider=HTTPChatProvider(ProviderConfig(**spec)))
                for spec in config.judge_providers]
    raise SystemExit(f"judge ensemble needs {size} providers: pass --stub or "
                     "configure judge_providers")


def _load_config(args) -> RunConfig:
    if not args.config:
        raise SystemExit("--config is required for this command")
    config = RunConfig.from_file(args.config)
    if args.out:
        config.out_dir = args.out
    if args.seed is not None:
        config.seed = args.seed
    return config


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="guidebench",
                                     description="Guideline-anchored benchmark "
                                                 "construction and scoring")
    parser.add_argument("--config", help="run config JSON file")
    parser.add_argument("--seed", type=int, default=None, help="random seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--stub", help="stub script file or directory")
    sub = parser.add_subparsers(dest="group", required=True)

    corpus = sub.add_parser("corpus").add_subparsers(dest="action", required=True)
    assemble = corpus.add_parser("assemble")
    assemble.add_argument("--anchor", required=True)
    assemble.add_argument("--k", type=int, default=3)
    assemble.add_argument("--graph", required=True, help="citation graph fixture file")
    assemble.add_argument("--manifest", required=True, help="output manifest path")
    frz = corpus.add_parser("freeze")
    frz.add_argument("--manifest", required=True)
    frz.add_argument("--graph", required=True)
    frz.add_argument("--store", required=True)
    ver = corpus.add_parser("verify")
    ver.add_argument("--manifest", required=True)
    ver.add_argument("--graph", required=True)

    tree = sub.add_parser("tree").add_subparsers(dest="action", required=True)
    tb = tree.add_parser("build")
    tb.add_argument("--doc", required=True)
    tb.add_argument("--tree-out", required=True)

    kg = sub.add_parser("kg").add_subparsers(dest="action", required=True)
    kgrow = kg.add_parser("grow")
    kgrow.add_argument("--doc", required=True)
    kgrow.add_argument("--graph-out", required=True)

    items = sub.add_parser("items").add_subparsers(dest="action", required=True)
    for action in ("generate", "verify"):
        p = items.add_parser(action)
        if action == "verify":
            p.add_argument("--items", required=True)
            p.add_argument("--items-out", required=True)

    perturb_cmd = sub.add_parser("perturb").add_subparsers(dest="action", required=True)
    perturb_cmd.add_parser("run")

    rubric_cmd = sub.add_parser("rubric").add_subparsers(dest="action", required=True)
    rubric_cmd.add_parser("run")
    rstats = rubric_cmd.add_parser("stats")
    rstats.add_argument("--rubrics", required=True)
    rstats.add_argument("--items", required=True)

    eval_cmd = sub.add_parser("eval").add_subparsers(dest="action", required=True)
    eval_cmd.add_parser("run")
    eval_cmd.add_parser("score")
    eval_cmd.add_parser("report")

    sub.add_parser("stats")

    args = parser.parse_args(argv)
    return _dispatch(args)


def _dispatch(args) -> int:
    group, action = args.group, getattr(args, "action", None)

    if group == "corpus" and action == "assemble":
        provider = FixtureCitationProvider(args.graph)
        manifest = assemble_neighborhood(args.anchor, args.k, provider)
        save_manifest(manifest, args.manifest)
        print(f"assembled {len(manifest.records)} records -> {args.manifest}")
        return 0

    if group == "corpus" and action == "freeze":
        provider = FixtureCitationProvider(args.graph)
        manifest = load_manifest(args.manifest)
        store = ContentStore(args.store)
        freeze(manifest, store, fetch=lambda r: provider.content_of(r.doc_id))
        save_manifest(manifest, args.manifest)
        print(f"frozen digest {manifest.content_digest}")
        return 0

    if group == "corpus" and action == "verify":
        provider = FixtureCitationProvider(args.graph)
        report = verify_manifest(load_manifest(args.manifest), provider)
        print(canonical_json({"ok": report.ok, "findings": report.findings}))
        return 0 if report.ok else 1

    if group == "tree" and action == "build":
        doc = NormalizedDocument.load(args.doc)
        tree = resolve_cross_refs(build_tree(doc), doc)
        tree.save(args.tree_out)
        print(f"{len(tree.nodes)} nodes -> {args.tree_out}")
        return 0

    if group == "kg" and action == "grow":
        gateway = _gateway_from(args)
        doc = NormalizedDocument.load(args.doc)
        tree = resolve_cross_refs(build_tree(doc), doc)
        graph = KnowledgeGraph()
        for page in doc.pages:
            section = tree.covering_node(page.page_no)
            grow_graph(graph, PageContext(doc_id=doc.doc_id, page_no=page.page_no,
                                          text=page.text, section_id=section.node_id,
                                          section_title=section.title), gateway)
        save_graph(graph, args.graph_out)
        print(f"{len(graph.entities)} entities, {len(graph.relations)} relations "
              f"-> {args.graph_out}")
        return 0

    if group == "items" and action == "generate":
        config = _load_config(args)
        config.stages = {"rubrics": False, "perturbations": False}
        bundle = run_pipeline(config, _gateway_from(args))
        print(f"{len(bundle.items)} items -> {config.out_dir}")
        return 0

    if group == "items" and action == "verify":
        gateway = _gateway_from(args)
        retained, report = verify_items(load_items(args.items), gateway)
        save_items(retained, args.items_out)
        print(canonical_json({"pass_rate": report["pass_rate"],
                              "passed": report["passed"], "total": report["total"]}))
        return 0

    if group in ("perturb", "rubric") and action == "run":
        config = _load_config(args)
        if group == "rubric":
            config.stages = {"perturbations": False}
        bundle = run_pipeline(config, _gateway_from(args))
        print(f"{len(bundle.items)} items, {len(bundle.rubrics)} rubrics "
              f"-> {config.out_dir}")
        return 0

    if group == "rubric" and action == "stats":
        table = rubric_stats(load_rubrics(args.rubrics), load_items(args.items))
        print(canonical_json(table))
        return 0

    if group == "eval" and action == "run":
        config = _load_config(args)
        bundle = run_pipeline(config, _gateway_from(args))
        print(canonical_json({"bundle_hash": bundle.bundle_hash,
                              "items": len(bundle.items)}))
        return 0

    if group == "eval" and action == "score":
        config = _load_config(args)
        bundle = run_pipeline(config, _gateway_from(args))
        score_config = config.score_config()
        candidate = _candidate_from(args, config)
        judges = _judges_from(args, config, score_config.ensemble_size)
        results = evaluate_candidate(bundle, candidate, judges, score_config,
                                     out_dir=config.out_dir)
        answered = sum(1 for r in results if r.answered)
        print(canonical_json({"scored": len(results), "answered": answered}))
        return 0

    if group == "eval" and action == "report":
        config = _load_config(args)
        bundle = run_pipeline(config, _gateway_from(args))
        results = load_results(config.out_dir)
        report = aggregate_axes(results, bundle)
        save_report(report, Path(config.out_dir) / "report")
        print(canonical_json(report.to_dict()))
        return 0

    if group == "stats":
        config = _load_config(args)
        bundle = run_pipeline(config, _gateway_from(args))
        print(canonical_json(dataset_stats(bundle)))
        return 0

    raise SystemExit(f"unknown command {group} {action}")


if __name__ == "__main__":
    sys.exit(main())
