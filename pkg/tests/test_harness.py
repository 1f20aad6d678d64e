"""Harness tests: deterministic end-to-end runs, stage toggles, crash
resume, candidate evaluation rules, axis aggregation against a spreadsheet
oracle, dataset statistics, and the CLI surface."""

import json
from types import SimpleNamespace

import pytest

from fixtures.e2e import (NO_A1_ITEMS, base_rules, build_full_script,
                          derived_rules, make_config)
from guidebench import cli
from guidebench.canonical import canonical_json
from guidebench.gateway import Gateway, StubProvider, stub_gateway
from guidebench.harness import (RunConfig, aggregate_axes, dataset_stats,
                                evaluate_candidate, load_results, run_pipeline)
from guidebench.items import Item, ItemNucleus
from guidebench.rubric import Rubric, RubricElement
from guidebench.scoring import ScoreBreakdown, ScoreConfig


@pytest.fixture(scope="module")
def e2e_workdir(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("e2e")
    script = build_full_script(workdir)
    return workdir, script


@pytest.fixture(scope="module")
def e2e_bundle(e2e_workdir):
    workdir, script = e2e_workdir
    config = make_config(workdir, "main_run")
    return run_pipeline(config, stub_gateway(script)), script


def judges_from(script, n=3):
    return [Gateway(provider=StubProvider(script, provider_id=f"judge{i}"))
            for i in range(n)]


# -- pipeline ---------------------------------------------------------------------

def test_pipeline_counts_and_coverage(e2e_bundle):
    bundle, _ = e2e_bundle
    assert len(bundle.items) >= 12
    g_levels = {i.g_level for i in bundle.items}
    p_levels = {i.p_level for i in bundle.items}
    assert g_levels == {"G1", "G2", "G3", "G4"}
    assert p_levels == {"P0", "P1", "P2", "P3"}
    assert len(bundle.rubrics) == 10


def test_pipeline_deterministic_hash_across_runs(e2e_workdir, e2e_bundle):
    workdir, script = e2e_workdir
    bundle1, _ = e2e_bundle
    bundle2 = run_pipeline(make_config(workdir, "second_run"),
                           stub_gateway(script))
    assert bundle1.bundle_hash == bundle2.bundle_hash


def test_variant_invariants_in_bundle(e2e_bundle):
    bundle, _ = e2e_bundle
    by_id = {i.item_id: i for i in bundle.items}
    for item in bundle.items:
        if item.p_level == "P0":
            assert item.parent_item_id is None
            continue
        parent = by_id[item.parent_item_id]
        assert item.nucleus.nucleus_hash == parent.nucleus.nucleus_hash
        assert item.rubric_id == parent.rubric_id


def test_item_provenance_in_frozen_corpus(e2e_bundle):
    bundle, _ = e2e_bundle
    doc_ids = set(bundle.corpus.doc_ids())
    for item in bundle.items:
        assert item.provenance
        for prov in item.provenance:
            if "doc_id" in prov and prov["doc_id"]:
                assert prov["doc_id"] in doc_ids


def test_stage_toggle_disables_perturbation(e2e_workdir):
    workdir, script = e2e_workdir
    config = make_config(workdir, "p0_only")
    config.stages = {"perturbations": False}
    bundle = run_pipeline(config, stub_gateway(script))
    assert {i.p_level for i in bundle.items} == {"P0"}


def test_crash_resume_matches_uninterrupted(e2e_workdir, e2e_bundle):
    workdir, script = e2e_workdir
    uninterrupted, _ = e2e_bundle

    crashing = []
    for rule in script:
        rule = dict(rule)
        if rule.get("contains") == '"item_id": "g3-0001", "snippets"':
            rule["fail_times"] = 99
        crashing.append(rule)
    config = make_config(workdir, "resumed_run")
    gateway = stub_gateway(crashing)
    gateway.max_retries = 0
    gateway.backoff_base = 0.0
    from guidebench.gateway import TransportError
    with pytest.raises(TransportError):
        run_pipeline(config, gateway)
    # partial artifacts retained: earlier stages and per-item rubrics
    assert (workdir / "resumed_run" / "items" / "_complete.json").exists()
    per_item = list((workdir / "resumed_run" / "rubrics" / "per_item").glob("*.json"))
    assert per_item  # completed rubrics survived the crash

    resumed = run_pipeline(config, stub_gateway(script))
    assert resumed.bundle_hash == uninterrupted.bundle_hash


# -- evaluation --------------------------------------------------------------------

def echo_candidate_rules(bundle):
    rules = []
    rubric_by_id = {r.rubric_id: r for r in bundle.rubrics}
    for item in bundle.items:
        rubric = rubric_by_id[item.rubric_id]
        echo = ". ".join(e.text for e in rubric.positives) + "."
        rules.append({"role": "candidate", "contains": item.stem[:60],
                      "response": echo})
    return rules


FULL_CREDIT_JUDGES = [
    {"role": "judge", "contains": '"polarity": "negative"',
     "response_json": {"hit": False}},
    {"role": "judge", "response_json": {"hit": True}},
]


def test_candidate_echoing_positives_scores_one(e2e_bundle, tmp_path):
    bundle, _ = e2e_bundle
    candidate = stub_gateway(echo_candidate_rules(bundle), provider_id="cand")
    judges = judges_from(FULL_CREDIT_JUDGES)
    results = evaluate_candidate(bundle, candidate, judges, ScoreConfig(),
                                 out_dir=tmp_path)
    assert len(results) == len(bundle.items)
    assert all(r.answered for r in results)
    assert all(r.s_final == 1.0 for r in results)


def test_candidate_empty_strings_scores_zero_answered(e2e_bundle):
    bundle, _ = e2e_bundle
    candidate = stub_gateway([{"role": "candidate", "response": ""}])
    judges = judges_from(FULL_CREDIT_JUDGES)
    results = evaluate_candidate(bundle, candidate, judges, ScoreConfig())
    assert all(r.answered for r in results)
    assert all(r.s_final == 0.0 for r in results)


def test_candidate_failure_marked_unanswered(e2e_bundle):
    bundle, _ = e2e_bundle
    # a P2 stem strictly extends its parent, so its full text is unique
    victim = next(i for i in bundle.items if i.p_level == "P2")
    rules = [{"role": "candidate", "contains": victim.stem, "fail_times": 99}]
    rules += echo_candidate_rules(bundle)
    candidate = stub_gateway(rules, provider_id="cand")
    candidate.max_retries = 0
    candidate.backoff_base = 0.0
    judges = judges_from(FULL_CREDIT_JUDGES)
    results = evaluate_candidate(bundle, candidate, judges, ScoreConfig())
    unanswered = [r for r in results if not r.answered]
    assert len(unanswered) == 1
    assert unanswered[0].s_final == 0.0
    assert unanswered[0].item_id == victim.item_id


def test_hand_scored_expectations_for_mixed_judges(e2e_bundle, tmp_path):
    """Judges hit A1/A2, miss A3, trigger nothing; responses echo element
    texts so no relevance flags fire. Expected scores computed by hand:
    items with an A1 element score (1.0 + 0.5) / 1.75, the no-A1 item
    scores 0.5 / 0.75."""
    bundle, script = e2e_bundle
    candidate = stub_gateway(echo_candidate_rules(bundle), provider_id="cand")
    judges = judges_from(script)  # script judges: A3 missed, negatives safe
    results = evaluate_candidate(bundle, candidate, judges, ScoreConfig(),
                                 out_dir=tmp_path)
    by_id = {r.item_id: r for r in results}
    for item in bundle.items:
        expected = (0.5 / 0.75) if item.rubric_id == "rub-g2-0002" else (1.5 / 1.75)
        assert by_id[item.item_id].s_final == pytest.approx(expected, abs=1e-9), \
            item.item_id


# -- axis aggregation -----------------------------------------------------------------

def mini_bundle(items, rubrics):
    return SimpleNamespace(items=items, rubrics=rubrics)


def simple_rubric(item_id, positives, negatives):
    pos = [RubricElement(element_id=f"A{t}-{i}", polarity="positive",
                         tier=f"A{t}", text=f"p{i}", citations=[{}])
           for i, t in enumerate(positives, 1)]
    neg = [RubricElement(element_id=f"S{t}-{i}", polarity="negative",
                         tier=f"S{t}", text=f"n{i}", citations=[{}])
           for i, t in enumerate(negatives, 1)]
    return Rubric(rubric_id=f"rub-{item_id}", item_id=item_id,
                  positives=pos, negatives=neg)


def p0(item_id, g):
    return Item(item_id=item_id, g_level=g, p_level="P0", stem="s",
                nucleus=ItemNucleus(entities=["e"]), rubric_id=f"rub-{item_id}")


def variant(parent, p):
    return Item(item_id=f"{parent.item_id}:{p}", g_level=parent.g_level,
                p_level=p, stem="s variant", nucleus=parent.nucleus,
                parent_item_id=parent.item_id, rubric_id=parent.rubric_id)


def result(item_id, s_final, h=None, g=None, answered=True):
    return ScoreBreakdown(item_id=item_id, s_final=s_final, h=h or {},
                          g=g or {}, answered=answered)


def test_single_item_bundle_mean(e2e_bundle):
    item = p0("x1", "G2")
    rubric = simple_rubric("x1", [1], [])
    report = aggregate_axes([result("x1", 0.731, h={"A1-1": 1})],
                            mini_bundle([item], [rubric]))
    assert report.grounding == {"G2": {"mean_s_final": 0.731, "n": 1,
                                       "n_unanswered": 0}}


def test_eight_item_fixture_matches_spreadsheet_oracle():
    """Constructed fixture with known hits; expected cells hand-computed."""
    items, rubrics, results = [], [], []
    # G1: two P0 items, rubric A1+A2, S2
    for n, (hits, trig, score) in enumerate(
            [({"A1-1": 1, "A2-2": 1}, {"S2-1": 0}, 0.9),
             ({"A1-1": 1, "A2-2": 0}, {"S2-1": 1}, 0.5)], 1):
        item = p0(f"g1-{n}", "G1")
        items.append(item)
        rubrics.append(simple_rubric(item.item_id, [1, 2], [2]))
        results.append(result(item.item_id, score, hits, trig))
    # G3: one P0 and one P3 variant pair with the published-style delta
    g3 = p0("g3-1", "G3")
    g3v = variant(g3, "P3")
    items += [g3, g3v]
    rubrics.append(simple_rubric("g3-1", [1], [4]))
    results.append(result("g3-1", 0.62, {"A1-1": 1}, {"S4-1": 0}))
    results.append(result("g3-1:P3", 0.33, {"A1-1": 1}, {"S4-1": 1}))
    # G4: one P0 + P1 pair, one unanswered P0
    g4 = p0("g4-1", "G4")
    g4v = variant(g4, "P1")
    g4b = p0("g4-2", "G4")
    items += [g4, g4v, g4b]
    rubrics.append(simple_rubric("g4-1", [1], []))
    rubrics.append(simple_rubric("g4-2", [1], []))
    results.append(result("g4-1", 0.8, {"A1-1": 1}, {}))
    results.append(result("g4-1:P1", 0.6, {"A1-1": 1}, {}))
    results.append(result("g4-2", 0.0, answered=False))
    # G2 singleton to fill all four levels
    g2 = p0("g2-1", "G2")
    items.append(g2)
    rubrics.append(simple_rubric("g2-1", [1], []))
    results.append(result("g2-1", 0.4, {"A1-1": 0}, {}))

    report = aggregate_axes(results, mini_bundle(items, rubrics))

    # grounding means over P0 items (unanswered counted as zero)
    assert report.grounding["G1"] == {"mean_s_final": 0.7, "n": 2,
                                      "n_unanswered": 0}
    assert report.grounding["G3"] == {"mean_s_final": 0.62, "n": 1,
                                      "n_unanswered": 0}
    assert report.grounding["G4"] == {"mean_s_final": 0.4, "n": 2,
                                      "n_unanswered": 1}
    # adequacy hit rates: G1/A1 hits [1, 1] -> 1.0; G1/A2 hits [1, 0] -> 0.5
    assert report.adequacy["G1/A1"] == {"hit_rate": 1.0, "hits": 2, "total": 2}
    assert report.adequacy["G1/A2"] == {"hit_rate": 0.5, "hits": 1, "total": 2}
    # unanswered g4-2 excluded from denominators: G4/A1 over g4-1 and g4-1:P1
    assert report.adequacy["G4/A1"] == {"hit_rate": 1.0, "hits": 2, "total": 2}
    # safety trigger rates: G1/S2 triggers [0, 1] -> 0.5; G3/S4 [0, 1] -> 0.5
    assert report.safety["G1/S2"] == {"trigger_rate": 0.5, "triggers": 1,
                                      "total": 2}
    assert report.safety["G3/S4"] == {"trigger_rate": 0.5, "triggers": 1,
                                      "total": 2}
    # perturbation deltas: published-style G3 pair 0.62 -> 0.33
    assert report.perturbation["G3/P3"] == {"mean_delta": 0.29, "n_pairs": 1}
    assert report.perturbation["G4/P1"] == {"mean_delta": pytest.approx(0.2),
                                            "n_pairs": 1}
    # empty cells are absent, never zero
    assert "G2/P1" not in report.perturbation
    # conservation: per-cell counts sum to the result count
    assert sum(report.counts.values()) == len(results)


def test_report_recomputation_from_persisted_files(e2e_bundle, tmp_path):
    bundle, script = e2e_bundle
    candidate = stub_gateway(echo_candidate_rules(bundle), provider_id="cand")
    judges = judges_from(script)
    results = evaluate_candidate(bundle, candidate, judges, ScoreConfig(),
                                 out_dir=tmp_path)
    live = aggregate_axes(results, bundle)
    recomputed = aggregate_axes(load_results(tmp_path), bundle)
    assert canonical_json(live.to_dict()) == canonical_json(recomputed.to_dict())


def test_dataset_stats_empty_and_known():
    assert dataset_stats(mini_bundle([], [])) == {}
    items, rubrics = [], []
    spec = [("a", "G1", [1, 2], [2]), ("b", "G1", [1], []),
            ("c", "G2", [1, 1, 2], [3, 4]), ("d", "G3", [1], [4]),
            ("e", "G4", [2], []), ("f", "G4", [1, 3], [2, 3, 4])]
    for item_id, g, pos, neg in spec:
        items.append(p0(item_id, g))
        rubrics.append(simple_rubric(item_id, pos, neg))
    stats = dataset_stats(mini_bundle(items, rubrics))
    assert stats["G1"] == {"count": 2, "mean_adequacy": 1.5, "mean_safety": 0.5}
    assert stats["G2"] == {"count": 1, "mean_adequacy": 3.0, "mean_safety": 2.0}
    assert stats["G4"] == {"count": 2, "mean_adequacy": 1.5, "mean_safety": 1.5}


def test_dataset_stats_on_pipeline_bundle(e2e_bundle):
    bundle, _ = e2e_bundle
    stats = dataset_stats(bundle)
    assert stats["G1"]["count"] == 6
    assert stats["G2"]["count"] == 2
    assert stats["G2"]["mean_adequacy"] == pytest.approx((3 + 2) / 2)
    assert stats["G3"] == {"count": 1, "mean_adequacy": 3.0, "mean_safety": 3.0}


# -- CLI --------------------------------------------------------------------------

def test_cli_corpus_roundtrip(tmp_path, capsys):
    from fixtures.e2e import citation_fixture_text

    graph_file = tmp_path / "citations.txt"
    graph_file.write_text(citation_fixture_text())
    manifest = tmp_path / "manifest.jsonl"
    assert cli.main(["corpus", "assemble", "--anchor", "anchor-guideline",
                     "--k", "2", "--graph", str(graph_file),
                     "--manifest", str(manifest)]) == 0
    assert cli.main(["corpus", "freeze", "--manifest", str(manifest),
                     "--graph", str(graph_file),
                     "--store", str(tmp_path / "store")]) == 0
    assert cli.main(["corpus", "verify", "--manifest", str(manifest),
                     "--graph", str(graph_file)]) == 0
    out = capsys.readouterr().out
    assert '"ok":true' in out


def test_cli_tree_build(tmp_path, capsys):
    import shutil
    from fixtures.e2e import FIXTURES

    doc = tmp_path / "document.json"
    shutil.copy(FIXTURES / "document.json", doc)
    tree_out = tmp_path / "tree.json"
    assert cli.main(["tree", "build", "--doc", str(doc),
                     "--tree-out", str(tree_out)]) == 0
    saved = json.loads(tree_out.read_text())
    assert saved["schema_version"] == "doc-tree/1"
    assert len(saved["nodes"]) == 8


def test_cli_eval_run_with_config_and_stub(tmp_path, capsys, e2e_workdir):
    workdir, script = e2e_workdir
    stub_file = tmp_path / "stub.json"
    stub_file.write_text(json.dumps(script))
    config = make_config(workdir, "cli_run")
    config_file = tmp_path / "config.json"
    config_file.write_text(json.dumps(config.to_dict()))
    assert cli.main(["--config", str(config_file), "--stub", str(stub_file),
                     "eval", "run"]) == 0
    out = capsys.readouterr().out
    assert "bundle_hash" in out


def test_cli_stats_and_rubric_stats(tmp_path, capsys, e2e_workdir, e2e_bundle):
    workdir, script = e2e_workdir
    bundle, _ = e2e_bundle
    stub_file = tmp_path / "stub.json"
    stub_file.write_text(json.dumps(script))
    config = make_config(workdir, "cli_stats_run")
    config_file = tmp_path / "config.json"
    config_file.write_text(json.dumps(config.to_dict()))
    assert cli.main(["--config", str(config_file), "--stub", str(stub_file),
                     "stats"]) == 0
    assert '"G1"' in capsys.readouterr().out

    from guidebench.items import save_items
    from guidebench.rubric import save_rubrics
    items_file = tmp_path / "items.jsonl"
    rubrics_file = tmp_path / "rubrics.jsonl"
    save_items([i for i in bundle.items if i.p_level == "P0"], items_file)
    save_rubrics(bundle.rubrics, rubrics_file)
    assert cli.main(["rubric", "stats", "--rubrics", str(rubrics_file),
                     "--items", str(items_file)]) == 0
    assert '"A1"' in capsys.readouterr().out
