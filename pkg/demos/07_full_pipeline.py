"""End-to-end offline run: pipeline, candidate evaluation, axis report.

Uses the same fixture document and scripted model responses as the test
suite (everything offline; any unscripted model call would raise). Prints
the bundle composition, per-axis cells, and the deterministic bundle hash.
"""

import sys
import tempfile
from collections import Counter
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "tests"))

from fixtures.e2e import build_full_script, make_config  # noqa: E402

from guidebench.gateway import Gateway, StubProvider, stub_gateway  # noqa: E402
from guidebench.harness import (aggregate_axes, dataset_stats,  # noqa: E402
                                evaluate_candidate, run_pipeline)
from guidebench.scoring import ScoreConfig  # noqa: E402

with tempfile.TemporaryDirectory() as td:
    workdir = Path(td)
    script = build_full_script(workdir)
    config = make_config(workdir, "demo_run")
    bundle = run_pipeline(config, stub_gateway(script))

    print(f"Bundle hash: {bundle.bundle_hash}")
    print(f"Items: {len(bundle.items)}, rubrics: {len(bundle.rubrics)}")
    print("Composition (grounding level, perturbation level):")
    for (g, p), n in sorted(Counter((i.g_level, i.p_level)
                                    for i in bundle.items).items()):
        print(f"  {g}/{p}: {n}")

    print("\nDataset statistics:")
    for g, cell in dataset_stats(bundle).items():
        print(f"  {g}: {cell}")

    candidate = stub_gateway(script, provider_id="candidate")
    judges = [Gateway(provider=StubProvider(script, provider_id=f"judge{i}"))
              for i in range(3)]
    results = evaluate_candidate(bundle, candidate, judges, ScoreConfig(),
                                 out_dir=workdir / "eval")
    report = aggregate_axes(results, bundle)

    print("\nGrounding axis (mean final score on clean items):")
    for g, cell in report.grounding.items():
        print(f"  {g}: {cell['mean_s_final']} over {cell['n']} items")
    print("\nAdequacy hit rates:")
    for key, cell in report.adequacy.items():
        print(f"  {key}: {cell['hit_rate']}")
    print("\nPerturbation deltas vs clean baseline:")
    for key, cell in report.perturbation.items():
        print(f"  {key}: {cell['mean_delta']} over {cell['n_pairs']} pairs")
