"""Assemble and freeze a bounded evidence neighborhood.

Walks backward citations from an anchor document out to k hops over a local
citation-graph fixture, freezes the contents into a content-addressed store,
and verifies the manifest. Run twice and the manifest bytes are identical.
"""

import tempfile
from pathlib import Path

from guidebench.corpus import (ContentStore, FixtureCitationProvider,
                               assemble_neighborhood, freeze, save_manifest,
                               verify_manifest)

GRAPH = """\
[edges]
GUIDE -> TRIAL-A
GUIDE -> REVIEW-B
TRIAL-A -> COHORT-C
REVIEW-B -> COHORT-C
COHORT-C -> LEGACY-D
[metadata]
GUIDE\t{"title": "Anchor guideline", "pub_type": "guideline"}
TRIAL-A\t{"title": "Pivotal trial", "pub_type": "randomized trial"}
REVIEW-B\t{"title": "Systematic review", "pub_type": "systematic review"}
COHORT-C\t{"title": "Cohort study", "pub_type": "cohort"}
LEGACY-D\t{"title": "Legacy series", "pub_type": "case series"}
[content]
GUIDE\tThe guideline recommends surveillance intervals by nodule size.
TRIAL-A\tTrial of surveillance versus early resection.
REVIEW-B\tReview of nodule management strategies.
COHORT-C\tCohort outcomes for small nodules.
LEGACY-D\tHistorical case series.
"""

with tempfile.TemporaryDirectory() as td:
    workdir = Path(td)
    (workdir / "citations.txt").write_text(GRAPH)
    provider = FixtureCitationProvider(workdir / "citations.txt")

    manifest = assemble_neighborhood("GUIDE", 2, provider)
    print("Neighborhood at k=2 (depth: documents):")
    for record in manifest.records:
        print(f"  depth {record.depth}: {record.doc_id:9s}"
              f"  path {' -> '.join(record.citation_path)}")
    # LEGACY-D sits three hops out, so it is excluded by the bound.
    assert all(r.doc_id != "LEGACY-D" for r in manifest.records)

    frozen = freeze(manifest, ContentStore(workdir / "store"),
                    fetch=lambda r: provider.content_of(r.doc_id))
    print(f"\nFrozen content digest: {manifest.content_digest}")
    print(f"Anchor text: {frozen.content_of('GUIDE')!r}")

    save_manifest(manifest, workdir / "manifest.jsonl")
    report = verify_manifest(manifest, provider)
    print(f"Manifest verification findings: {report.findings or 'none'}")
