"""Evidence-neighborhood assembly and freezing.

Builds the bounded document set reachable from an anchor guideline by
traversing backward citations up to k hops, assigns each document its
minimum hop depth with a deterministic shortest citation path, and freezes
contents immutably so every later stage operates on one reproducible corpus.
"""

from __future__ import annotations

import datetime as _dt
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Protocol

from .canonical import canonical_json, sha256_hex

MANIFEST_SCHEMA = "corpus-manifest/1"


class CorpusError(Exception):
    pass


class UnknownDocumentError(CorpusError):
    """Raised by providers for identifiers they cannot resolve."""


@dataclass
class DocRecord:
    doc_id: str
    depth: int
    citation_path: list[str]
    metadata: dict
    content_ref: dict | None = None
    metadata_only: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DocRecord":
        return DocRecord(**d)


@dataclass
class CorpusManifest:
    anchor_id: str
    k: int
    records: list[DocRecord]
    frozen_at: str | None = None
    content_digest: str | None = None
    anomalies: list[dict] = field(default_factory=list)

    def record_index(self) -> dict[str, DocRecord]:
        return {r.doc_id: r for r in self.records}


class CitationProvider(Protocol):
    def references_of(self, doc_id: str) -> list[str]: ...

    def metadata_of(self, doc_id: str) -> dict: ...


class FixtureCitationProvider:
    """Citation provider backed by a local graph file.

    File format (line-oriented, '#' comments ignored):

        [edges]
        CITING_ID -> CITED_ID
        [metadata]
        DOC_ID <tab> {"title": ..., "year": ..., "venue": ..., "pub_type": ...}
        [content]
        DOC_ID <tab> abstract or full text on one line

    Documents appearing only as edge endpoints resolve with empty metadata.
    """

    def __init__(self, path: str | Path | None = None, *,
                 edges: list[tuple[str, str]] | None = None,
                 metadata: dict[str, dict] | None = None,
                 content: dict[str, str] | None = None):
        self._refs: dict[str, list[str]] = {}
        self._meta: dict[str, dict] = dict(metadata or {})
        self._content: dict[str, str] = dict(content or {})
        self.forward_calls = 0  # instrumented: must stay 0 during assembly
        if path is not None:
            self._load(Path(path))
        for citer, cited in edges or []:
            self._refs.setdefault(citer, []).append(cited)
        self._known = set(self._refs) | self._meta.keys() | self._content.keys()
        for cited_list in self._refs.values():
            self._known.update(cited_list)

    def _load(self, path: Path) -> None:
        section = "edges"
        for raw in path.read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].lower()
                continue
            if section == "edges":
                if "->" not in line:
                    raise CorpusError(f"bad edge line in {path}: {raw!r}")
                citer, cited = (part.strip() for part in line.split("->", 1))
                self._refs.setdefault(citer, []).append(cited)
            elif section == "metadata":
                doc_id, payload = raw.split("\t", 1)
                self._meta[doc_id.strip()] = json.loads(payload)
            elif section == "content":
                doc_id, text = raw.split("\t", 1)
                self._content[doc_id.strip()] = text
            else:
                raise CorpusError(f"unknown section [{section}] in {path}")

    def references_of(self, doc_id: str) -> list[str]:
        if doc_id not in self._known:
            raise UnknownDocumentError(doc_id)
        return list(self._refs.get(doc_id, []))

    def metadata_of(self, doc_id: str) -> dict:
        if doc_id not in self._known:
            raise UnknownDocumentError(doc_id)
        return dict(self._meta.get(doc_id, {}))

    def content_of(self, doc_id: str) -> str:
        if doc_id not in self._content:
            raise UnknownDocumentError(doc_id)
        return self._content[doc_id]

    def cited_by_of(self, doc_id: str) -> list[str]:
        """Forward citations. Assembly must never call this."""
        self.forward_calls += 1
        return [citer for citer, cited in self._iter_edges() if cited == doc_id]

    def _iter_edges(self):
        for citer, cited_list in self._refs.items():
            for cited in cited_list:
                yield citer, cited


class EUtilitiesProvider:
    """PubMed-style citation provider over NCBI E-utilities REST endpoints.

    Responses are cached for the lifetime of the provider so one assembly
    run sees a stable snapshot. The API key is read from the environment
    variable named at construction and is never logged or serialized.
    """

    BASE = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils"

    def __init__(self, api_key_env: str = "NCBI_API_KEY", timeout: float = 30.0):
        self.api_key_env = api_key_env
        self.timeout = timeout
        self._ref_cache: dict[str, list[str]] = {}
        self._meta_cache: dict[str, dict] = {}
        self._lock = threading.Lock()

    def _params(self, **kw) -> dict:
        import os

        params = dict(kw)
        key = os.environ.get(self.api_key_env)
        if key:
            params["api_key"] = key
        return params

    def references_of(self, doc_id: str) -> list[str]:
        with self._lock:
            if doc_id in self._ref_cache:
                return list(self._ref_cache[doc_id])
        import requests

        resp = requests.get(
            f"{self.BASE}/elink.fcgi",
            params=self._params(dbfrom="pubmed", linkname="pubmed_pubmed_refs",
                                id=doc_id, retmode="json"),
            timeout=self.timeout,
        )
        if resp.status_code != 200:
            raise UnknownDocumentError(doc_id)
        refs: list[str] = []
        for linkset in resp.json().get("linksets", []):
            for db in linkset.get("linksetdbs", []):
                if db.get("linkname") == "pubmed_pubmed_refs":
                    refs.extend(str(x) for x in db.get("links", []))
        with self._lock:
            self._ref_cache[doc_id] = refs
        return list(refs)

    def metadata_of(self, doc_id: str) -> dict:
        with self._lock:
            if doc_id in self._meta_cache:
                return dict(self._meta_cache[doc_id])
        import requests

        resp = requests.get(
            f"{self.BASE}/esummary.fcgi",
            params=self._params(db="pubmed", id=doc_id, retmode="json"),
            timeout=self.timeout,
        )
        if resp.status_code != 200:
            raise UnknownDocumentError(doc_id)
        result = resp.json().get("result", {}).get(doc_id)
        if not result:
            raise UnknownDocumentError(doc_id)
        meta = {
            "title": result.get("title", ""),
            "year": (result.get("pubdate", "") or "")[:4],
            "venue": result.get("fulljournalname", ""),
            "ids": {"pmid": doc_id},
        }
        with self._lock:
            self._meta_cache[doc_id] = meta
        return dict(meta)


def assemble_neighborhood(anchor_id: str, k: int, provider: CitationProvider,
                          max_workers: int = 4) -> CorpusManifest:
    """Breadth-first traversal over backward citations only.

    Each document gets the minimum depth at which it is reachable; among
    equal-depth paths the lexicographically smallest citation path is kept
    so the manifest is a pure function of the citation graph. Reference
    fetches for a frontier run concurrently, but results are merged after
    sorting, so parallelism cannot perturb the output. Unresolvable
    references are skipped and logged; an unresolvable anchor is fatal.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    try:
        anchor_meta = provider.metadata_of(anchor_id)
    except UnknownDocumentError as exc:
        raise CorpusError(f"anchor {anchor_id!r} unresolvable") from exc

    anomalies: list[dict] = []
    records: dict[str, DocRecord] = {
        anchor_id: DocRecord(doc_id=anchor_id, depth=0, citation_path=[anchor_id],
                             metadata=anchor_meta,
                             content_ref={"kind": "provider", "locator": anchor_id})
    }
    frontier = [anchor_id]
    for depth in range(1, k + 1):
        if not frontier:
            break
        # Parents ordered by citation path: the first parent to discover a
        # child therefore supplies the lexicographically smallest path.
        parents = sorted(frontier, key=lambda d: records[d].citation_path)

        def fetch(doc_id: str):
            try:
                return doc_id, provider.references_of(doc_id), None
            except UnknownDocumentError as exc:
                return doc_id, [], exc

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            fetched = dict()
            for doc_id, refs, err in pool.map(fetch, parents):
                fetched[doc_id] = (refs, err)

        next_frontier: list[str] = []
        for parent in parents:
            refs, err = fetched[parent]
            if err is not None:
                anomalies.append({"kind": "references_unavailable", "doc_id": parent})
                continue
            for cited in sorted(set(refs)):
                if cited in records:
                    continue  # visited-set: min depth already assigned
                try:
                    meta = provider.metadata_of(cited)
                except UnknownDocumentError:
                    anomalies.append({"kind": "unresolvable_reference",
                                      "doc_id": cited, "cited_by": parent})
                    continue
                records[cited] = DocRecord(
                    doc_id=cited, depth=depth,
                    citation_path=records[parent].citation_path + [cited],
                    metadata=meta,
                    content_ref={"kind": "provider", "locator": cited},
                )
                next_frontier.append(cited)
        frontier = next_frontier

    ordered = sorted(records.values(), key=lambda r: (r.depth, r.doc_id))
    return CorpusManifest(anchor_id=anchor_id, k=k, records=ordered,
                          anomalies=anomalies)


class ContentStore:
    """Content-addressed immutable text store (sha256 keys)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, text: str) -> str:
        key = "sha256:" + sha256_hex(text)
        path = self._path(key)
        if path.exists():
            if path.read_text() != text:
                raise CorpusError(f"store corruption: {key} exists with different bytes")
            return key
        tmp = path.with_suffix(".tmp")
        tmp.write_text(text)
        tmp.replace(path)
        return key

    def get(self, key: str) -> str:
        path = self._path(key)
        if not path.exists():
            raise KeyError(key)
        return path.read_text()

    def _path(self, key: str) -> Path:
        return self.root / (key.replace(":", "_") + ".txt")


@dataclass
class FrozenCorpus:
    manifest: CorpusManifest
    store: ContentStore

    def content_of(self, doc_id: str) -> str:
        record = self.manifest.record_index()[doc_id]
        if record.metadata_only or record.content_ref is None:
            raise KeyError(f"{doc_id} frozen metadata-only")
        return self.store.get(record.content_ref["locator"])

    def doc_ids(self) -> list[str]:
        return [r.doc_id for r in self.manifest.records]


def freeze(manifest: CorpusManifest, store: ContentStore,
           fetch: Callable[[DocRecord], str] | None = None,
           frozen_at: str | None = None) -> FrozenCorpus:
    """Persist record contents immutably and stamp the manifest digest.

    `fetch` resolves each record's content (defaults to the provider-style
    locator being a key already in the store). A failing fetch marks the
    record metadata-only and logs an anomaly instead of aborting. When no
    timestamp is supplied the fixed epoch stamp is used so that re-freezing
    identical inputs is byte-identical; callers wanting wall-clock
    provenance pass `frozen_at` explicitly.
    """
    pairs: list[tuple[str, str]] = []
    for record in manifest.records:
        text: str | None = None
        if fetch is not None:
            try:
                text = fetch(record)
            except Exception:
                text = None
        elif record.content_ref and record.content_ref.get("kind") == "store":
            try:
                text = store.get(record.content_ref["locator"])
            except KeyError:
                text = None
        if text is None:
            record.metadata_only = True
            record.content_ref = None
            manifest.anomalies.append({"kind": "content_unavailable",
                                       "doc_id": record.doc_id})
            continue
        key = store.put(text)
        record.content_ref = {"kind": "store", "locator": key}
        record.metadata_only = False
        pairs.append((record.doc_id, key))

    manifest.content_digest = "sha256:" + sha256_hex(canonical_json(pairs))
    manifest.frozen_at = frozen_at or "1970-01-01T00:00:00+00:00"
    return FrozenCorpus(manifest=manifest, store=store)


def now_utc() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


@dataclass
class ValidationReport:
    findings: list[dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings


def verify_manifest(manifest: CorpusManifest,
                    provider: CitationProvider) -> ValidationReport:
    """Report depth-bound violations, broken path edges and duplicate ids."""
    report = ValidationReport()
    seen: set[str] = set()
    for record in manifest.records:
        if record.doc_id in seen:
            report.findings.append({"kind": "duplicate_doc_id", "doc_id": record.doc_id})
        seen.add(record.doc_id)
        if record.depth > manifest.k:
            report.findings.append({"kind": "depth_bound", "doc_id": record.doc_id,
                                    "depth": record.depth, "k": manifest.k})
        path = record.citation_path
        if not path or path[0] != manifest.anchor_id or len(path) != record.depth + 1:
            report.findings.append({"kind": "bad_path_shape", "doc_id": record.doc_id,
                                    "path": list(path)})
            continue
        for citer, cited in zip(path, path[1:]):
            try:
                refs = provider.references_of(citer)
            except UnknownDocumentError:
                refs = []
            if cited not in refs:
                report.findings.append({"kind": "broken_edge", "doc_id": record.doc_id,
                                        "edge": [citer, cited]})
    return report


# -- persistence --------------------------------------------------------

def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    """Header line plus one record per line, ordered by (depth, doc_id)."""
    header = {
        "schema": MANIFEST_SCHEMA,
        "anchor_id": manifest.anchor_id,
        "k": manifest.k,
        "frozen_at": manifest.frozen_at,
        "content_digest": manifest.content_digest,
        "record_count": len(manifest.records),
        "anomalies": manifest.anomalies,
    }
    lines = [canonical_json(header)]
    lines.extend(canonical_json(r.to_dict()) for r in manifest.records)
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> CorpusManifest:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise CorpusError(f"empty manifest file {path}")
    header = json.loads(lines[0])
    if header.get("schema") != MANIFEST_SCHEMA:
        raise CorpusError(f"unsupported manifest schema {header.get('schema')!r}")
    records = [DocRecord.from_dict(json.loads(line)) for line in lines[1:] if line]
    return CorpusManifest(anchor_id=header["anchor_id"], k=header["k"],
                          records=records, frozen_at=header.get("frozen_at"),
                          content_digest=header.get("content_digest"),
                          anomalies=header.get("anomalies", []))
