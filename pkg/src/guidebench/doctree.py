"""Hierarchical topic tree over a normalized document.

Consumes the versioned NormalizedDocument format (the data contract with
the external extractor), recovers a heading tree using outline entries and
styled page text, and resolves intra-document pointers ("see page N",
"see section X", link annotations) to tree nodes. With no model gateway the
build is a pure function of the document, which keeps the tree auditable.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

from .gateway import Gateway, ModelRequest, extract_json

DOCUMENT_SCHEMA = "normalized-document/1"
TREE_SCHEMA = "doc-tree/1"

# Bounded edit-distance title matching: one edit allowed per ten characters.
EDITS_PER_10_CHARS = 1


class DocumentError(Exception):
    pass


class AmbiguousSectionError(DocumentError):
    def __init__(self, path, candidates):
        self.candidates = candidates
        super().__init__(f"section path {path!r} matches {len(candidates)} nodes: "
                         + ", ".join(c.node_id for c in candidates))


@dataclass
class Block:
    span: tuple[int, int]
    kind: str | None = None
    font_size: float | None = None
    bold: bool | None = None


@dataclass
class Page:
    page_no: int
    text: str
    blocks: list[Block] = field(default_factory=list)

    def block_text(self, block: Block) -> str:
        return self.text[block.span[0] : block.span[1]]


@dataclass
class NormalizedDocument:
    doc_id: str
    pages: list[Page]
    outline: list[dict] = field(default_factory=list)  # {level, title, page}
    link_annotations: list[dict] = field(default_factory=list)

    def page(self, page_no: int) -> Page:
        for p in self.pages:
            if p.page_no == page_no:
                return p
        raise KeyError(page_no)

    @property
    def last_page(self) -> int:
        return self.pages[-1].page_no

    @staticmethod
    def from_dict(data: dict) -> "NormalizedDocument":
        version = data.get("schema_version")
        if version != DOCUMENT_SCHEMA:
            raise DocumentError(f"unsupported document schema {version!r}")
        pages = []
        prev_no = 0
        for p in data["pages"]:
            if p["page_no"] <= prev_no:
                raise DocumentError("page numbers must be strictly increasing")
            prev_no = p["page_no"]
            text = p.get("text", "")
            blocks = []
            for b in p.get("blocks", []):
                start, end = b["span"]
                if not (0 <= start <= end <= len(text)):
                    raise DocumentError(
                        f"block span {b['span']} outside page {p['page_no']} bounds")
                blocks.append(Block(span=(start, end), kind=b.get("kind"),
                                    font_size=b.get("font_size"), bold=b.get("bold")))
            pages.append(Page(page_no=p["page_no"], text=text, blocks=blocks))
        return NormalizedDocument(
            doc_id=data["doc_id"], pages=pages,
            outline=list(data.get("outline", [])),
            link_annotations=list(data.get("link_annotations", [])),
        )

    @staticmethod
    def load(path: str | Path) -> "NormalizedDocument":
        return NormalizedDocument.from_dict(json.loads(Path(path).read_text()))


@dataclass
class CrossRef:
    source_node: str
    source_page: int
    span: tuple[int, int]
    kind: str  # page_pointer | section_pointer | link_annotation
    pointer_text: str
    resolved_target: str | None = None
    note: str | None = None


@dataclass
class TreeNode:
    node_id: str
    level: int
    title: str
    page_span: tuple[int, int]
    text_span: dict
    children: list[str] = field(default_factory=list)
    cross_refs: list[CrossRef] = field(default_factory=list)


@dataclass
class DocTree:
    doc_id: str
    root_id: str
    nodes: dict[str, TreeNode]
    order: list[str]  # document (pre) order, root first
    corrections: list[dict] = field(default_factory=list)
    discrepancies: list[dict] = field(default_factory=list)

    @property
    def root(self) -> TreeNode:
        return self.nodes[self.root_id]

    def iter_nodes(self):
        return (self.nodes[node_id] for node_id in self.order)

    def covering_node(self, page: int) -> TreeNode:
        """Deepest node whose page_span covers the page.

        Ties on level break toward the later node in document order: when
        two siblings share a page the one whose content starts there wins.
        """
        best = self.root
        best_key = (-1, -1)
        for idx, node in enumerate(self.iter_nodes()):
            first, last = node.page_span
            if first <= page <= last and (node.level, idx) > best_key:
                best, best_key = node, (node.level, idx)
        return best

    def to_dict(self) -> dict:
        nodes = []
        for node_id in self.order:
            node = asdict(self.nodes[node_id])
            node["page_span"] = list(node["page_span"])
            for ref in node["cross_refs"]:
                ref["span"] = list(ref["span"])
            nodes.append(node)
        return {
            "schema_version": TREE_SCHEMA,
            "doc_id": self.doc_id,
            "root_id": self.root_id,
            "order": list(self.order),
            "nodes": nodes,
            "corrections": self.corrections,
            "discrepancies": self.discrepancies,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @staticmethod
    def from_dict(data: dict) -> "DocTree":
        if data.get("schema_version") != TREE_SCHEMA:
            raise DocumentError(f"unsupported tree schema {data.get('schema_version')!r}")
        nodes = {}
        for nd in data["nodes"]:
            refs = [CrossRef(**{**r, "span": tuple(r["span"])}) for r in nd["cross_refs"]]
            node = TreeNode(node_id=nd["node_id"], level=nd["level"],
                            title=nd["title"], page_span=tuple(nd["page_span"]),
                            text_span=nd["text_span"], children=list(nd["children"]),
                            cross_refs=refs)
            nodes[node.node_id] = node
        return DocTree(doc_id=data["doc_id"], root_id=data["root_id"], nodes=nodes,
                       order=list(data["order"]),
                       corrections=list(data.get("corrections", [])),
                       discrepancies=list(data.get("discrepancies", [])))

    @staticmethod
    def load(path: str | Path) -> "DocTree":
        return DocTree.from_dict(json.loads(Path(path).read_text()))


_NORM_RE = re.compile(r"[^a-z0-9 ]+")


def normalize_title(text: str) -> str:
    return " ".join(_NORM_RE.sub(" ", text.lower()).split())


def edit_distance(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def titles_match(pointer: str, title: str) -> bool:
    np_, nt = normalize_title(pointer), normalize_title(title)
    if np_ == nt:
        return True
    allowed = (len(np_) // 10) * EDITS_PER_10_CHARS
    return allowed > 0 and edit_distance(np_, nt) <= allowed


# -- heading recovery ----------------------------------------------------

@dataclass
class _Heading:
    title: str
    page: int
    order_key: tuple
    level: int | None  # None until inferred
    span_end: int  # offset where the heading text ends on its page (-1: outline-only)
    span_start: int
    source: str  # outline | content | both | gateway


def _body_font_size(doc: NormalizedDocument) -> float | None:
    """Modal font size weighted by text length; ties break to the smaller size."""
    weights: dict[float, int] = {}
    for page in doc.pages:
        for block in page.blocks:
            if block.font_size is None:
                continue
            weights[block.font_size] = weights.get(block.font_size, 0) + (
                block.span[1] - block.span[0])
    if not weights:
        return None
    return sorted(weights.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]


def _is_heading_block(block: Block, body_size: float | None) -> bool:
    if block.kind == "heading":
        return True
    if block.bold and block.font_size is not None:
        return body_size is None or block.font_size > body_size
    return False


def build_tree(doc: NormalizedDocument, gateway: Gateway | None = None) -> DocTree:
    """Recover the heading tree.

    Content-derived headings win over the embedded outline on disagreement;
    outline entries with no styled counterpart are kept as-is. Heading levels
    are corrected so no node skips a level under its parent. A synthetic root
    spans the whole document.
    """
    if not doc.pages:
        raise DocumentError("document has no pages")

    body_size = _body_font_size(doc)
    content: list[_Heading] = []
    for page in doc.pages:
        for block in page.blocks:
            if _is_heading_block(block, body_size):
                content.append(_Heading(
                    title=page.block_text(block).strip(), page=page.page_no,
                    order_key=(page.page_no, 0, block.span[0]), level=None,
                    span_start=block.span[0], span_end=block.span[1],
                    source="content"))

    headings = list(content)
    discrepancies: list[dict] = []
    matched_outline: set[int] = set()
    size_levels: dict[float, int] = {}
    for oi, entry in enumerate(doc.outline):
        hit = None
        for h in headings:
            if h.source in ("content", "both") and normalize_title(h.title) == normalize_title(entry["title"]):
                hit = h
                break
        if hit is not None:
            matched_outline.add(oi)
            hit.level = entry["level"]
            hit.source = "both"
            if hit.page != entry["page"]:
                discrepancies.append({"kind": "outline_page_mismatch",
                                      "title": entry["title"],
                                      "outline_page": entry["page"],
                                      "content_page": hit.page})
        else:
            headings.append(_Heading(title=entry["title"], page=entry["page"],
                                     order_key=(entry["page"], -1, oi),
                                     level=entry["level"], span_start=-1,
                                     span_end=-1, source="outline"))

    # Levels observed on styled, outline-matched headings calibrate the rest.
    for page in doc.pages:
        for block in page.blocks:
            if block.font_size is None:
                continue
            for h in headings:
                if (h.source == "both" and h.page == page.page_no
                        and h.span_start == block.span[0] and h.level is not None):
                    prev = size_levels.get(block.font_size)
                    size_levels[block.font_size] = min(prev, h.level) if prev else h.level

    if gateway is not None:
        headings = _gateway_headings(doc, headings, gateway)

    headings.sort(key=lambda h: h.order_key)
    _infer_levels(doc, headings, size_levels)

    corrections: list[dict] = []
    prev_level = 0
    for h in headings:
        assert h.level is not None
        if h.level > prev_level + 1:
            corrections.append({"kind": "level_skip", "title": h.title,
                                "from": h.level, "to": prev_level + 1})
            h.level = prev_level + 1
        prev_level = h.level

    return _assemble(doc, headings, corrections, discrepancies)


def _infer_levels(doc: NormalizedDocument, headings: list[_Heading],
                  size_levels: dict[float, int]) -> None:
    block_sizes = {}
    for page in doc.pages:
        for block in page.blocks:
            block_sizes[(page.page_no, block.span[0])] = block.font_size
    if not size_levels:
        sizes = sorted({s for s in block_sizes.values() if s is not None}, reverse=True)
        fallback = {size: i + 1 for i, size in enumerate(sizes)}
    else:
        fallback = {}
    prev = 1
    for h in headings:
        if h.level is not None:
            prev = h.level
            continue
        size = block_sizes.get((h.page, h.span_start))
        if size is not None and size in size_levels:
            h.level = size_levels[size]
        elif size is not None and size_levels:
            # Sizes outside the calibrated range nest one step deeper or
            # shallower than the nearest calibrated level.
            smallest, largest = min(size_levels), max(size_levels)
            if size < smallest:
                h.level = size_levels[smallest] + 1
            elif size > largest:
                h.level = max(1, size_levels[largest] - 1)
            else:
                nearest = sorted(size_levels, key=lambda s: (abs(s - size), -s))[0]
                h.level = size_levels[nearest]
        elif size is not None and fallback:
            h.level = fallback[size]
        else:
            h.level = prev
        prev = h.level


def _gateway_headings(doc: NormalizedDocument, headings: list[_Heading],
                      gateway: Gateway) -> list[_Heading]:
    """Ask the model for headings the heuristics missed.

    Proposals are advisory: acceptance requires a block on the named page
    whose text matches the proposed title, so the tree stays span-grounded.
    """
    known = [{"title": h.title, "page": h.page} for h in headings]
    request = ModelRequest(role_tag="extraction", parts={
        "system": "Identify section headings missing from the provided list. "
                  "Reply with JSON {\"headings\": [{\"title\", \"page\", \"level\"}]}.",
        "user": json.dumps({"doc_id": doc.doc_id, "known": known}, sort_keys=True),
    })
    try:
        payload = extract_json(gateway.complete(request).text) or {}
    except Exception:
        return headings
    existing = {(normalize_title(h.title), h.page) for h in headings}
    for prop in payload.get("headings", []):
        title, page_no = str(prop.get("title", "")), prop.get("page")
        if not title or (normalize_title(title), page_no) in existing:
            continue
        try:
            page = doc.page(page_no)
        except KeyError:
            continue
        for block in page.blocks:
            if normalize_title(page.block_text(block)) == normalize_title(title):
                headings.append(_Heading(
                    title=page.block_text(block).strip(), page=page_no,
                    order_key=(page_no, 0, block.span[0]),
                    level=int(prop["level"]) if "level" in prop else None,
                    span_start=block.span[0], span_end=block.span[1],
                    source="gateway"))
                break
    return headings


def _assemble(doc: NormalizedDocument, headings: list[_Heading],
              corrections: list[dict], discrepancies: list[dict]) -> DocTree:
    first_page, last_page = doc.pages[0].page_no, doc.last_page
    root = TreeNode(node_id="root", level=0, title=doc.doc_id,
                    page_span=(first_page, last_page),
                    text_span={"start_page": first_page, "start_offset": 0,
                               "end_page": last_page,
                               "end_offset": len(doc.pages[-1].text)})
    nodes = {"root": root}
    order = ["root"]
    stack: list[TreeNode] = [root]

    for i, h in enumerate(headings):
        node_id = f"n{i + 1:04d}"
        nxt = next((g for g in headings[i + 1:] if g.level <= h.level), None)
        page_end = last_page if nxt is None else max(h.page, nxt.page - 1)
        after = headings[i + 1] if i + 1 < len(headings) else None
        # Clip to the page span: when the next heading opens a later page,
        # the node's text may not leak past its own last page.
        if after is not None and after.page <= page_end:
            end_page, end_offset = after.page, max(after.span_start, 0)
        else:
            end_page, end_offset = page_end, len(doc.page(page_end).text)
        text_span = {
            "start_page": h.page,
            "start_offset": max(h.span_end, 0),
            "end_page": end_page,
            "end_offset": end_offset,
        }
        node = TreeNode(node_id=node_id, level=h.level, title=h.title,
                        page_span=(h.page, page_end), text_span=text_span)
        while stack[-1].level >= h.level:
            stack.pop()
        stack[-1].children.append(node_id)
        stack.append(node)
        nodes[node_id] = node
        order.append(node_id)

    return DocTree(doc_id=doc.doc_id, root_id="root", nodes=nodes, order=order,
                   corrections=corrections, discrepancies=discrepancies)


# -- cross-reference resolution ------------------------------------------

_PAGE_PTR_RE = re.compile(r"see\s+page\s+(\d+)", re.IGNORECASE)
_SECTION_PTR_RE = re.compile(r"see\s+section\s+[\"“]?([^.;\n)\"”]+)", re.IGNORECASE)


def resolve_cross_refs(tree: DocTree, doc: NormalizedDocument,
                       gateway: Gateway | None = None) -> DocTree:
    """Attach resolved pointers to their source nodes.

    Page pointers and link annotations resolve to the deepest node covering
    the target page; section pointers resolve by normalized-title match with
    a bounded edit-distance tolerance. Unresolvable pointers are kept with an
    unresolved marker. When a link annotation and a textual pointer overlap,
    the link annotation (explicit) wins and the textual one is flagged.
    """
    link_spans: dict[int, list[tuple[int, int]]] = {}
    for ann in doc.link_annotations:
        src_page = ann["source_page"]
        span = tuple(ann["source_span"])
        target = tree.covering_node(ann["target_page"])
        source = tree.covering_node(src_page)
        source.cross_refs.append(CrossRef(
            source_node=source.node_id, source_page=src_page, span=span,
            kind="link_annotation", pointer_text=f"page {ann['target_page']}",
            resolved_target=target.node_id))
        link_spans.setdefault(src_page, []).append(span)

    for page in doc.pages:
        for match in _PAGE_PTR_RE.finditer(page.text):
            target_page = int(match.group(1))
            span = (match.start(), match.end())
            note = _overlap_note(link_spans, page.page_no, span)
            if doc.pages[0].page_no <= target_page <= doc.last_page:
                target_id = tree.covering_node(target_page).node_id
            else:
                target_id = None
            source = tree.covering_node(page.page_no)
            source.cross_refs.append(CrossRef(
                source_node=source.node_id, source_page=page.page_no, span=span,
                kind="page_pointer", pointer_text=match.group(0),
                resolved_target=target_id,
                note=note if note else (None if target_id else "unresolved")))

        for match in _SECTION_PTR_RE.finditer(page.text):
            pointer = match.group(1).strip()
            span = (match.start(), match.end())
            note = _overlap_note(link_spans, page.page_no, span)
            target_id = _match_section(tree, pointer, gateway)
            source = tree.covering_node(page.page_no)
            source.cross_refs.append(CrossRef(
                source_node=source.node_id, source_page=page.page_no, span=span,
                kind="section_pointer", pointer_text=match.group(0),
                resolved_target=target_id,
                note=note if note else (None if target_id else "unresolved")))
    return tree


def _overlap_note(link_spans: dict[int, list[tuple[int, int]]], page: int,
                  span: tuple[int, int]) -> str | None:
    for a, b in link_spans.get(page, []):
        if span[0] < b and a < span[1]:
            return "superseded_by_link"
    return None


def _match_title_once(tree: DocTree, pointer: str) -> str | None:
    np_ = normalize_title(pointer)
    if not np_:
        return None
    best: tuple[int, int, int, str] | None = None  # (distance, -level, order, id)
    for idx, node in enumerate(tree.iter_nodes()):
        if node.node_id == tree.root_id:
            continue
        nt = normalize_title(node.title)
        dist = 0 if np_ == nt else edit_distance(np_, nt)
        allowed = 0 if np_ == nt else (len(np_) // 10) * EDITS_PER_10_CHARS
        if np_ == nt or dist <= allowed:
            key = (dist, -node.level, idx, node.node_id)
            if best is None or key < best:
                best = key
    return best[3] if best else None


def _match_section(tree: DocTree, pointer: str,
                   gateway: Gateway | None) -> str | None:
    # Pointers run into surrounding prose, so try word prefixes longest-first
    # ("Follow-up Schedule for surveillance" resolves at "Follow-up Schedule").
    words = pointer.split()
    for end in range(len(words), 0, -1):
        hit = _match_title_once(tree, " ".join(words[:end]))
        if hit is not None:
            return hit
    if gateway is not None:
        request = ModelRequest(role_tag="extraction", parts={
            "system": "Resolve the section pointer to one node_id from the list, "
                      "or reply {\"node_id\": null}.",
            "user": json.dumps({"pointer": pointer,
                                "nodes": [{"node_id": n.node_id, "title": n.title}
                                          for n in tree.iter_nodes()]}, sort_keys=True),
        })
        try:
            payload = extract_json(gateway.complete(request).text) or {}
            node_id = payload.get("node_id")
            if node_id in tree.nodes:
                return node_id
        except Exception:
            pass
    return None


# -- lookup ---------------------------------------------------------------

def locate(tree: DocTree, query) -> tuple[TreeNode, dict] | None:
    """Find a node by page number or by section path.

    A page query returns the deepest covering node. A section path (list of
    titles or a "/"-separated string) matches nodes whose ancestor titles end
    with the given sequence; multiple matches raise AmbiguousSectionError.
    The empty path addresses the root.
    """
    if not tree.nodes:
        raise DocumentError("tree is empty")
    if isinstance(query, int) or (isinstance(query, str) and query.isdigit()):
        page = int(query)
        first, last = tree.root.page_span
        if not first <= page <= last:
            return None
        node = tree.covering_node(page)
        return node, node.text_span

    if isinstance(query, str):
        parts = [p for p in query.split("/") if p.strip()]
    else:
        parts = list(query)
    if not parts:
        return tree.root, tree.root.text_span

    want = [normalize_title(p) for p in parts]
    parents: dict[str, str | None] = {tree.root_id: None}
    for node in tree.iter_nodes():
        for child in node.children:
            parents[child] = node.node_id

    matches = []
    for node in tree.iter_nodes():
        chain = []
        cur: str | None = node.node_id
        while cur is not None and len(chain) < len(want):
            chain.append(normalize_title(tree.nodes[cur].title))
            cur = parents.get(cur)
        if list(reversed(chain)) == want:
            matches.append(node)
    if not matches:
        return None
    if len(matches) > 1:
        raise AmbiguousSectionError(parts, matches)
    return matches[0], matches[0].text_span


def node_text(tree: DocTree, doc: NormalizedDocument, node_id: str) -> str:
    """Materialize the text addressed by a node's text span."""
    span = tree.nodes[node_id].text_span
    chunks = []
    for page in doc.pages:
        if page.page_no < span["start_page"] or page.page_no > span["end_page"]:
            continue
        start = span["start_offset"] if page.page_no == span["start_page"] else 0
        end = span["end_offset"] if page.page_no == span["end_page"] else len(page.text)
        chunks.append(page.text[start:end])
    return "\n".join(chunks).strip()
