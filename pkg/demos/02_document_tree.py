"""Build a hierarchical topic tree from a normalized document.

The outline carries a deliberately skipped level and one heading exists only
as styled page text; the build corrects the level, recovers the missing
heading, and resolves textual pointers and a link annotation to tree nodes.
"""

from guidebench.doctree import NormalizedDocument, build_tree, locate, resolve_cross_refs


def page(page_no, blocks):
    text_parts, records, offset = [], [], 0
    for text, size, bold in blocks:
        records.append({"span": [offset, offset + len(text)],
                        "font_size": size, "bold": bold})
        text_parts.append(text)
        offset += len(text) + 1
    return {"page_no": page_no, "text": "\n".join(text_parts), "blocks": records}


doc = NormalizedDocument.from_dict({
    "schema_version": "normalized-document/1",
    "doc_id": "demo-guideline",
    "pages": [
        page(1, [("Overview", 18, True),
                 ("General principles of management.", 10, False)]),
        page(2, [("Workup", 18, True),
                 ("Initial assessment steps. For staging see page 4.", 10, False)]),
        page(3, [("Laboratory Panel", 14, True),   # styled only, not in outline
                 ("Baseline laboratory studies.", 10, False)]),
        page(4, [("Staging", 18, True),
                 ("Stage assignment rules, see section Laboratory Panel.", 10, False)]),
    ],
    "outline": [
        {"level": 1, "title": "Overview", "page": 1},
        {"level": 1, "title": "Workup", "page": 2},
        {"level": 3, "title": "Staging", "page": 4},  # skips level 2
    ],
    "link_annotations": [{"source_page": 1, "source_span": [0, 8],
                          "target_page": 3}],
})

tree = resolve_cross_refs(build_tree(doc), doc)

print("Recovered tree:")
for node in tree.iter_nodes():
    indent = "  " * node.level
    print(f"{indent}{node.node_id}  L{node.level}  {node.title!r}"
          f"  pages {node.page_span}")
print(f"\nLevel corrections applied: {tree.corrections}")

print("\nResolved cross references:")
for node in tree.iter_nodes():
    for ref in node.cross_refs:
        print(f"  {ref.kind:15s} {ref.pointer_text!r} -> {ref.resolved_target}")

node, span = locate(tree, 3)
print(f"\nDeepest node covering page 3: {node.title!r} (text span {span})")
node, _ = locate(tree, ["Workup", "Laboratory Panel"])
print(f"Section path Workup/Laboratory Panel -> {node.node_id}")
