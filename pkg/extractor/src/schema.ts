/**
 * Structural validation of a NormalizedDocument against schema version 1.
 * Mirrors the JSON Schema shipped with the consumer; returns a list of
 * problems (empty means valid) so the CLI can report them all at once.
 */

import { SCHEMA_VERSION } from './types.js';

function isInt(value: unknown, min = 0): value is number {
  return typeof value === 'number' && Number.isInteger(value) && value >= min;
}

function isSpan(value: unknown): value is [number, number] {
  return Array.isArray(value) && value.length === 2 &&
    isInt(value[0]) && isInt(value[1]) && value[0] <= value[1];
}

export function validateNormalizedDocument(doc: unknown): string[] {
  const problems: string[] = [];
  if (typeof doc !== 'object' || doc === null) {
    return ['document is not an object'];
  }
  const d = doc as Record<string, unknown>;

  if (d.schema_version !== SCHEMA_VERSION) {
    problems.push(`schema_version must be "${SCHEMA_VERSION}"`);
  }
  if (typeof d.doc_id !== 'string' || d.doc_id.length === 0) {
    problems.push('doc_id must be a non-empty string');
  }
  if (!Array.isArray(d.pages) || d.pages.length === 0) {
    problems.push('pages must be a non-empty array');
    return problems;
  }

  let prevPage = 0;
  for (const [i, page] of (d.pages as unknown[]).entries()) {
    const p = page as Record<string, unknown>;
    if (!isInt(p.page_no, 1)) {
      problems.push(`pages[${i}].page_no must be a positive integer`);
      continue;
    }
    if (p.page_no <= prevPage) {
      problems.push(`pages[${i}].page_no not strictly increasing`);
    }
    prevPage = p.page_no as number;
    if (typeof p.text !== 'string') {
      problems.push(`pages[${i}].text must be a string`);
      continue;
    }
    if (!Array.isArray(p.blocks)) {
      problems.push(`pages[${i}].blocks must be an array`);
      continue;
    }
    for (const [j, block] of (p.blocks as unknown[]).entries()) {
      const b = block as Record<string, unknown>;
      if (!isSpan(b.span)) {
        problems.push(`pages[${i}].blocks[${j}].span malformed`);
        continue;
      }
      const [start, end] = b.span as [number, number];
      if (end > (p.text as string).length) {
        problems.push(`pages[${i}].blocks[${j}].span exceeds page text`);
      }
      if ('font_size' in b && b.font_size !== null &&
          typeof b.font_size !== 'number') {
        problems.push(`pages[${i}].blocks[${j}].font_size must be a number`);
      }
      if ('bold' in b && b.bold !== null && typeof b.bold !== 'boolean') {
        problems.push(`pages[${i}].blocks[${j}].bold must be a boolean`);
      }
    }
  }

  for (const [i, entry] of ((d.outline as unknown[]) ?? []).entries()) {
    const e = entry as Record<string, unknown>;
    if (!isInt(e.level, 1) || typeof e.title !== 'string' || !isInt(e.page, 1)) {
      problems.push(`outline[${i}] malformed`);
    }
  }
  for (const [i, ann] of ((d.link_annotations as unknown[]) ?? []).entries()) {
    const a = ann as Record<string, unknown>;
    if (!isInt(a.source_page, 1) || !isSpan(a.source_span) ||
        !isInt(a.target_page, 1)) {
      problems.push(`link_annotations[${i}] malformed`);
    }
  }
  return problems;
}
