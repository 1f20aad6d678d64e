/**
 * PDF to NormalizedDocument extraction.
 *
 * Extraction stays uninterpreted: the outline keeps the levels stored in the
 * PDF, text blocks are one-per-line with character spans into the page text,
 * and font size/boldness are carried as optional attributes. All heading
 * inference and level correction belongs to the consumer.
 */

import { getDocument } from 'pdfjs-dist/legacy/build/pdf.mjs';
import type {
  PdfDocument, PdfOutlineNode, PdfPage, TextItem,
} from 'pdfjs-dist/legacy/build/pdf.mjs';

import {
  Block, ExtractionReport, LinkAnnotation, NormalizedDocument, OutlineEntry,
  Page, SCHEMA_VERSION, UnreadableInputError,
} from './types.js';

const BOLD_NAME = /bold|black|heavy/i;
const Y_TOLERANCE = 2.0; // points; items within this baseline delta share a line

interface PlacedItem {
  text: string;
  x: number;
  y: number;
  width: number;
  height: number;
  fontName: string;
  start: number; // filled once the line text is assembled
  end: number;
}

interface Line {
  y: number;
  items: PlacedItem[];
  text: string;
  start: number;
  end: number;
  fontSize: number | null;
  bold: boolean | null;
}

export interface ExtractionResult {
  document: NormalizedDocument;
  report: ExtractionReport;
}

export async function extractPdf(
  data: Uint8Array, fallbackDocId: string,
): Promise<ExtractionResult> {
  let pdf: PdfDocument;
  try {
    // pdf.js transfers the buffer to its worker; hand it a copy so the
    // caller's bytes stay usable.
    pdf = await getDocument({ data: data.slice(), useSystemFonts: true }).promise;
  } catch (err) {
    const name = (err as { name?: string }).name ?? '';
    if (name === 'PasswordException') {
      throw new UnreadableInputError(
        'the PDF is encrypted',
        'decrypt the file first (e.g. qpdf --decrypt) and re-run');
    }
    throw new UnreadableInputError(
      `not a readable PDF: ${(err as Error).message}`,
      'check that the input is a PDF file with a text layer');
  }

  const warnings: string[] = [];
  const docId = await resolveDocId(pdf, fallbackDocId);
  const pageLines: Line[][] = [];
  const pages: Page[] = [];

  for (let pageNo = 1; pageNo <= pdf.numPages; pageNo += 1) {
    const page = await pdf.getPage(pageNo);
    const lines = await extractLines(page);
    if (lines.length === 0) {
      warnings.push(`page ${pageNo} has no text layer`);
    }
    pageLines.push(lines);
    const text = lines.map((line) => line.text).join('\n');
    const blocks: Block[] = lines.map((line) => ({
      span: [line.start, line.end],
      font_size: line.fontSize,
      bold: line.bold,
    }));
    pages.push({ page_no: pageNo, text, blocks });
  }

  const outline = await extractOutline(pdf, warnings);
  const links = await extractLinks(pdf, pageLines, warnings);

  const document: NormalizedDocument = {
    schema_version: SCHEMA_VERSION,
    doc_id: docId,
    pages,
    outline,
    link_annotations: links,
  };
  const report: ExtractionReport = {
    pages_extracted: document.pages.length,
    outline_entries: document.outline.length,
    link_annotations: document.link_annotations.length,
    warnings,
  };
  return { document, report };
}

async function resolveDocId(pdf: PdfDocument, fallback: string): Promise<string> {
  try {
    const { info } = await pdf.getMetadata();
    if (info.Title && info.Title.trim()) {
      return info.Title.trim();
    }
  } catch {
    // metadata is optional; fall through to the caller-provided id
  }
  return fallback;
}

function round2(value: number): number {
  return Math.round(value * 100) / 100;
}

async function extractLines(page: PdfPage): Promise<Line[]> {
  const content = await page.getTextContent();
  const items: PlacedItem[] = [];
  for (const item of content.items as TextItem[]) {
    if (!item.str) continue;
    items.push({
      text: item.str,
      x: item.transform[4],
      y: item.transform[5],
      width: item.width,
      height: item.height,
      fontName: item.fontName,
      start: 0,
      end: 0,
    });
  }
  if (items.length === 0) return [];

  const boldByFont = await fontBoldness(page, items);

  // Group items into baseline lines, top of page first, left to right.
  items.sort((a, b) => (b.y - a.y) || (a.x - b.x));
  const lines: Line[] = [];
  for (const item of items) {
    const line = lines.find((l) => Math.abs(l.y - item.y) <= Y_TOLERANCE);
    if (line) {
      line.items.push(item);
    } else {
      lines.push({ y: item.y, items: [item], text: '', start: 0, end: 0,
                   fontSize: null, bold: null });
    }
  }

  let offset = 0;
  for (const line of lines) {
    line.items.sort((a, b) => a.x - b.x);
    line.start = offset;
    let text = '';
    let prev: PlacedItem | null = null;
    for (const item of line.items) {
      if (prev !== null) {
        const gap = item.x - (prev.x + prev.width);
        if (gap > 0.1 * Math.max(item.height, 1) && !text.endsWith(' ')
            && !item.text.startsWith(' ')) {
          text += ' ';
        }
      }
      item.start = line.start + text.length;
      text += item.text;
      item.end = line.start + text.length;
      prev = item;
    }
    line.text = text;
    line.end = offset + text.length;
    offset = line.end + 1; // lines join with "\n"

    const sizes = line.items.map((i) => i.height).filter((h) => h > 0);
    line.fontSize = sizes.length ? round2(Math.max(...sizes)) : null;
    const flags = line.items.map((i) => boldByFont.get(i.fontName));
    line.bold = flags.every((f) => f !== undefined)
      ? flags.every((f) => f === true)
      : null;
  }
  return lines;
}

async function fontBoldness(
  page: PdfPage, items: PlacedItem[],
): Promise<Map<string, boolean>> {
  const map = new Map<string, boolean>();
  const wanted = new Set(items.map((i) => i.fontName));
  if (wanted.size === 0) return map;
  try {
    await page.getOperatorList(); // loads the fonts into commonObjs
    for (const fontName of wanted) {
      try {
        const font = page.commonObjs.get(fontName);
        if (font && typeof font.name === 'string') {
          map.set(fontName, BOLD_NAME.test(font.name));
        }
      } catch {
        // font not resolvable; boldness stays unknown for this font
      }
    }
  } catch {
    // operator list failed; boldness unknown for the whole page
  }
  return map;
}

async function extractOutline(
  pdf: PdfDocument, warnings: string[],
): Promise<OutlineEntry[]> {
  const nodes = await pdf.getOutline();
  if (!nodes) return [];
  const entries: OutlineEntry[] = [];

  const walk = async (items: PdfOutlineNode[], level: number) => {
    for (const node of items) {
      const page = await resolveDestPage(pdf, node.dest);
      if (page === null) {
        warnings.push(`outline entry "${node.title}" has no resolvable target`);
      } else {
        entries.push({ level, title: node.title, page });
      }
      if (node.items && node.items.length) {
        await walk(node.items, level + 1);
      }
    }
  };
  await walk(nodes, 1);
  return entries;
}

async function resolveDestPage(
  pdf: PdfDocument, dest: string | unknown[] | null | undefined,
): Promise<number | null> {
  try {
    const resolved = typeof dest === 'string'
      ? await pdf.getDestination(dest)
      : dest;
    if (!resolved || !Array.isArray(resolved) || resolved.length === 0) {
      return null;
    }
    const index = await pdf.getPageIndex(resolved[0]);
    return index + 1;
  } catch {
    return null;
  }
}

async function extractLinks(
  pdf: PdfDocument, pageLines: Line[][], warnings: string[],
): Promise<LinkAnnotation[]> {
  const links: LinkAnnotation[] = [];
  for (let pageNo = 1; pageNo <= pdf.numPages; pageNo += 1) {
    const page = await pdf.getPage(pageNo);
    const annotations = await page.getAnnotations();
    for (const annotation of annotations) {
      if (annotation.subtype !== 'Link') continue;
      if (annotation.url) {
        warnings.push(`page ${pageNo}: external link skipped (${annotation.url})`);
        continue;
      }
      const target = await resolveDestPage(pdf, annotation.dest);
      if (target === null) {
        warnings.push(`page ${pageNo}: link with unresolvable destination skipped`);
        continue;
      }
      const span = rectToSpan(annotation.rect, pageLines[pageNo - 1]);
      if (span === null) {
        warnings.push(`page ${pageNo}: link rect covers no text; empty span used`);
      }
      links.push({
        source_page: pageNo,
        source_span: span ?? [0, 0],
        target_page: target,
      });
    }
  }
  return links;
}

function rectToSpan(
  rect: number[], lines: Line[],
): [number, number] | null {
  const [x1, y1, x2, y2] = [
    Math.min(rect[0], rect[2]), Math.min(rect[1], rect[3]),
    Math.max(rect[0], rect[2]), Math.max(rect[1], rect[3]),
  ];
  let start = Number.POSITIVE_INFINITY;
  let end = Number.NEGATIVE_INFINITY;
  for (const line of lines) {
    if (line.y < y1 - Y_TOLERANCE || line.y > y2 + Y_TOLERANCE) continue;
    for (const item of line.items) {
      if (item.x + item.width < x1 || item.x > x2) continue;
      start = Math.min(start, item.start);
      end = Math.max(end, item.end);
    }
  }
  if (!Number.isFinite(start) || !Number.isFinite(end)) return null;
  return [start, end];
}

/** Stable serialization: fixed key order from construction, two-space
 * indentation, trailing newline. Identical input bytes yield identical
 * output bytes. */
export function serializeDocument(document: NormalizedDocument): string {
  return `${JSON.stringify(document, null, 2)}\n`;
}

export function serializeReport(report: ExtractionReport): string {
  return `${JSON.stringify(report, null, 2)}\n`;
}
