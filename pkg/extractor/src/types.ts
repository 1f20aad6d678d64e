/**
 * NormalizedDocument: the versioned data contract consumed by the document
 * model. Page numbers are 1-based and strictly increasing; block spans are
 * [start, end) character offsets into the owning page's text.
 */

export const SCHEMA_VERSION = 'normalized-document/1';

export interface Block {
  readonly span: [number, number];
  readonly font_size: number | null;
  readonly bold: boolean | null;
}

export interface Page {
  readonly page_no: number;
  readonly text: string;
  readonly blocks: Block[];
}

export interface OutlineEntry {
  readonly level: number;
  readonly title: string;
  readonly page: number;
}

export interface LinkAnnotation {
  readonly source_page: number;
  readonly source_span: [number, number];
  readonly target_page: number;
}

export interface NormalizedDocument {
  readonly schema_version: typeof SCHEMA_VERSION;
  readonly doc_id: string;
  readonly pages: Page[];
  readonly outline: OutlineEntry[];
  readonly link_annotations: LinkAnnotation[];
}

export interface ExtractionReport {
  readonly pages_extracted: number;
  readonly outline_entries: number;
  readonly link_annotations: number;
  readonly warnings: string[];
}

/** Input cannot be read at all (missing, encrypted, not a PDF). Exit code 3. */
export class UnreadableInputError extends Error {
  constructor(message: string, readonly hint: string) {
    super(message);
    this.name = 'UnreadableInputError';
  }
}

/** The extracted document failed schema validation. Exit code 2. */
export class SchemaValidationError extends Error {
  constructor(readonly problems: string[]) {
    super(`schema validation failed: ${problems.join('; ')}`);
    this.name = 'SchemaValidationError';
  }
}
