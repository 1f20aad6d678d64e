// Minimal typings for the legacy Node build of pdf.js; only the surface the
// extractor touches is declared.
declare module 'pdfjs-dist/legacy/build/pdf.mjs' {
  export interface TextItem {
    str: string;
    transform: number[];
    width: number;
    height: number;
    fontName: string;
    hasEOL: boolean;
  }

  export interface TextContent {
    items: TextItem[];
    styles: Record<string, { fontFamily: string }>;
  }

  export interface PdfAnnotation {
    subtype: string;
    rect: number[];
    dest?: string | unknown[] | null;
    url?: string;
  }

  export interface PdfPage {
    getTextContent(): Promise<TextContent>;
    getAnnotations(): Promise<PdfAnnotation[]>;
    getOperatorList(): Promise<unknown>;
    commonObjs: { get(name: string): { name?: string } };
  }

  export interface PdfOutlineNode {
    title: string;
    dest: string | unknown[] | null;
    items: PdfOutlineNode[];
  }

  export interface PdfDocument {
    numPages: number;
    getPage(pageNo: number): Promise<PdfPage>;
    getOutline(): Promise<PdfOutlineNode[] | null>;
    getDestination(name: string): Promise<unknown[] | null>;
    getPageIndex(ref: unknown): Promise<number>;
    getMetadata(): Promise<{ info: { Title?: string } }>;
  }

  export function getDocument(options: {
    data: Uint8Array;
    useSystemFonts?: boolean;
  }): { promise: Promise<PdfDocument> };
}
