#!/usr/bin/env node
/**
 * extract <pdf> --out <file> [--report <file>] [--doc-id <id>]
 *
 * Exit codes: 0 success, 2 schema failure, 3 unreadable input.
 */

import { promises as fs } from 'fs';
import path from 'path';

import { extractPdf, serializeDocument, serializeReport } from './extract.js';
import { validateNormalizedDocument } from './schema.js';
import { UnreadableInputError } from './types.js';

interface CliArgs {
  pdf: string;
  out: string;
  report?: string;
  docId?: string;
}

function parseArgs(argv: string[]): CliArgs {
  const positional: string[] = [];
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 1) {
    const arg = argv[i];
    if (arg.startsWith('--')) {
      const value = argv[i + 1];
      if (value === undefined) {
        throw new Error(`flag ${arg} needs a value`);
      }
      flags.set(arg.slice(2), value);
      i += 1;
    } else {
      positional.push(arg);
    }
  }
  if (positional.length !== 1 || !flags.has('out')) {
    throw new Error('usage: extract <pdf> --out <file> [--report <file>] '
      + '[--doc-id <id>]');
  }
  return {
    pdf: positional[0],
    out: flags.get('out')!,
    report: flags.get('report'),
    docId: flags.get('doc-id'),
  };
}

async function writeAtomic(target: string, content: string): Promise<void> {
  const tmp = `${target}.tmp`;
  await fs.writeFile(tmp, content, 'utf8');
  await fs.rename(tmp, target);
}

export async function runCli(argv: string[]): Promise<number> {
  let args: CliArgs;
  try {
    args = parseArgs(argv);
  } catch (err) {
    process.stderr.write(`${(err as Error).message}\n`);
    return 3;
  }

  let data: Uint8Array;
  try {
    data = new Uint8Array(await fs.readFile(args.pdf));
  } catch (err) {
    process.stderr.write(`cannot read ${args.pdf}: ${(err as Error).message}\n`
      + 'hint: check the path and file permissions\n');
    return 3;
  }

  const fallbackId = args.docId
    ?? path.basename(args.pdf).replace(/\.pdf$/i, '');
  try {
    const { document, report } = await extractPdf(data, fallbackId);
    const problems = validateNormalizedDocument(document);
    if (problems.length > 0) {
      process.stderr.write(`schema validation failed:\n`
        + problems.map((p) => `  - ${p}\n`).join(''));
      return 2;
    }
    await writeAtomic(args.out, serializeDocument(document));
    if (args.report) {
      await writeAtomic(args.report, serializeReport(report));
    }
    process.stdout.write(
      `extracted ${report.pages_extracted} pages, `
      + `${report.outline_entries} outline entries, `
      + `${report.link_annotations} links -> ${args.out}\n`);
    for (const warning of report.warnings) {
      process.stderr.write(`warning: ${warning}\n`);
    }
    return 0;
  } catch (err) {
    if (err instanceof UnreadableInputError) {
      process.stderr.write(`${err.message}\nhint: ${err.hint}\n`);
      return 3;
    }
    throw err;
  }
}

const invokedDirectly = process.argv[1]
  && import.meta.url.endsWith(path.basename(process.argv[1]));
if (invokedDirectly) {
  runCli(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
