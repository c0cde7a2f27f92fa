import { execFileSync, spawn } from "node:child_process";
import type { ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiError, ReviewApi } from "../src/api.js";
import type { Verdict } from "../src/types.js";

/**
 * Full round-trip against the real review server: fixture data is written
 * with the backend's own tooling, the server runs as a subprocess, and the
 * UI's API client drives a complete labeling session over live HTTP.
 */

const FIXTURE_SCRIPT = `
import sys
from pathlib import Path
from spatialforge.corpus import IMAGE_OK, SPATIAL_OK, CaptionRecord, SourceKind, write_records
from spatialforge.generation import QAPair, write_pairs

out = Path(sys.argv[1])
records = [
    CaptionRecord.make(
        id=f"r{i}",
        source=SourceKind.DOCCI if i < 6 else SourceKind.PIXMO_CAP,
        image_uri=f"images/{i}.jpg",
        description=f"scene {i} with a cup on a shelf near a window",
        flags=(IMAGE_OK, SPATIAL_OK),
    )
    for i in range(10)
]
write_records(records, out / "corpus.jsonl")
pairs = [QAPair.make(f"r{i}", 0, f"where is cup {i}?", "on a shelf") for i in range(10)]
write_pairs(pairs, out / "accepted.jsonl")
`;

// 6 correct, 1 wrong answer, 2 relation hallucinations, 1 object hallucination
const SCRIPTED_VERDICTS: Verdict[] = [
  "correct",
  "correct",
  "wrong_answer",
  "correct",
  "relation_hallucination",
  "correct",
  "object_hallucination",
  "correct",
  "relation_hallucination",
  "correct",
];

let serverProcess: ChildProcess;
let fixtureDir: string;
let baseUrl: string;

async function waitForServer(url: string, attempts = 100): Promise<void> {
  for (let i = 0; i < attempts; i += 1) {
    try {
      const response = await fetch(url);
      if (response.ok) {
        return;
      }
    } catch {
      // not up yet
    }
    await new Promise((resolve) => setTimeout(resolve, 150));
  }
  throw new Error(`server at ${url} never became ready`);
}

beforeAll(async () => {
  fixtureDir = mkdtempSync(join(tmpdir(), "review-ui-"));
  execFileSync("python3", ["-c", FIXTURE_SCRIPT, fixtureDir]);
  const port = 8731 + (process.pid % 500);
  baseUrl = `http://127.0.0.1:${port}`;
  serverProcess = spawn(
    "forge",
    [
      "review-serve",
      "--pairs", join(fixtureDir, "accepted.jsonl"),
      "--corpus", join(fixtureDir, "corpus.jsonl"),
      "--port", String(port),
      "--store", join(fixtureDir, "sessions"),
      "--ui-dir", join(import.meta.dirname, "..", "dist"),
    ],
    { stdio: "ignore" },
  );
  await waitForServer(`${baseUrl}/`);
});

afterAll(() => {
  serverProcess?.kill();
  rmSync(fixtureDir, { recursive: true, force: true });
});

describe("UI round-trip against the live server", () => {
  it("labels 10 sampled pairs and the stats match a hand tally exactly", async () => {
    const api = new ReviewApi(baseUrl);
    const session = await api.createSession({ n: 10, seed: 1 });
    expect(session.sample_size).toBe(10);

    const labeledPairs: string[] = [];
    for (let i = 0; i < SCRIPTED_VERDICTS.length; i += 1) {
      const card = await api.nextCard(session.session_id, "tester");
      expect(card).not.toBeNull();
      expect(card!.position).toBe(`${i + 1} of 10`);
      expect(card!.question).toMatch(/^where is cup \d+\?$/);
      expect(card!.description).toContain("cup on a shelf");
      labeledPairs.push(card!.pair_id);
      await api.submitLabel(session.session_id, card!.pair_id, SCRIPTED_VERDICTS[i]!, "tester");
    }
    expect(new Set(labeledPairs).size).toBe(10);
    expect(await api.nextCard(session.session_id, "tester")).toBeNull();

    // hand tally: 4 of 10 non-correct, 2 relation, 1 object
    const stats = await api.stats(session.session_id);
    expect(stats.complete).toBe(true);
    expect(stats.labeled_count).toBe(10);
    expect(stats.error_rate.rate).toBe(0.4);
    expect(stats.relation_hallucination_rate.rate).toBe(0.2);
    expect(stats.object_hallucination_rate.rate).toBe(0.1);
    expect(stats.error_rate.halfwidth).toBeCloseTo(
      1.96 * Math.sqrt((0.4 * 0.6) / 10),
      12,
    );

    const exported = await api.exportLabels(session.session_id);
    expect(exported.trim().split("\n")).toHaveLength(10);
  });

  it("a duplicate submission is rejected and exactly one label is stored", async () => {
    const api = new ReviewApi(baseUrl);
    const session = await api.createSession({ n: 10, seed: 2 });
    const card = await api.nextCard(session.session_id, "tester");
    expect(card).not.toBeNull();
    await api.submitLabel(session.session_id, card!.pair_id, "correct", "tester");
    await expect(
      api.submitLabel(session.session_id, card!.pair_id, "wrong_answer", "tester"),
    ).rejects.toSatisfy((error: unknown) => (error as ApiError).status === 409);
    const stats = await api.stats(session.session_id);
    expect(stats.labeled_count).toBe(1);
    expect(stats.error_rate.rate).toBe(0);
    const exported = await api.exportLabels(session.session_id);
    expect(exported.trim().split("\n")).toHaveLength(1);
  });

  it("serves the built UI from the same origin", async () => {
    const response = await fetch(`${baseUrl}/`);
    expect(response.ok).toBe(true);
    const html = await response.text();
    expect(html).toContain("QA pair review");
    const js = await fetch(`${baseUrl}/main.js`);
    expect(js.ok).toBe(true);
  });
});
