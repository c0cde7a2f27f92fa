// @vitest-environment jsdom
import { beforeEach, describe, expect, it, vi } from "vitest";

import { ReviewApi } from "../src/api.js";
import type { FetchLike } from "../src/api.js";
import { mountApp } from "../src/view.js";
import type { LiveStats, Verdict } from "../src/types.js";

/** In-memory stand-in for the review server, speaking the same contract. */
class FakeBackend {
  labels: { pair_id: string; verdict: Verdict; reviewer: string }[] = [];
  cards: { pair_id: string; question: string; answer: string }[];
  postCount = 0;

  constructor(n: number) {
    this.cards = Array.from({ length: n }, (_, i) => ({
      pair_id: `p#${i}`,
      question: `where is thing ${i}?`,
      answer: "on the shelf",
    }));
  }

  stats(): LiveStats {
    const n = this.labels.length;
    const errors = this.labels.filter((l) => l.verdict !== "correct").length;
    const relation = this.labels.filter(
      (l) => l.verdict === "relation_hallucination",
    ).length;
    const objects = this.labels.filter(
      (l) => l.verdict === "object_hallucination",
    ).length;
    const ci = (count: number) => {
      const rate = n ? count / n : 0;
      const halfwidth = n ? 1.96 * Math.sqrt((rate * (1 - rate)) / n) : 0;
      return {
        rate,
        halfwidth,
        ci_low: Math.max(0, rate - halfwidth),
        ci_high: Math.min(1, rate + halfwidth),
      };
    };
    return {
      session_id: "s1",
      sample_size: this.cards.length,
      complete: this.labels.length >= this.cards.length,
      labeled_count: n,
      error_rate: ci(errors),
      relation_hallucination_rate: ci(relation),
      object_hallucination_rate: ci(objects),
    };
  }

  fetch: FetchLike = async (url, init) => {
    const json = (payload: unknown, status = 200) =>
      new Response(JSON.stringify(payload), { status });
    if (url.endsWith("/stats")) {
      return json(this.stats());
    }
    if (url.includes("/next")) {
      const labeled = new Set(this.labels.map((l) => l.pair_id));
      const card = this.cards.find((c) => !labeled.has(c.pair_id));
      if (!card) {
        return new Response(null, { status: 204 });
      }
      return json({
        ...card,
        image_uri: "broken://image.jpg",
        description: "a scene used by the fake backend",
        position: `${labeled.size + 1} of ${this.cards.length}`,
      });
    }
    if (url.endsWith("/labels") && init?.method === "POST") {
      this.postCount += 1;
      const body = JSON.parse(init.body as string) as {
        pair_id: string;
        verdict: Verdict;
        reviewer: string;
      };
      const dup = this.labels.some(
        (l) => l.pair_id === body.pair_id && l.reviewer === body.reviewer,
      );
      if (dup) {
        return json({ detail: "duplicate" }, 409);
      }
      this.labels.push(body);
      return json({ ok: true, labeled_count: this.labels.length }, 201);
    }
    if (url.endsWith("/sessions") && init?.method === "POST") {
      return json({ session_id: "s1", sample_size: this.cards.length, warnings: [] }, 201);
    }
    return json({ detail: `unhandled ${url}` }, 500);
  };
}

function mount(backend: FakeBackend) {
  document.body.innerHTML = '<div id="app"></div>';
  const root = document.getElementById("app")!;
  const api = new ReviewApi("", backend.fetch);
  const controller = mountApp(root, api, { reviewer: "me", statsPollMs: 0 });
  return { root, controller };
}

async function settle() {
  await vi.waitFor(() => Promise.resolve());
  await new Promise((resolve) => setTimeout(resolve, 0));
}

describe("review app", () => {
  beforeEach(() => {
    document.body.innerHTML = "";
  });

  it("shows the start screen before a session begins", () => {
    const { root } = mount(new FakeBackend(3));
    expect(root.querySelector(".start")).toBeTruthy();
    expect(root.querySelector("input[name=session-id]")).toBeTruthy();
  });

  it("renders the first card with its position", async () => {
    const backend = new FakeBackend(3);
    const { root, controller } = mount(backend);
    await controller.start("s1");
    await settle();
    expect(root.querySelector(".position")?.textContent).toBe("1 of 3");
    expect(root.querySelector(".question")?.textContent).toContain("where is thing 0?");
    expect(root.querySelectorAll("button.verdict")).toHaveLength(5);
  });

  it("keyboard shortcut 3 submits a relation hallucination", async () => {
    const backend = new FakeBackend(2);
    const { controller } = mount(backend);
    await controller.start("s1");
    await settle();
    document.dispatchEvent(new KeyboardEvent("keydown", { key: "3" }));
    await vi.waitFor(() => expect(backend.labels).toHaveLength(1));
    expect(backend.labels[0]).toEqual({
      pair_id: "p#0",
      verdict: "relation_hallucination",
      reviewer: "me",
    });
  });

  it("a rapid double submission produces exactly one stored label", async () => {
    const backend = new FakeBackend(2);
    const { controller } = mount(backend);
    await controller.start("s1");
    await settle();
    const first = controller.submit("correct");
    const second = controller.submit("correct"); // same tick, still in flight
    const outcomes = await Promise.all([first, second]);
    expect(outcomes.sort()).toEqual(["ignored", "submitted"]);
    expect(backend.postCount).toBe(1);
    expect(backend.labels).toHaveLength(1);
  });

  it("double-clicking the verdict button stores one label", async () => {
    const backend = new FakeBackend(2);
    const { root, controller } = mount(backend);
    await controller.start("s1");
    await settle();
    const button = root.querySelector<HTMLButtonElement>("button.verdict")!;
    button.click();
    button.click();
    await settle();
    await vi.waitFor(() => expect(backend.labels).toHaveLength(1));
    expect(backend.postCount).toBe(1);
  });

  it("stats panel shows exactly the backend's numbers", async () => {
    const backend = new FakeBackend(4);
    const { root, controller } = mount(backend);
    await controller.start("s1");
    await settle();
    await controller.submit("relation_hallucination");
    await settle();
    const fromBackend = backend.stats();
    const shown = root.querySelector('[data-stat="relation-hallucination"]');
    const expected = `${(fromBackend.relation_hallucination_rate.rate * 100).toFixed(1)}% ± ${(
      fromBackend.relation_hallucination_rate.halfwidth * 100
    ).toFixed(1)}`;
    expect(shown?.textContent).toBe(expected);
    expect(root.querySelector('[data-stat="labeled"]')?.textContent).toBe("1 of 4");
  });

  it("broken images fall back to a placeholder, keeping the description", async () => {
    const backend = new FakeBackend(1);
    const { root, controller } = mount(backend);
    await controller.start("s1");
    await settle();
    const image = root.querySelector<HTMLImageElement>("img.subject-image")!;
    image.dispatchEvent(new Event("error"));
    expect(root.querySelector(".image-placeholder")).toBeTruthy();
    expect(root.querySelector(".description")?.textContent).toContain("fake backend");
  });

  it("reaches the completion screen after the last label", async () => {
    const backend = new FakeBackend(2);
    const { root, controller } = mount(backend);
    await controller.start("s1");
    await settle();
    await controller.submit("correct");
    await controller.submit("wrong_answer");
    await settle();
    expect(controller.state.phase).toBe("complete");
    expect(root.querySelector(".complete")).toBeTruthy();
    expect(root.textContent).toContain("Session complete");
  });

  it("a failed submission keeps the card and shows a retry banner", async () => {
    const backend = new FakeBackend(2);
    const flaky: FetchLike = async (url, init) => {
      if (url.endsWith("/labels") && init?.method === "POST") {
        throw new Error("network down");
      }
      return backend.fetch(url, init);
    };
    document.body.innerHTML = '<div id="app"></div>';
    const root = document.getElementById("app")!;
    const controller = mountApp(root, new ReviewApi("", flaky), {
      reviewer: "me",
      statsPollMs: 0,
    });
    await controller.start("s1");
    await settle();
    const outcome = await controller.submit("correct");
    await settle();
    expect(outcome).toBe("failed");
    expect(backend.labels).toHaveLength(0);
    expect(controller.state.card?.pair_id).toBe("p#0"); // no label loss
    expect(root.querySelector(".banner")?.textContent).toContain("retry");
  });
});
