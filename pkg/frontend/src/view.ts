import { ReviewApi } from "./api.js";
import { ReviewController } from "./controller.js";
import type { ControllerState } from "./controller.js";
import type { LiveStats, RateWithCI } from "./types.js";
import { VERDICTS } from "./types.js";

export interface MountOptions {
  reviewer?: string;
  statsPollMs?: number; // 0 disables polling (tests drive refresh manually)
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}

function formatRate(rate: RateWithCI): string {
  return `${(rate.rate * 100).toFixed(1)}% ± ${(rate.halfwidth * 100).toFixed(1)}`;
}

function statsPanel(stats: LiveStats | null): HTMLElement {
  const panel = el("aside", "stats-panel");
  panel.appendChild(el("h2", undefined, "Live statistics"));
  if (!stats) {
    panel.appendChild(el("p", "muted", "No statistics yet."));
    return panel;
  }
  const rows: [string, string][] = [
    ["Labeled", `${stats.labeled_count} of ${stats.sample_size}`],
    ["Error rate", formatRate(stats.error_rate)],
    ["Relation hallucination", formatRate(stats.relation_hallucination_rate)],
    ["Object hallucination", formatRate(stats.object_hallucination_rate)],
  ];
  const list = el("dl");
  for (const [term, value] of rows) {
    list.appendChild(el("dt", undefined, term));
    const definition = el("dd", undefined, value);
    definition.dataset.stat = term.toLowerCase().replace(/ /g, "-");
    list.appendChild(definition);
  }
  panel.appendChild(list);
  return panel;
}

function cardView(state: ControllerState, controller: ReviewController): HTMLElement {
  const card = state.card!;
  const section = el("section", "card");
  section.dataset.pairId = card.pair_id;

  const header = el("header");
  header.appendChild(el("span", "position", card.position));
  section.appendChild(header);

  const image = el("img", "subject-image");
  image.src = card.image_uri;
  image.alt = "reviewed image";
  image.addEventListener("error", () => {
    const placeholder = el("div", "image-placeholder", "image unavailable");
    image.replaceWith(placeholder);
  });
  section.appendChild(image);

  section.appendChild(el("p", "description", card.description));
  const qa = el("div", "qa");
  qa.appendChild(el("p", "question", `Q: ${card.question}`));
  qa.appendChild(el("p", "answer", `A: ${card.answer}`));
  section.appendChild(qa);

  const buttons = el("div", "verdicts");
  for (const choice of VERDICTS) {
    const button = el("button", "verdict", `${choice.shortcut} · ${choice.label}`);
    button.dataset.verdict = choice.key;
    button.disabled = state.submitting;
    button.addEventListener("click", () => {
      void controller.submit(choice.key);
    });
    buttons.appendChild(button);
  }
  section.appendChild(buttons);
  return section;
}

function completeView(stats: LiveStats | null): HTMLElement {
  const section = el("section", "complete");
  section.appendChild(el("h2", undefined, "Session complete"));
  section.appendChild(
    el("p", undefined, "Every sampled pair has a label. Final statistics:"),
  );
  section.appendChild(statsPanel(stats));
  return section;
}

function startView(
  api: ReviewApi,
  begin: (sessionId: string) => void,
): HTMLElement {
  const section = el("section", "start");
  section.appendChild(el("h2", undefined, "Review session"));

  const resume = el("div", "start-row");
  const resumeInput = el("input") as HTMLInputElement;
  resumeInput.placeholder = "existing session id";
  resumeInput.name = "session-id";
  const resumeButton = el("button", undefined, "Resume");
  resumeButton.addEventListener("click", () => {
    if (resumeInput.value.trim()) {
      begin(resumeInput.value.trim());
    }
  });
  resume.append(resumeInput, resumeButton);
  section.appendChild(resume);

  const create = el("div", "start-row");
  const nInput = el("input") as HTMLInputElement;
  nInput.placeholder = "pairs to review (blank = auto)";
  nInput.name = "sample-n";
  const seedInput = el("input") as HTMLInputElement;
  seedInput.placeholder = "seed";
  seedInput.name = "seed";
  seedInput.value = "0";
  const createButton = el("button", undefined, "Start new session");
  createButton.addEventListener("click", () => {
    const n = nInput.value.trim() ? Number(nInput.value) : undefined;
    const seed = Number(seedInput.value || "0");
    void api
      .createSession({ n, seed })
      .then((info) => begin(info.session_id))
      .catch((error: unknown) => {
        const banner = section.querySelector(".banner") ?? section.appendChild(el("p", "banner"));
        banner.textContent = String(error);
      });
  });
  create.append(nInput, seedInput, createButton);
  section.appendChild(create);
  return section;
}

/** Wire the app into a root element; returns the controller for tests. */
export function mountApp(
  root: HTMLElement,
  api: ReviewApi,
  options: MountOptions = {},
): ReviewController {
  const controller = new ReviewController(api, options.reviewer ?? "anonymous");
  let pollTimer: ReturnType<typeof setInterval> | null = null;

  const render = (state: ControllerState): void => {
    root.textContent = "";
    const app = el("div", "app");
    app.appendChild(el("h1", undefined, "QA pair review"));
    if (state.banner) {
      app.appendChild(el("p", "banner", state.banner));
    }
    if (state.phase === "idle") {
      app.appendChild(startView(api, (sessionId) => void controller.start(sessionId)));
    } else if (state.phase === "loading") {
      app.appendChild(el("p", "muted", "Loading…"));
    } else if (state.phase === "labeling" && state.card) {
      const main = el("div", "columns");
      main.appendChild(cardView(state, controller));
      main.appendChild(statsPanel(state.stats));
      app.appendChild(main);
    } else if (state.phase === "complete") {
      app.appendChild(completeView(state.stats));
      if (pollTimer) {
        clearInterval(pollTimer);
        pollTimer = null;
      }
    }
    root.appendChild(app);
  };

  controller.subscribe(render);
  render(controller.state);

  document.addEventListener("keydown", (event) => {
    if (controller.state.phase !== "labeling") {
      return;
    }
    const choice = VERDICTS.find((v) => v.shortcut === event.key);
    if (choice) {
      void controller.submit(choice.key);
    }
  });

  const pollMs = options.statsPollMs ?? 3000;
  if (pollMs > 0) {
    pollTimer = setInterval(() => {
      if (controller.state.phase === "labeling") {
        void controller.refreshStats().catch(() => undefined);
      }
    }, pollMs);
  }
  return controller;
}
