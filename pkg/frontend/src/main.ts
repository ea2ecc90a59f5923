// Application wiring: URL -> draft -> DOM, one cancellable in-flight
// explain request, and the pivot loop that feeds a counterfactual back
// into the editor.

import {
  ApiError,
  CounterfactualResult,
  ExplainResponse,
  PrefixRow,
  ServiceClient,
  Vocab,
} from "./api.js";
import { el, renderEditor, renderResults, renderStatus } from "./render.js";
import { QueryDraft, draftFromParams, draftToParams } from "./state.js";

export interface AppOptions {
  fetchFn?: typeof fetch;
  params?: URLSearchParams;
  onUrlChange?(params: URLSearchParams): void;
  defaultBase?: string;
}

export interface AppHandle {
  draft(): QueryDraft;
  setDraft(update: Partial<QueryDraft>): void;
  loadModel(): Promise<void>;
  submit(): Promise<void>;
  root: HTMLElement;
}

export function initApp(root: HTMLElement, options: AppOptions = {}): AppHandle {
  const fetchFn = options.fetchFn ?? fetch.bind(globalThis);
  const draft = draftFromParams(options.params ?? new URLSearchParams());
  if (!draft.base) draft.base = options.defaultBase ?? "";

  let vocab: Vocab | null = null;
  let milestones: string[] = [];
  let inflight: AbortController | null = null;
  let lastQuery: { rows: PrefixRow[]; amount: number } | null = null;
  let lastResponse: ExplainResponse | null = null;

  root.replaceChildren();
  const baseInput = el("input", {
    value: draft.base, placeholder: "service base url", "data-testid": "base-url",
  });
  const modelInput = el("input", {
    value: draft.model, placeholder: "model id", "data-testid": "model-id",
  });
  const loadButton = el("button", { "data-testid": "load-model" }, ["load model"]);
  const header = el("div", { class: "header" },
                    [baseInput, modelInput, loadButton]);
  const statusBox = el("div", { class: "status-box" });
  const editorBox = el("div", { class: "editor-box" });
  const resultsBox = el("div", { class: "results-box", "data-testid": "results" });
  root.append(header, statusBox, editorBox, resultsBox);

  function client(): ServiceClient {
    return new ServiceClient(draft.base, fetchFn);
  }

  function syncUrl(): void {
    options.onUrlChange?.(draftToParams(draft));
  }

  function redraw(busy = inflight !== null): void {
    renderEditor(editorBox, draft, vocab, milestones, busy, {
      onRowChange(index, row) {
        draft.rows[index] = row;
        afterDraftChange();
      },
      onRowRemove(index) {
        draft.rows.splice(index, 1);
        afterDraftChange();
      },
      onRowAdd() {
        const activity = vocab?.activities[0] ?? "";
        const resource = vocab?.resources[0] ?? "";
        draft.rows.push([activity, resource]);
        afterDraftChange();
      },
      onAmount(amount) {
        if (Number.isFinite(amount) && amount >= 0) draft.amount = amount;
        afterDraftChange();
      },
      onAmountMutable(flag) {
        draft.amountMutable = flag;
        afterDraftChange();
      },
      onMilestone(token) {
        draft.milestone = token;
        afterDraftChange();
      },
      onK(k) {
        if (Number.isInteger(k) && k >= 1) draft.k = k;
        afterDraftChange();
      },
      onSubmit() {
        void submit();
      },
      onCancel() {
        inflight?.abort();
      },
    });
    renderResults(resultsBox, lastQuery, lastResponse?.results ?? [],
                  lastResponse?.truncated ?? false, {
      onPivot(result) {
        pivot(result);
      },
    });
  }

  function afterDraftChange(): void {
    syncUrl();
    redraw();
  }

  async function loadModel(): Promise<void> {
    draft.base = baseInput.value.trim();
    draft.model = modelInput.value.trim();
    syncUrl();
    if (!draft.model) {
      renderStatus(statusBox, "error", "enter a model id first");
      return;
    }
    renderStatus(statusBox, "info", "loading vocabulary...");
    try {
      const [v, m] = await Promise.all([
        client().vocab(draft.model),
        client().milestones(draft.model),
      ]);
      vocab = v;
      milestones = m.milestones;
      // rows loaded from a URL may predate the vocabulary: drop unknown tokens
      draft.rows = draft.rows.filter(
        ([a, r]) => vocab!.activities.includes(a) && vocab!.resources.includes(r));
      if (!milestones.includes(draft.milestone)) draft.milestone = "";
      renderStatus(statusBox, "info",
                   `model ${draft.model}: ${vocab.activities.length} activities, ` +
                   `${milestones.length} milestones`);
    } catch (error) {
      vocab = null;
      milestones = [];
      renderStatus(statusBox, "error", describe(error));
    }
    syncUrl();
    redraw();
  }

  async function submit(): Promise<void> {
    if (!draft.rows.length || !draft.milestone || !draft.model) return;
    inflight?.abort();
    const controller = new AbortController();
    inflight = controller;
    renderStatus(statusBox, "info", "searching for counterfactuals...");
    redraw(true);
    const query = {
      prefix: draft.rows.map((r) => [...r] as PrefixRow),
      amount: draft.amount,
      milestone: draft.milestone,
      amount_mutable: draft.amountMutable,
      k: draft.k,
    };
    try {
      const response = await client().explain(draft.model, query, controller.signal);
      lastQuery = { rows: query.prefix, amount: query.amount };
      lastResponse = response;
      const note = response.truncated
        ? "time budget hit: showing partial results"
        : `${response.results.length} counterfactual(s)`;
      renderStatus(statusBox, "info", note);
    } catch (error) {
      if ((error as Error).name === "AbortError") {
        renderStatus(statusBox, "info", "request cancelled");
      } else {
        renderStatus(statusBox, "error", describe(error));
      }
    } finally {
      if (inflight === controller) inflight = null;
      redraw();
    }
  }

  function pivot(result: CounterfactualResult): void {
    draft.rows = result.trace.map((row) => [row.activity, row.resource]);
    draft.amount = result.amount;
    draft.milestone = "";
    afterDraftChange();
  }

  loadButton.addEventListener("click", () => void loadModel());
  baseInput.addEventListener("change", () => {
    draft.base = baseInput.value.trim();
    syncUrl();
  });
  modelInput.addEventListener("change", () => {
    draft.model = modelInput.value.trim();
    syncUrl();
    redraw();
  });

  redraw();

  return {
    draft: () => draft,
    setDraft(update) {
      Object.assign(draft, update);
      afterDraftChange();
    },
    loadModel,
    submit,
    root,
  };
}

function describe(error: unknown): string {
  if (error instanceof ApiError) {
    if (error.status === 422) return `rejected by the service: ${error.message}`;
    if (error.status === 404) return `not found: ${error.message}`;
    if (error.status === 504) return `search timed out: ${error.message}`;
    return `service error ${error.status}: ${error.message}`;
  }
  return error instanceof Error ? error.message : String(error);
}

// Browser entry point; tests call initApp directly instead.
if (typeof document !== "undefined" && document.getElementById("app")) {
  const params = new URLSearchParams(window.location.search);
  initApp(document.getElementById("app")!, {
    params,
    defaultBase: window.location.origin,
    onUrlChange(next) {
      const url = `${window.location.pathname}?${next.toString()}`;
      window.history.replaceState(null, "", url);
    },
  });
}
