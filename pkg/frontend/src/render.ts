// DOM construction for the prefix editor and the counterfactual columns.
// Pure rendering: handlers come in, DOM goes out, no requests made here.

import type { CounterfactualResult, PrefixRow, Vocab } from "./api.js";
import { diffTrace } from "./diff.js";
import type { QueryDraft } from "./state.js";

type Child = Node | string;

export function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  children: Child[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

function option(value: string, selected: boolean): HTMLOptionElement {
  const node = el("option", { value }, [value]);
  node.selected = selected;
  return node;
}

export interface EditorHandlers {
  onRowChange(index: number, row: PrefixRow): void;
  onRowRemove(index: number): void;
  onRowAdd(): void;
  onAmount(amount: number): void;
  onAmountMutable(flag: boolean): void;
  onMilestone(token: string): void;
  onK(k: number): void;
  onSubmit(): void;
  onCancel(): void;
}

export function renderEditor(
  root: HTMLElement,
  draft: QueryDraft,
  vocab: Vocab | null,
  milestones: string[],
  busy: boolean,
  handlers: EditorHandlers,
): void {
  root.replaceChildren();
  const table = el("table", { class: "prefix-editor", "data-testid": "prefix-editor" });
  const head = el("tr", {}, [el("th", {}, ["#"]), el("th", {}, ["Activity"]),
                            el("th", {}, ["Resource"]), el("th", {}, [""])]);
  table.append(head);
  draft.rows.forEach((row, index) => {
    const actSelect = el("select", { "data-testid": `row-${index}-activity` });
    for (const token of vocab?.activities ?? [row[0]]) {
      actSelect.append(option(token, token === row[0]));
    }
    actSelect.addEventListener("change", () =>
      handlers.onRowChange(index, [actSelect.value, row[1]]));
    const resSelect = el("select", { "data-testid": `row-${index}-resource` });
    for (const token of vocab?.resources ?? [row[1]]) {
      resSelect.append(option(token, token === row[1]));
    }
    resSelect.addEventListener("change", () =>
      handlers.onRowChange(index, [row[0], resSelect.value]));
    const remove = el("button", { "data-testid": `row-${index}-remove` }, ["x"]);
    remove.addEventListener("click", () => handlers.onRowRemove(index));
    table.append(el("tr", {}, [
      el("td", {}, [String(index + 1)]),
      el("td", {}, [actSelect]),
      el("td", {}, [resSelect]),
      el("td", {}, [remove]),
    ]));
  });
  root.append(table);

  const addRow = el("button", { "data-testid": "add-row" }, ["+ add event"]);
  addRow.addEventListener("click", handlers.onRowAdd);
  root.append(addRow);

  const amount = el("input", {
    type: "number", min: "0", step: "250", value: String(draft.amount),
    "data-testid": "amount",
  });
  amount.addEventListener("change", () => handlers.onAmount(Number(amount.value)));

  const mutable = el("input", { type: "checkbox", "data-testid": "amount-mutable" });
  mutable.checked = draft.amountMutable;
  mutable.addEventListener("change", () => handlers.onAmountMutable(mutable.checked));

  const milestone = el("select", { "data-testid": "milestone" });
  milestone.append(option("", draft.milestone === ""));
  for (const token of milestones) {
    milestone.append(option(token, token === draft.milestone));
  }
  milestone.addEventListener("change", () => handlers.onMilestone(milestone.value));

  const k = el("input", {
    type: "number", min: "1", max: "10", value: String(draft.k), "data-testid": "k",
  });
  k.addEventListener("change", () => handlers.onK(Number(k.value)));

  root.append(el("div", { class: "controls" }, [
    el("label", {}, ["amount ", amount]),
    el("label", {}, ["may vary ", mutable]),
    el("label", {}, ["milestone ", milestone]),
    el("label", {}, ["k ", k]),
  ]));

  const submit = el("button", { "data-testid": "submit", class: "primary" },
                    ["explain"]);
  submit.disabled = busy || draft.rows.length === 0 || !draft.milestone || !draft.model;
  submit.addEventListener("click", handlers.onSubmit);
  const cancel = el("button", { "data-testid": "cancel" }, ["cancel"]);
  cancel.disabled = !busy;
  cancel.addEventListener("click", handlers.onCancel);
  root.append(el("div", { class: "actions" }, [submit, cancel]));
}

export interface ResultHandlers {
  onPivot(result: CounterfactualResult): void;
}

export function renderResults(
  root: HTMLElement,
  query: { rows: PrefixRow[]; amount: number } | null,
  results: CounterfactualResult[],
  truncated: boolean,
  handlers: ResultHandlers,
): void {
  root.replaceChildren();
  if (query === null) {
    return;
  }
  if (truncated) {
    root.append(el("p", { class: "warning", "data-testid": "truncated" },
                   ["search hit the time budget; results may be partial"]));
  }
  if (!results.length) {
    root.append(el("p", { "data-testid": "no-results" },
                   ["no counterfactual found for this milestone"]));
    return;
  }
  const wrapper = el("div", { class: "columns" });
  wrapper.append(renderQueryColumn(query));
  results.forEach((result, i) => {
    wrapper.append(renderResultColumn(query, result, i, handlers));
  });
  root.append(wrapper);
}

function renderQueryColumn(query: { rows: PrefixRow[]; amount: number }): HTMLElement {
  const table = el("table", { class: "trace" });
  table.append(el("tr", {}, [el("th", {}, ["Activity"]), el("th", {}, ["Resource"])]));
  for (const [activity, resource] of query.rows) {
    table.append(el("tr", {}, [el("td", {}, [activity]), el("td", {}, [resource])]));
  }
  return el("div", { class: "column query-column", "data-testid": "query-column" }, [
    el("h3", {}, ["Query"]),
    table,
    el("p", {}, [`amount ${query.amount}`]),
  ]);
}

function renderResultColumn(
  query: { rows: PrefixRow[]; amount: number },
  result: CounterfactualResult,
  index: number,
  handlers: ResultHandlers,
): HTMLElement {
  const diffs = diffTrace(query.rows, result.trace);
  const table = el("table", { class: "trace" });
  table.append(el("tr", {}, [el("th", {}, ["Activity"]), el("th", {}, ["Resource"])]));
  result.trace.forEach((row, i) => {
    const diff = diffs[i];
    const actCell = el("td", { "data-testid": `cf-${index}-row-${i}-activity` },
                       [row.activity]);
    if (diff.activity) actCell.classList.add("changed");
    const resCell = el("td", { "data-testid": `cf-${index}-row-${i}-resource` },
                       [row.resource]);
    if (diff.resource) resCell.classList.add("changed");
    const tr = el("tr", {}, [actCell, resCell]);
    if (diff.added) tr.classList.add("added");
    table.append(tr);
  });

  const amountChanged = result.amount !== query.amount;
  const amountLine = el("p", { "data-testid": `cf-${index}-amount` },
                        [`amount ${result.amount}`]);
  if (amountChanged) amountLine.classList.add("changed");

  const losses = Object.entries(result.losses)
    .map(([name, value]) => `${name} ${value.toFixed(4)}`)
    .join(", ");
  const badge = el("span", {
    class: result.plausible ? "badge ok" : "badge bad",
    "data-testid": `cf-${index}-plausible`,
  }, [result.plausible ? "plausible" : "implausible"]);

  const pivot = el("button", { "data-testid": `cf-${index}-pivot` },
                   ["use as new query"]);
  pivot.addEventListener("click", () => handlers.onPivot(result));

  return el("div", {
    class: "column cf-column",
    "data-testid": `cf-column-${index}`,
  }, [
    el("h3", {}, [`Counterfactual ${index + 1} `, badge]),
    table,
    amountLine,
    el("p", { class: "metrics" },
       [`proximity ${result.proximity.toFixed(4)}, sparsity ${result.sparsity}, ` +
        `iterations ${result.iterations}`]),
    el("p", { class: "losses" }, [losses]),
    pivot,
  ]);
}

export function renderStatus(root: HTMLElement, kind: "" | "info" | "error",
                             message: string): void {
  root.replaceChildren();
  if (!message) return;
  root.append(el("p", { class: `status ${kind}`, "data-testid": "status" }, [message]));
}
