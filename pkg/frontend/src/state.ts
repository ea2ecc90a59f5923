// The whole editor state round-trips through the URL, so any view is a
// shareable link and nothing hidden can influence a submission.

import type { PrefixRow } from "./api.js";

export interface QueryDraft {
  base: string;
  model: string;
  rows: PrefixRow[];
  amount: number;
  milestone: string;
  amountMutable: boolean;
  k: number;
}

export function emptyDraft(): QueryDraft {
  return {
    base: "",
    model: "",
    rows: [],
    amount: 10000,
    milestone: "",
    amountMutable: false,
    k: 3,
  };
}

export function draftToParams(draft: QueryDraft): URLSearchParams {
  const params = new URLSearchParams();
  if (draft.base) params.set("base", draft.base);
  if (draft.model) params.set("model", draft.model);
  if (draft.rows.length) params.set("prefix", JSON.stringify(draft.rows));
  params.set("amount", String(draft.amount));
  if (draft.milestone) params.set("milestone", draft.milestone);
  if (draft.amountMutable) params.set("amount_mutable", "1");
  params.set("k", String(draft.k));
  return params;
}

export function draftFromParams(params: URLSearchParams): QueryDraft {
  const draft = emptyDraft();
  draft.base = params.get("base") ?? "";
  draft.model = params.get("model") ?? "";
  const rawPrefix = params.get("prefix");
  if (rawPrefix) {
    try {
      const parsed = JSON.parse(rawPrefix);
      if (
        Array.isArray(parsed) &&
        parsed.every(
          (r) => Array.isArray(r) && r.length === 2 &&
            typeof r[0] === "string" && typeof r[1] === "string",
        )
      ) {
        draft.rows = parsed as PrefixRow[];
      }
    } catch {
      // malformed prefix in the URL: fall back to an empty editor
    }
  }
  const rawAmount = params.get("amount");
  if (rawAmount !== null) {
    const amount = Number(rawAmount);
    if (Number.isFinite(amount) && amount >= 0) draft.amount = amount;
  }
  draft.milestone = params.get("milestone") ?? "";
  draft.amountMutable = params.get("amount_mutable") === "1";
  const k = Number(params.get("k"));
  if (Number.isInteger(k) && k >= 1) draft.k = k;
  return draft;
}
