// Positional diff between the submitted query prefix and a counterfactual
// trace. A cell is highlighted exactly when it differs from the query cell
// at the same position; rows past the query length are additions and both
// their cells count as changed.

import type { PrefixRow, TraceRow } from "./api.js";

export interface CellDiff {
  activity: boolean;
  resource: boolean;
  added: boolean;
}

export function diffTrace(query: PrefixRow[], trace: TraceRow[]): CellDiff[] {
  return trace.map((row, i) => {
    if (i >= query.length) {
      return { activity: true, resource: true, added: true };
    }
    const [activity, resource] = query[i];
    return {
      activity: row.activity !== activity,
      resource: row.resource !== resource,
      added: false,
    };
  });
}

export function changedCellCount(diffs: CellDiff[]): number {
  return diffs.reduce(
    (acc, d) => acc + (d.activity ? 1 : 0) + (d.resource ? 1 : 0),
    0,
  );
}
