// JSON shapes of the adjudication service. The client never computes labels,
// kappa or consensus itself; these are read-only mirrors of server state.

export type CategoryName =
  | "Tooling"
  | "Conceptual"
  | "Errors"
  | "Theoretical"
  | "API Usage"
  | "Learning";

export interface NegotiationTurn {
  speaker: "human" | "llm";
  message: string;
  proposed_category: CategoryName | null;
  timestamp: string;
}

export interface Resolution {
  final_label: CategoryName;
  conceded_by: "human" | "llm" | "both";
}

export interface ConflictView {
  post_id: string;
  human_label: CategoryName;
  llm_label: CategoryName;
  llm_rationale: string;
  turns: NegotiationTurn[];
  status: "open" | "resolved";
  resolution: Resolution | null;
  needs_senior_review: boolean;
  post?: { title: string; body_text: string; answers: string[] };
  definitions: Record<string, string>;
}

export interface ConflictPage {
  items: ConflictView[];
  page: number;
  page_size: number;
  total: number;
  pages: number;
  open_count: number;
  resolved_count: number;
}

export interface AgreementStats {
  a: string;
  b: string;
  round: number;
  n_items: number;
  n_agree: number;
  percent_agreement: number;
  kappa: number;
  kappa_ci95: [number, number];
  per_category_confusion: number[][];
  degenerate: boolean;
}

export interface Frequencies {
  counts: Record<string, number>;
  total: number;
  percentages: Record<string, number>;
}

export type DecisionAction = "concede" | "hold" | "accept_final";

export interface DecisionRequest {
  action: DecisionAction;
  label?: CategoryName;
  rationale?: string;
}
