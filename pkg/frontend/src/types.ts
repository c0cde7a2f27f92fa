export type Verdict =
  | "correct"
  | "wrong_answer"
  | "relation_hallucination"
  | "object_hallucination"
  | "not_spatial";

export interface VerdictChoice {
  key: Verdict;
  label: string;
  shortcut: string;
}

// Keyboard shortcuts 1-5 map onto these five verdicts, in this order.
export const VERDICTS: VerdictChoice[] = [
  { key: "correct", label: "Correct", shortcut: "1" },
  { key: "wrong_answer", label: "Wrong answer", shortcut: "2" },
  { key: "relation_hallucination", label: "Relation hallucination", shortcut: "3" },
  { key: "object_hallucination", label: "Object hallucination", shortcut: "4" },
  { key: "not_spatial", label: "Not spatial", shortcut: "5" },
];

export interface ReviewCard {
  pair_id: string;
  image_uri: string;
  description: string;
  question: string;
  answer: string;
  position: string;
}

export interface RateWithCI {
  rate: number;
  halfwidth: number;
  ci_low: number;
  ci_high: number;
}

export interface LiveStats {
  session_id: string;
  sample_size: number;
  complete: boolean;
  labeled_count: number;
  error_rate: RateWithCI;
  relation_hallucination_rate: RateWithCI;
  object_hallucination_rate: RateWithCI;
}

export interface SessionInfo {
  session_id: string;
  sample_size: number;
  warnings: string[];
}
