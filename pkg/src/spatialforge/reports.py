"""Per-stage accounting records shared by every pipeline stage."""

from __future__ import annotations

import json
from dataclasses import dataclass, field


@dataclass
class StageReport:
    """Input/kept/dropped ledger for one pipeline stage.

    ``reasons`` breaks down drops and must sum to ``dropped``. ``sidelined``
    counts items routed to a side channel (neither kept nor dropped), and
    ``info`` holds informational tallies that take no part in accounting.
    """

    stage: str
    input: int
    kept: int
    dropped: int
    reasons: dict[str, int] = field(default_factory=dict)
    sidelined: dict[str, int] = field(default_factory=dict)
    info: dict[str, int] = field(default_factory=dict)

    def validate(self) -> None:
        if self.input != self.kept + self.dropped + sum(self.sidelined.values()):
            raise ValueError(
                f"stage {self.stage!r}: input {self.input} != kept {self.kept} "
                f"+ dropped {self.dropped} + sidelined {sum(self.sidelined.values())}"
            )
        if self.reasons and sum(self.reasons.values()) != self.dropped:
            raise ValueError(
                f"stage {self.stage!r}: reasons sum {sum(self.reasons.values())} "
                f"!= dropped {self.dropped}"
            )

    def to_dict(self) -> dict:
        out: dict = {
            "stage": self.stage,
            "input": self.input,
            "kept": self.kept,
            "dropped": self.dropped,
            "reasons": {k: self.reasons[k] for k in sorted(self.reasons)},
        }
        if self.sidelined:
            out["sidelined"] = {k: self.sidelined[k] for k in sorted(self.sidelined)}
        if self.info:
            out["info"] = {k: self.info[k] for k in sorted(self.info)}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> "StageReport":
        return cls(
            stage=obj["stage"],
            input=obj["input"],
            kept=obj["kept"],
            dropped=obj["dropped"],
            reasons=dict(obj.get("reasons", {})),
            sidelined=dict(obj.get("sidelined", {})),
            info=dict(obj.get("info", {})),
        )
