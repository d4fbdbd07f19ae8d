"""Mobility prompt templates and parsers for generated forecasts.

Three prompt kinds are supported:

* ``A`` names the POI id and its category, target repeats the id;
* ``B`` drops the POI id, the category stays in the sentence;
* ``C`` drops both from the input; the category becomes a separate
  classification target and the mobility target is the bare number.

``include_dates=False`` swaps the input for the date-free sentence
``"there were <counts> people visiting POI on each day."``.
"""

from __future__ import annotations

import datetime as dt
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .errors import ParseFailure, UnknownCategoryError
from .mobility_data import ForecastInstance

MONTHS = (
    "January", "February", "March", "April", "May", "June", "July",
    "August", "September", "October", "November", "December",
)
WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")

_INT = re.compile(r"(?<![\w.])\d+(?![\w])")
_AFTER_WILL_BE = re.compile(r"there will be\s+(\d+)(?!\w)")
_HISTORY = re.compile(r"there were (.*?) people visiting POI")


@dataclass(frozen=True)
class PromptVariant:
    kind: str = "C"
    include_dates: bool = True

    def __post_init__(self):
        if self.kind not in ("A", "B", "C"):
            raise ValueError(f"prompt kind must be A, B or C, not {self.kind!r}")

    @classmethod
    def parse(cls, label: str) -> "PromptVariant":
        """Inverse of :attr:`label`, e.g. ``"C"`` or ``"C-nodates"``."""
        kind, _, suffix = label.partition("-")
        if suffix not in ("", "nodates"):
            raise ValueError(f"unrecognised prompt variant {label!r}")
        return cls(kind.upper(), include_dates=not suffix)

    @property
    def label(self) -> str:
        return self.kind if self.include_dates else f"{self.kind}-nodates"


@dataclass(frozen=True)
class PromptPair:
    input_text: str
    target_text: str
    category_target: Optional[str]
    mobility_target: int
    instance_ref: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "input": self.input_text,
                "target": self.target_text,
                "category": self.category_target,
                "mobility_target": self.mobility_target,
                "instance_ref": self.instance_ref,
            },
            ensure_ascii=False,
        )

    @classmethod
    def from_json(cls, line: str) -> "PromptPair":
        rec = json.loads(line)
        return cls(
            input_text=rec["input"],
            target_text=rec["target"],
            category_target=rec.get("category"),
            mobility_target=int(rec["mobility_target"]),
            instance_ref=rec["instance_ref"],
        )


def format_date(d: dt.date) -> str:
    return f"{MONTHS[d.month - 1]} {d.day:02d}, {d.year}, {WEEKDAYS[d.weekday()]}"


def _joined(counts: Iterable[int]) -> str:
    return ", ".join(str(int(c)) for c in counts)


def render_prompt(instance: ForecastInstance, variant: PromptVariant) -> PromptPair:
    counts = _joined(instance.history_counts)
    poi = instance.poi_id
    target = instance.target_count

    if variant.kind == "A":
        where = f"POI {poi}"
    elif variant.kind == "B":
        where = f"POI {instance.category}"
    else:
        where = "POI"

    if variant.include_dates:
        span = (
            f"From {format_date(instance.history_dates[0])} to "
            f"{format_date(instance.history_dates[-1])}, "
        )
        body = (
            f"{span}there were {counts} people visiting {where} on each day. "
            f"On {format_date(instance.target_date)},"
        )
        if variant.kind == "A":
            body = f"Place-of-Interest (POI) {poi} is a {instance.category}. {body}"
    else:
        body = f"there were {counts} people visiting POI on each day."

    if variant.kind == "A":
        target_text = f"there will be {target} people visiting POI {poi}."
    elif variant.kind == "B":
        target_text = f"there will be {target} people."
    else:
        target_text = str(target)

    return PromptPair(
        input_text=body,
        target_text=target_text,
        category_target=instance.category if variant.kind == "C" else None,
        mobility_target=target,
        instance_ref=instance.ref,
    )


def render_corpus(
    instances: Sequence[ForecastInstance], variant: PromptVariant
) -> list[PromptPair]:
    return [render_prompt(inst, variant) for inst in instances]


def parse_mobility_target(text: str, variant: PromptVariant) -> int:
    text = text.strip()
    if variant.kind in ("A", "B"):
        m = _AFTER_WILL_BE.search(text)
    else:
        m = _INT.search(text)
    if m is None:
        raise ParseFailure(f"no visit count in {text!r}")
    return int(m.group(1) if m.groups() else m.group(0))


def parse_category_target(text: str, known_categories: Sequence[str]) -> str:
    if not known_categories:
        raise ValueError("known_categories must be non-empty")
    label = text.strip()
    if label in known_categories:
        return label
    raise UnknownCategoryError(label)


def extract_history(input_text: str) -> list[int]:
    """Recover the visit counts listed in a rendered prompt input."""
    m = _HISTORY.search(input_text)
    if m is None:
        raise ParseFailure("prompt has no 'there were ... people visiting POI' clause")
    return [int(tok) for tok in m.group(1).split(", ")]


def write_corpus(pairs: Iterable[PromptPair], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for pair in pairs:
            fh.write(pair.to_json() + "\n")


def read_corpus(path: str | Path) -> list[PromptPair]:
    with open(path, encoding="utf-8") as fh:
        return [PromptPair.from_json(line) for line in fh if line.strip()]
