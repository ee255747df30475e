"""Declarative tensor-name mapping.

A mapping file is a JSON list of rules:

    {"source": "model.layers.*.self_attn.q_proj.weight",
     "dest":   "llm.blocks.*.attn.wq.weight",
     "transpose": false,
     "cast": true}

Each "*" in the source matches one dot-free segment and substitutes
into the corresponding "*" of the destination in order, so one rule
covers a whole layer stack. transpose flips a [K, O] source into the
engine's [O, K] row-major layout. cast permits converting F64/F16/BF16
sources to f32; without it a non-F32 source is an error.
Mapping is data, not code: a new model family needs only a new file.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field


class MappingError(Exception):
    pass


@dataclass
class Rule:
    source: str
    dest: str
    transpose: bool = False
    cast: bool = False

    def __post_init__(self) -> None:
        if self.source.count("*") != self.dest.count("*"):
            raise MappingError(
                f"rule {self.source!r} -> {self.dest!r}: '*' counts differ"
            )

    def pattern(self) -> re.Pattern:
        regex = "".join(
            "([^.]+)" if part == "*" else re.escape(part)
            for part in re.split(r"(\*)", self.source)
        )
        return re.compile(f"^{regex}$")

    def expand(self, source_name: str) -> str | None:
        m = self.pattern().match(source_name)
        if not m:
            return None
        out = self.dest
        for group in m.groups():
            out = out.replace("*", group, 1)
        return out

    def to_dict(self) -> dict:
        return {
            "source": self.source,
            "dest": self.dest,
            "transpose": self.transpose,
            "cast": self.cast,
        }


@dataclass
class MappingSpec:
    rules: list[Rule] = field(default_factory=list)

    @staticmethod
    def from_json(obj) -> "MappingSpec":
        if not isinstance(obj, list):
            raise MappingError("mapping file must be a JSON list of rules")
        rules = []
        for i, raw in enumerate(obj):
            try:
                rules.append(
                    Rule(
                        source=raw["source"],
                        dest=raw["dest"],
                        transpose=bool(raw.get("transpose", False)),
                        cast=bool(raw.get("cast", False)),
                    )
                )
            except (KeyError, TypeError) as e:
                raise MappingError(f"rule {i}: {e}") from e
        return MappingSpec(rules)

    @staticmethod
    def load(path) -> "MappingSpec":
        with open(path) as f:
            return MappingSpec.from_json(json.load(f))

    def to_json(self) -> list[dict]:
        return [r.to_dict() for r in self.rules]

    def resolve(self, source_names) -> list[tuple[Rule, str, str]]:
        """(rule, source name, destination name) triples, first rule wins
        per source; destinations must be unique."""
        triples: list[tuple[Rule, str, str]] = []
        seen_dest: dict[str, str] = {}
        claimed: set[str] = set()
        for rule in self.rules:
            matched = False
            for name in sorted(source_names):
                if name in claimed:
                    continue
                dest = rule.expand(name)
                if dest is None:
                    continue
                matched = True
                claimed.add(name)
                if dest in seen_dest:
                    raise MappingError(
                        f"destination {dest!r} produced twice "
                        f"(from {seen_dest[dest]!r} and {name!r})"
                    )
                seen_dest[dest] = name
                triples.append((rule, name, dest))
            if not matched:
                raise MappingError(f"rule {rule.source!r} matched no source tensor")
        return triples
