"""Hint-set catalog: boolean planner knobs and the SET statements they map to.

A hint set is a complete assignment of the six join/scan planner booleans.
A catalog is the finite, ordered family of hint sets candidate plans are
generated under; entry 0 is always the all-enabled default.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Iterable, Union

from .errors import DuplicateHintSet, InvalidHintSet, MissingDefault

JOIN_KNOBS = ("enable_hashjoin", "enable_mergejoin", "enable_nestloop")
SCAN_KNOBS = ("enable_indexscan", "enable_seqscan", "enable_indexonlyscan")
KNOBS = JOIN_KNOBS + SCAN_KNOBS


@dataclass(frozen=True)
class HintSet:
    """One complete knob assignment, identified by its catalog index."""

    id: int
    flags: tuple[bool, bool, bool, bool, bool, bool]  # values in KNOBS order

    def flag(self, knob: str) -> bool:
        return self.flags[KNOBS.index(knob)]

    def as_dict(self) -> dict[str, bool]:
        return dict(zip(KNOBS, self.flags))

    def is_valid(self) -> bool:
        """At least one join knob and one scan knob must stay enabled."""
        return any(self.flags[:3]) and any(self.flags[3:])


@dataclass(frozen=True)
class Catalog:
    entries: tuple[HintSet, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, hint_id: int) -> HintSet:
        return self.entries[hint_id]

    def hash(self) -> str:
        """Digest of the flag table; ids are positional so flags suffice."""
        payload = json.dumps([list(h.flags) for h in self.entries])
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


ALL_TRUE = (True,) * 6


def default_catalog() -> Catalog:
    """Every valid assignment: non-empty join subset x non-empty scan subset.

    That is (2^3 - 1)^2 = 49 hint sets. The all-enabled set comes first;
    the rest follow in descending lexicographic order of their flag tuples,
    so the ordering is deterministic.
    """
    combos = [
        flags
        for flags in product((True, False), repeat=6)
        if any(flags[:3]) and any(flags[3:])
    ]
    combos.sort(key=lambda f: tuple(not v for v in f))  # all-true sorts first
    assert combos[0] == ALL_TRUE
    return Catalog(tuple(HintSet(i, flags) for i, flags in enumerate(combos)))


def parse_catalog(document: Union[str, bytes, list]) -> Catalog:
    """Validate a JSON catalog: [{"id": int, "flags": {knob: bool}}, ...]."""
    if isinstance(document, (str, bytes)):
        document = json.loads(document)
    if not isinstance(document, list) or not document:
        raise MissingDefault("catalog must be a non-empty list of hint sets")

    entries = []
    seen: set[tuple[bool, ...]] = set()
    for position, obj in enumerate(document):
        flags_obj = obj.get("flags", {})
        missing = [k for k in KNOBS if k not in flags_obj]
        if missing:
            raise InvalidHintSet(f"entry {position} missing knobs: {missing}")
        unknown = [k for k in flags_obj if k not in KNOBS]
        if unknown:
            raise InvalidHintSet(f"entry {position} has unknown knobs: {unknown}")
        flags = tuple(bool(flags_obj[k]) for k in KNOBS)
        hint = HintSet(int(obj.get("id", position)), flags)
        if hint.id != position:
            raise InvalidHintSet(
                f"entry at position {position} has id {hint.id}; ids must be 0..n-1"
            )
        if not hint.is_valid():
            raise InvalidHintSet(
                f"entry {position} disables every join or every scan knob"
            )
        if flags in seen:
            raise DuplicateHintSet(f"entry {position} repeats an earlier assignment")
        seen.add(flags)
        entries.append(hint)

    if entries[0].flags != ALL_TRUE:
        raise MissingDefault("entry 0 must enable all six knobs")
    return Catalog(tuple(entries))


def load_catalog(path: Union[str, Path]) -> Catalog:
    return parse_catalog(Path(path).read_text(encoding="utf-8"))


def dump_catalog(catalog: Catalog) -> str:
    rows = [{"id": h.id, "flags": h.as_dict()} for h in catalog]
    return json.dumps(rows, indent=2)


def to_set_statements(hint: HintSet) -> list[str]:
    """One session statement per knob, in fixed KNOBS order."""
    return [
        f"SET {knob} = {'on' if value else 'off'}"
        for knob, value in zip(KNOBS, hint.flags)
    ]


def reset_statements() -> list[str]:
    """Statements restoring the default all-enabled session state."""
    return [f"SET {knob} = on" for knob in KNOBS]
