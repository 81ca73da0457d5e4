"""Label taxonomy: character classes, row classes, and the character-to-row
projection that supplies the auxiliary supervision signal.

The blank symbol is not part of the taxonomy; it lives at index K in each
output head's distribution.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field


class LabelMapError(ValueError):
    """Label map file is malformed or violates a taxonomy invariant."""


@dataclass(frozen=True)
class LabelMap:
    """Immutable character-id -> row-id taxonomy.

    row_of[c] is the row class of character c; ids are dense and start at 0.
    """

    num_chars: int
    num_rows: int
    row_of: tuple[int, ...]
    names: tuple[str | None, ...] | None = field(default=None)

    def __post_init__(self):
        if self.num_chars < 1 or self.num_rows < 1:
            raise LabelMapError("need at least one character and one row class")
        if len(self.row_of) != self.num_chars:
            raise LabelMapError(
                f"row_of has {len(self.row_of)} entries for {self.num_chars} characters"
            )
        seen_rows = set()
        for char_id, row_id in enumerate(self.row_of):
            if not 0 <= row_id < self.num_rows:
                raise LabelMapError(
                    f"character {char_id} maps to row {row_id}, outside [0, {self.num_rows})"
                )
            seen_rows.add(row_id)
        missing = set(range(self.num_rows)) - seen_rows
        if missing:
            raise LabelMapError(f"rows {sorted(missing)} have no characters mapped to them")
        if self.names is not None and len(self.names) != self.num_chars:
            raise LabelMapError("names, when given, must cover every character id")

    def column_of(self, char_id: int) -> int:
        """Position of char_id among the characters of its row (by ascending id)."""
        row = self.row_of[char_id]
        return sum(1 for c in range(char_id) if self.row_of[c] == row)


def rows_of(chars, label_map: LabelMap) -> tuple[int, ...]:
    """Project a character sequence to its row sequence, element-wise."""
    out = []
    for c in chars:
        c = int(c)
        if not 0 <= c < label_map.num_chars:
            raise LabelMapError(f"character id {c} out of range [0, {label_map.num_chars})")
        out.append(label_map.row_of[c])
    return tuple(out)


def serialize_label_map(label_map: LabelMap) -> str:
    """Canonical text form: header line, then one tab-separated record per
    character id in ascending order. Round-trips bit-exactly."""
    lines = [f"#chars={label_map.num_chars} rows={label_map.num_rows}"]
    for char_id in range(label_map.num_chars):
        name = label_map.names[char_id] if label_map.names else None
        if name is not None:
            lines.append(f"{char_id}\t{label_map.row_of[char_id]}\t{name}")
        else:
            lines.append(f"{char_id}\t{label_map.row_of[char_id]}")
    return "\n".join(lines) + "\n"


def label_map_hash(label_map: LabelMap) -> str:
    """sha256 of the canonical serialization; identifies the taxonomy in
    manifests and checkpoints."""
    return hashlib.sha256(serialize_label_map(label_map).encode("utf-8")).hexdigest()


def save_label_map(label_map: LabelMap, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(serialize_label_map(label_map))


def parse_label_map(text: str) -> LabelMap:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("#chars="):
        raise LabelMapError("missing '#chars=<N> rows=<R>' header line")
    header = lines[0][1:].split()
    try:
        num_chars = int(header[0].removeprefix("chars="))
        num_rows = int(header[1].removeprefix("rows="))
    except (IndexError, ValueError) as exc:
        raise LabelMapError(f"unparseable header {lines[0]!r}") from exc

    rows: dict[int, int] = {}
    names: dict[int, str] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise LabelMapError(f"line {lineno}: expected 'char_id<TAB>row_id[<TAB>name]'")
        try:
            char_id, row_id = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise LabelMapError(f"line {lineno}: non-integer id in {line!r}") from exc
        if char_id in rows:
            raise LabelMapError(f"line {lineno}: duplicate character id {char_id}")
        if not 0 <= char_id < num_chars:
            raise LabelMapError(f"line {lineno}: character id {char_id} outside [0, {num_chars})")
        rows[char_id] = row_id
        if len(parts) == 3:
            names[char_id] = parts[2]

    missing = [c for c in range(num_chars) if c not in rows]
    if missing:
        raise LabelMapError(f"characters {missing[:8]} have no row assigned")
    row_of = tuple(rows[c] for c in range(num_chars))
    name_tuple = tuple(names.get(c) for c in range(num_chars)) if names else None
    return LabelMap(num_chars=num_chars, num_rows=num_rows, row_of=row_of, names=name_tuple)


def load_label_map(path) -> LabelMap:
    """Read a label map file (see serialize_label_map for the format)."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise LabelMapError(f"cannot read label map {path}: {exc}") from exc
    return parse_label_map(text)


def default_label_map(chars_per_row: int = 3, num_rows: int = 4) -> LabelMap:
    """Small synthetic alphabet: `num_rows` shape families ('a', 'b', ...)
    with `chars_per_row` variants each, named like 'a0', 'b2'."""
    num_chars = chars_per_row * num_rows
    row_of = tuple(c // chars_per_row for c in range(num_chars))
    names = tuple(
        f"{chr(ord('a') + c // chars_per_row)}{c % chars_per_row}" for c in range(num_chars)
    )
    return LabelMap(num_chars=num_chars, num_rows=num_rows, row_of=row_of, names=names)
