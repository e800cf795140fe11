"""Field schemas per ad group, the feature vocabulary, and record encoding.

An ad record is a mapping from field name to a tuple of raw string values.
Encoding turns it into per-field lists of integer feature indices:

* univalent fields keep their single value as one index,
* multivalent fields are lowercased, whitespace-normalized, split into
  character bi-grams, and each bi-gram becomes one index (a bag),
* numerical fields are bucketized against the schema's boundaries and the
  bucket id becomes the index.

Values never seen while the vocabulary was built map to the field's reserved
out-of-vocabulary index.
"""

from __future__ import annotations

import hashlib
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Mapping, Sequence

GROUPS = ("target", "contextual", "clicked", "unclicked")
AUX_GROUPS = ("contextual", "clicked", "unclicked")

RawRecord = Mapping[str, Sequence[str]]


class FieldKind(str, Enum):
    UNIVALENT = "univalent"
    MULTIVALENT = "multivalent"
    NUMERICAL = "numerical"


class SchemaError(ValueError):
    pass


class EncodeError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSchema:
    name: str
    kind: FieldKind
    boundaries: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind == FieldKind.NUMERICAL:
            if not self.boundaries:
                raise SchemaError(f"numerical field {self.name!r} needs bucket boundaries")
            if any(nxt <= prev for prev, nxt in zip(self.boundaries, self.boundaries[1:])):
                raise SchemaError(f"boundaries of {self.name!r} must be strictly increasing")
        elif self.boundaries:
            raise SchemaError(f"non-numerical field {self.name!r} must not have boundaries")


@dataclass(frozen=True)
class GroupSchema:
    group: str
    fields: tuple[FieldSchema, ...]

    def __post_init__(self):
        if self.group not in GROUPS:
            raise SchemaError(f"unknown ad group {self.group!r}")
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise SchemaError(f"duplicate field names in group {self.group!r}")

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)


def normalize_text(text: str) -> str:
    """Lowercase and collapse runs of whitespace to single spaces."""
    return " ".join(text.lower().split())


def bigrams(text: str) -> list[str]:
    """Character bi-grams of the normalized text ('ABCD' -> ab, bc, cd)."""
    norm = normalize_text(text)
    return [norm[i : i + 2] for i in range(len(norm) - 1)]


def bucketize(value: float, boundaries: Sequence[float]) -> int:
    """Bucket id for a numerical value: 0 below the first boundary, then one
    bucket per half-open interval, values at/above the last boundary go to the
    final bucket."""
    return bisect_right(boundaries, value)


class Vocabulary:
    """Dense (field, value) -> index map with one reserved OOV index per field.

    Built single-writer from a record stream, then frozen; a frozen vocabulary
    is immutable and safe to share across threads.
    """

    def __init__(self):
        self._index: dict[tuple[str, str], int] = {}
        self._oov: dict[str, int] = {}
        self._next = 0
        self._frozen = False

    @property
    def size(self) -> int:
        """Total number of distinct feature indices (the embedding row count)."""
        return self._next

    @property
    def frozen(self) -> bool:
        return self._frozen

    def freeze(self) -> "Vocabulary":
        self._frozen = True
        return self

    def register_field(self, field_name: str) -> None:
        if field_name not in self._oov:
            if self._frozen:
                raise SchemaError("vocabulary is frozen")
            self._oov[field_name] = self._next
            self._next += 1

    def add(self, field_name: str, value: str) -> int:
        if self._frozen:
            raise SchemaError("vocabulary is frozen")
        self.register_field(field_name)
        key = (field_name, value)
        idx = self._index.get(key)
        if idx is None:
            idx = self._next
            self._index[key] = idx
            self._next += 1
        return idx

    def lookup(self, field_name: str, value: str) -> int:
        """Index of (field, value); the field's OOV index if unseen."""
        idx = self._index.get((field_name, value))
        if idx is not None:
            return idx
        try:
            return self._oov[field_name]
        except KeyError:
            raise EncodeError(f"field {field_name!r} is not in the vocabulary") from None

    def oov(self, field_name: str) -> int:
        return self._oov[field_name]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.dumps())

    def dumps(self) -> str:
        lines = [f"{f}\t<oov>\t{i}\n" for f, i in sorted(self._oov.items(), key=lambda kv: kv[1])]
        lines += [f"{f}\t{v}\t{i}\n" for (f, v), i in sorted(self._index.items(), key=lambda kv: kv[1])]
        lines.sort(key=lambda line: int(line.rsplit("\t", 1)[1]))
        return "".join(lines)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        vocab = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                field_name, value, idx = line.rstrip("\n").split("\t")
                idx = int(idx)
                if value == "<oov>":
                    vocab._oov[field_name] = idx
                else:
                    vocab._index[(field_name, value)] = idx
                vocab._next = max(vocab._next, idx + 1)
        return vocab.freeze()

    def content_hash(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True, eq=True)
class EncodedInstance:
    """One ad's features as per-field index lists, plus the raw values they
    came from (kept so instances can be re-serialized and deduplicated)."""

    group: str
    indices: tuple[tuple[int, ...], ...]
    raw: tuple[tuple[str, tuple[str, ...]], ...]

    def identity(self) -> tuple:
        """Group-independent ad identity, used for click/impression matching."""
        return self.raw

    def raw_dict(self) -> dict[str, tuple[str, ...]]:
        return dict(self.raw)


def _field_tokens(fs: FieldSchema, values: Sequence[str]) -> list[str]:
    """Vocabulary keys contributed by one field of a raw record."""
    if fs.kind == FieldKind.UNIVALENT:
        if len(values) != 1 or values[0] == "":
            raise EncodeError(f"univalent field {fs.name!r} needs exactly one value")
        return [values[0]]
    if fs.kind == FieldKind.NUMERICAL:
        if len(values) != 1 or values[0] == "":
            raise EncodeError(f"numerical field {fs.name!r} needs exactly one value")
        try:
            x = float(values[0])
        except ValueError:
            raise EncodeError(f"numerical field {fs.name!r}: bad value {values[0]!r}") from None
        return [str(bucketize(x, fs.boundaries))]
    tokens: list[str] = []
    for v in values:
        tokens.extend(bigrams(v))
    return tokens


def build_vocabulary(records: Iterable[tuple[str, RawRecord]],
                     schemas: Mapping[str, GroupSchema]) -> Vocabulary:
    """Build and freeze a vocabulary from a stream of (group, record) pairs.

    Every field of every group gets an OOV index even if no record mentions it.
    """
    vocab = Vocabulary()
    for group in GROUPS:
        if group in schemas:
            for fs in schemas[group].fields:
                vocab.register_field(fs.name)
    for group, record in records:
        schema = schemas[group]
        for fs in schema.fields:
            values = tuple(record.get(fs.name, ()))
            if fs.kind != FieldKind.MULTIVALENT and not values:
                continue  # tolerated while building; encode_instance rejects it
            for token in _field_tokens(fs, values):
                vocab.add(fs.name, token)
    return vocab.freeze()


def encode_instance(record: RawRecord, group_schema: GroupSchema, vocab: Vocabulary) -> EncodedInstance:
    """Encode a raw record against a frozen vocabulary.

    Unseen values map to the field's OOV index; a missing univalent or
    numerical field is an error naming the field.
    """
    if not vocab.frozen:
        raise EncodeError("vocabulary must be frozen before encoding")
    per_field: list[tuple[int, ...]] = []
    raw: list[tuple[str, tuple[str, ...]]] = []
    for fs in group_schema.fields:
        values = tuple(record.get(fs.name, ()))
        if fs.kind != FieldKind.MULTIVALENT and len(values) != 1:
            raise EncodeError(f"missing required {fs.kind.value} field {fs.name!r}")
        tokens = _field_tokens(fs, values)
        per_field.append(tuple(vocab.lookup(fs.name, t) for t in tokens))
        raw.append((fs.name, values))
    return EncodedInstance(group=group_schema.group, indices=tuple(per_field), raw=tuple(raw))


# ---------------------------------------------------------------------------
# Schema file I/O: one field per line,
#   <group>\t<field_name>\t<kind>[\t<comma-separated boundaries>]
# ---------------------------------------------------------------------------

def dump_schemas(schemas: Mapping[str, GroupSchema]) -> str:
    lines = []
    for group in GROUPS:
        if group not in schemas:
            continue
        for fs in schemas[group].fields:
            cols = [group, fs.name, fs.kind.value]
            if fs.kind == FieldKind.NUMERICAL:
                cols.append(",".join(repr(b) for b in fs.boundaries))
            lines.append("\t".join(cols) + "\n")
    return "".join(lines)


def save_schemas(schemas: Mapping[str, GroupSchema], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_schemas(schemas))


def parse_schemas(text: str) -> dict[str, GroupSchema]:
    fields: dict[str, list[FieldSchema]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise SchemaError(f"schema line {lineno}: expected 3 or 4 columns")
        group, name, kind = cols[0], cols[1], FieldKind(cols[2])
        boundaries = tuple(float(b) for b in cols[3].split(",")) if len(cols) == 4 else ()
        fields.setdefault(group, []).append(FieldSchema(name, kind, boundaries))
    return {g: GroupSchema(g, tuple(fs)) for g, fs in fields.items()}


def load_schemas(path) -> dict[str, GroupSchema]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_schemas(fh.read())


def schemas_hash(schemas: Mapping[str, GroupSchema]) -> str:
    return hashlib.sha256(dump_schemas(schemas).encode("utf-8")).hexdigest()[:16]
