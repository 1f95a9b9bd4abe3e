"""Triple storage, vocabularies, negative sampling and family subgraphs.

All files are UTF-8 tab-separated. Vocabularies are built in sorted label
order so that loading the same files twice gives identical ids.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

UNK_CHAR = "\x00"
DEFAULT_TYPE = "entity"
FAMILY_RELATIONS = frozenset({"spouse", "parent", "child"})
MAX_RESAMPLE = 100


class KGFormatError(ValueError):
    """Raised for malformed or empty input files."""


class Vocab:
    """Bijective label <-> contiguous id mapping."""

    def __init__(self, labels: Iterable[str]):
        self.labels: list[str] = list(labels)
        self.index: dict[str, int] = {s: i for i, s in enumerate(self.labels)}
        if len(self.index) != len(self.labels):
            raise ValueError("duplicate labels in vocabulary")

    @classmethod
    def sorted_from(cls, labels: Iterable[str]) -> "Vocab":
        return cls(sorted(set(labels)))

    def __len__(self) -> int:
        return len(self.labels)

    def __contains__(self, label: str) -> bool:
        return label in self.index

    def __getitem__(self, label: str) -> int:
        return self.index[label]

    def get(self, label: str, default: int | None = None) -> int | None:
        return self.index.get(label, default)

    def label(self, i: int) -> str:
        return self.labels[i]

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.labels == other.labels


def build_char_vocab(literals: Iterable[str]) -> Vocab:
    """Char vocabulary with the UNK character reserved at id 0."""
    chars = set()
    for lit in literals:
        chars.update(lit)
    chars.discard(UNK_CHAR)
    return Vocab([UNK_CHAR] + sorted(chars))


def encode_chars(literal: str, chars: Vocab) -> np.ndarray:
    unk = chars[UNK_CHAR]
    return np.array([chars.get(c, unk) for c in literal], dtype=np.int64)


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


@dataclass(frozen=True)
class AttributeTriple:
    subject: int
    attribute_relation: int
    literal: str

    @property
    def k(self) -> int:
        return len(self.literal)


@dataclass
class KnowledgeGraph:
    """Indexed triples and literal attributes for one view's data source.

    ``triples`` is an (n, 3) int64 array of (head, relation, tail) ids.
    Attribute triples are held column-wise in ``attr_subject``,
    ``attr_relation`` and ``attr_literal``.
    """

    view: str
    entities: Vocab
    relations: Vocab
    chars: Vocab
    triples: np.ndarray
    attr_subject: np.ndarray
    attr_relation: np.ndarray
    attr_literal: list[str]
    type_names: Vocab
    entity_type: np.ndarray
    n_duplicates: int = 0
    n_skipped_literals: int = 0
    _positive_keys: np.ndarray | None = field(default=None, repr=False)
    _index: dict | None = field(default=None, repr=False)
    _type_pools: tuple | None = field(default=None, repr=False)

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def from_labels(
        cls,
        view: str,
        triples: Sequence[tuple[str, str, str]] = (),
        attributes: Sequence[tuple[str, str, str]] = (),
        entity_types: dict[str, str] | None = None,
        extra_entities: Iterable[str] = (),
        n_skipped_literals: int = 0,
    ) -> "KnowledgeGraph":
        entity_types = entity_types or {}
        seen = set()
        unique = []
        for t in triples:
            if t not in seen:
                seen.add(t)
                unique.append(t)
        n_dup = len(triples) - len(unique)
        if n_dup:
            log.info("%s: dropped %d duplicate triples", view, n_dup)

        ent_labels = set(extra_entities)
        rel_labels = set()
        for h, r, t in unique:
            ent_labels.add(h)
            ent_labels.add(t)
            rel_labels.add(r)
        for s, r, _ in attributes:
            ent_labels.add(s)
            rel_labels.add(r)
        entities = Vocab.sorted_from(ent_labels)
        relations = Vocab.sorted_from(rel_labels)
        chars = build_char_vocab(lit for _, _, lit in attributes)

        if unique:
            arr = np.array(
                [(entities[h], relations[r], entities[t]) for h, r, t in unique],
                dtype=np.int64,
            )
        else:
            arr = np.zeros((0, 3), dtype=np.int64)
        type_names = Vocab.sorted_from(
            [entity_types.get(e, DEFAULT_TYPE) for e in entities.labels] or [DEFAULT_TYPE]
        )
        etype = np.array(
            [type_names[entity_types.get(e, DEFAULT_TYPE)] for e in entities.labels],
            dtype=np.int64,
        )
        return cls(
            view=view,
            entities=entities,
            relations=relations,
            chars=chars,
            triples=arr,
            attr_subject=np.array([entities[s] for s, _, _ in attributes], dtype=np.int64),
            attr_relation=np.array([relations[r] for _, r, _ in attributes], dtype=np.int64),
            attr_literal=[lit for _, _, lit in attributes],
            type_names=type_names,
            entity_type=etype,
            n_duplicates=n_dup,
            n_skipped_literals=n_skipped_literals,
        )

    @classmethod
    def empty(cls, view: str) -> "KnowledgeGraph":
        return cls.from_labels(view)

    def triple_labels(self) -> list[tuple[str, str, str]]:
        e, r = self.entities.labels, self.relations.labels
        return [(e[h], r[rel], e[t]) for h, rel, t in self.triples.tolist()]

    def attribute_labels(self) -> list[tuple[str, str, str]]:
        e, r = self.entities.labels, self.relations.labels
        return [
            (e[s], r[rel], lit)
            for s, rel, lit in zip(self.attr_subject.tolist(), self.attr_relation.tolist(), self.attr_literal)
        ]

    def type_map(self) -> dict[str, str]:
        return {
            lab: self.type_names.label(t)
            for lab, t in zip(self.entities.labels, self.entity_type.tolist())
        }

    # ------------------------------------------------------------------
    # accessors

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_triples(self) -> int:
        return len(self.triples)

    @property
    def n_attributes(self) -> int:
        return len(self.attr_literal)

    def relational_triples(self) -> list[Triple]:
        return [Triple(*t) for t in self.triples.tolist()]

    def attribute_triples(self) -> list[AttributeTriple]:
        return [
            AttributeTriple(s, r, lit)
            for s, r, lit in zip(self.attr_subject.tolist(), self.attr_relation.tolist(), self.attr_literal)
        ]

    def type_of(self, entity: int) -> str:
        return self.type_names.label(int(self.entity_type[entity]))

    def literal_chars(self, literal: str) -> np.ndarray:
        return encode_chars(literal, self.chars)

    def _build_index(self) -> dict:
        idx = {}
        for name, col, n in (
            ("head", 0, self.n_entities),
            ("relation", 1, len(self.relations)),
            ("tail", 2, self.n_entities),
        ):
            key = self.triples[:, col]
            order = np.argsort(key, kind="stable")
            offsets = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(np.bincount(key, minlength=n), out=offsets[1:])
            idx[name] = (order, offsets)
        return idx

    def _rows(self, name: str, i: int) -> np.ndarray:
        if self._index is None:
            self._index = self._build_index()
        order, offsets = self._index[name]
        return order[offsets[i]:offsets[i + 1]]

    def by_head(self, entity: int) -> np.ndarray:
        """Row indices of triples headed by ``entity``."""
        return self._rows("head", entity)

    def by_tail(self, entity: int) -> np.ndarray:
        return self._rows("tail", entity)

    def by_relation(self, relation: int) -> np.ndarray:
        return self._rows("relation", relation)

    def degree(self) -> np.ndarray:
        """Number of relational or attribute triples touching each entity."""
        deg = np.bincount(self.triples[:, 0], minlength=self.n_entities)
        deg += np.bincount(self.triples[:, 2], minlength=self.n_entities)
        deg += np.bincount(self.attr_subject, minlength=self.n_entities)
        return deg

    # ------------------------------------------------------------------
    # positive-set membership

    def triple_keys(self, triples: np.ndarray) -> np.ndarray:
        n_e, n_r = self.n_entities, max(len(self.relations), 1)
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        return (t[:, 0] * n_r + t[:, 1]) * n_e + t[:, 2]

    @property
    def positive_keys(self) -> np.ndarray:
        if self._positive_keys is None:
            self._positive_keys = np.sort(self.triple_keys(self.triples))
        return self._positive_keys

    def contains(self, triples: np.ndarray) -> np.ndarray:
        keys = self.triple_keys(triples)
        pk = self.positive_keys
        if len(pk) == 0:
            return np.zeros(len(keys), dtype=bool)
        pos = np.minimum(np.searchsorted(pk, keys), len(pk) - 1)
        return pk[pos] == keys

    def type_pools(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(members grouped by type, start offset per type, size per type)."""
        if self._type_pools is None:
            n_types = len(self.type_names)
            members = np.argsort(self.entity_type, kind="stable")
            sizes = np.bincount(self.entity_type, minlength=n_types)
            starts = np.zeros(n_types, dtype=np.int64)
            np.cumsum(sizes[:-1], out=starts[1:])
            self._type_pools = (members, starts, sizes)
        return self._type_pools


# ----------------------------------------------------------------------
# loaders


def _read_tsv(path: Path) -> list[tuple[int, list[str]]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            rows.append((lineno, line.split("\t")))
    if not rows:
        raise KGFormatError(f"{path}: empty file")
    return rows


def read_triples_file(path) -> list[tuple[str, str, str]]:
    out = []
    for lineno, parts in _read_tsv(path):
        if len(parts) != 3 or not all(p.strip() for p in parts):
            raise KGFormatError(f"{path}: line {lineno}: expected head<TAB>relation<TAB>tail")
        out.append((parts[0].strip(), parts[1].strip(), parts[2].strip()))
    return out


def read_entity_types(path) -> dict[str, str]:
    types = {}
    for lineno, parts in _read_tsv(path):
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise KGFormatError(f"{path}: line {lineno}: expected entity<TAB>type")
        types[parts[0].strip()] = parts[1].strip()
    return types


def load_triples(paths, view: str = "kg", entity_types=None) -> KnowledgeGraph:
    """Load one or more triple files into a KnowledgeGraph.

    ``entity_types`` may be a dict or the path of an ``entity_types.tsv``.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    triples = []
    for p in paths:
        triples.extend(read_triples_file(p))
    if isinstance(entity_types, (str, Path)):
        entity_types = read_entity_types(entity_types)
    return KnowledgeGraph.from_labels(view, triples, entity_types=entity_types)


def load_attributes(path, kg: KnowledgeGraph, add_subjects: bool = True,
                    entity_types=None, subject_type: str = "user") -> KnowledgeGraph:
    """Append literal attribute triples to ``kg`` and rebuild vocabularies.

    Lines with an empty literal are skipped and counted in
    ``n_skipped_literals``. Unknown subjects are added as ``subject_type``
    entities when ``add_subjects`` is set, otherwise they raise.
    """
    attrs = list(kg.attribute_labels())
    skipped = kg.n_skipped_literals
    types = kg.type_map()
    if isinstance(entity_types, (str, Path)):
        entity_types = read_entity_types(entity_types)
    if entity_types:
        types.update({k: v for k, v in entity_types.items()})
    for lineno, parts in _read_tsv(path):
        if len(parts) == 2 or (len(parts) == 3 and not parts[2].strip()):
            skipped += 1
            continue
        if len(parts) != 3 or not parts[0].strip() or not parts[1].strip():
            raise KGFormatError(f"{path}: line {lineno}: expected subject<TAB>attribute<TAB>literal")
        subj, rel, lit = parts[0].strip(), parts[1].strip(), parts[2].strip()
        if subj not in kg.entities:
            if not add_subjects:
                raise KGFormatError(f"{path}: line {lineno}: unknown subject {subj!r}")
            types.setdefault(subj, subject_type)
        attrs.append((subj, rel, lit))
    if skipped > kg.n_skipped_literals:
        log.warning("%s: skipped %d attribute lines with empty literal", path,
                    skipped - kg.n_skipped_literals)
    keep = [e for e in kg.entities.labels]
    return KnowledgeGraph.from_labels(
        kg.view, kg.triple_labels(), attrs, entity_types=types,
        extra_entities=keep, n_skipped_literals=skipped,
    )


# ----------------------------------------------------------------------
# negative sampling


def negative_sample_triple(kg: KnowledgeGraph, triple, rng: np.random.Generator,
                           return_flag: bool = False):
    """Corrupt head or tail (fair coin) with a same-type entity.

    Resamples up to ``MAX_RESAMPLE`` times to avoid known positives, then
    accepts the collision. With ``return_flag`` also returns whether the
    result collides with a positive triple.
    """
    h, r, t = (triple.head, triple.relation, triple.tail) if isinstance(triple, Triple) else triple
    members, starts, sizes = kg.type_pools()
    corrupt_head = rng.random() < 0.5
    victim = h if corrupt_head else t
    ty = kg.entity_type[victim]
    pool = members[starts[ty]:starts[ty] + sizes[ty]]
    cand = (h, r, t)
    collided = True
    for _ in range(MAX_RESAMPLE):
        e = int(pool[rng.integers(len(pool))])
        cand = (e, r, t) if corrupt_head else (h, r, e)
        if not kg.contains(np.array(cand))[0]:
            collided = False
            break
    out = Triple(*cand)
    return (out, collided) if return_flag else out


def corrupt_batch(kg: KnowledgeGraph, triples: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorised ``negative_sample_triple`` over an (n, 3) array."""
    triples = np.asarray(triples, dtype=np.int64)
    n = len(triples)
    members, starts, sizes = kg.type_pools()
    corrupt_head = rng.random(n) < 0.5
    col = np.where(corrupt_head, 0, 2)
    victim = triples[np.arange(n), col]
    ty = kg.entity_type[victim]
    out = triples.copy()
    todo = np.arange(n)
    for _ in range(MAX_RESAMPLE):
        t = ty[todo]
        pick = members[starts[t] + rng.integers(0, sizes[t])]
        out[todo, col[todo]] = pick
        bad = kg.contains(out[todo])
        todo = todo[bad]
        if len(todo) == 0:
            break
    return out


def _literals_by_relation(kg: KnowledgeGraph) -> dict[int, list[str]]:
    by_rel: dict[int, set] = {}
    for r, lit in zip(kg.attr_relation.tolist(), kg.attr_literal):
        by_rel.setdefault(r, set()).add(lit)
    return {r: sorted(v) for r, v in by_rel.items()}


def negative_sample_attribute(kg: KnowledgeGraph, attr: AttributeTriple,
                              rng: np.random.Generator, _cache: dict | None = None) -> AttributeTriple:
    """Replace the literal with a different literal seen under the same relation.

    Falls back to a random same-type subject when the relation has only one
    distinct literal.
    """
    lits = (_cache if _cache is not None else _literals_by_relation(kg)).get(attr.attribute_relation, [])
    others = [x for x in lits if x != attr.literal]
    if others:
        return AttributeTriple(attr.subject, attr.attribute_relation, others[rng.integers(len(others))])
    members, starts, sizes = kg.type_pools()
    ty = kg.entity_type[attr.subject]
    pool = members[starts[ty]:starts[ty] + sizes[ty]]
    return AttributeTriple(int(pool[rng.integers(len(pool))]), attr.attribute_relation, attr.literal)


class AttributeCorruptor:
    """Batched literal corruption over literal ids.

    Literals are interned per relation; ``corrupt`` returns the negative
    subject and literal ids for a batch of positives.
    """

    def __init__(self, kg: KnowledgeGraph, literal_ids: np.ndarray):
        self.kg = kg
        self.literal_ids = np.asarray(literal_ids, dtype=np.int64)
        n_rel = max(len(kg.relations), 1)
        pools = [[] for _ in range(n_rel)]
        seen = [set() for _ in range(n_rel)]
        for r, lid in zip(kg.attr_relation.tolist(), self.literal_ids.tolist()):
            if lid not in seen[r]:
                seen[r].add(lid)
                pools[r].append(lid)
        pools = [sorted(p) for p in pools]
        self.rel_sizes = np.array([len(p) for p in pools], dtype=np.int64)
        self.rel_starts = np.zeros(n_rel, dtype=np.int64)
        np.cumsum(self.rel_sizes[:-1], out=self.rel_starts[1:])
        self.rel_members = np.array([x for p in pools for x in p], dtype=np.int64)
        # position of each row's literal inside its relation pool
        rank = {}
        for r, p in enumerate(pools):
            for j, lid in enumerate(p):
                rank[(r, lid)] = j
        self.row_rank = np.array(
            [rank[(r, lid)] for r, lid in zip(kg.attr_relation.tolist(), self.literal_ids.tolist())],
            dtype=np.int64,
        )

    def corrupt(self, rows: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        rows = np.asarray(rows, dtype=np.int64)
        rel = self.kg.attr_relation[rows]
        lit = self.literal_ids[rows]
        subj = self.kg.attr_subject[rows].copy()
        size = self.rel_sizes[rel]
        out_lit = lit.copy()
        ok = size >= 2
        if ok.any():
            own = self.row_rank[rows[ok]]
            # uniform over the size-1 other literals: draw in [0, size-1) and skip own slot
            j = rng.integers(0, size[ok] - 1)
            j = j + (j >= own)
            out_lit[ok] = self.rel_members[self.rel_starts[rel[ok]] + j]
        if (~ok).any():
            members, starts, sizes = self.kg.type_pools()
            ty = self.kg.entity_type[subj[~ok]]
            subj[~ok] = members[starts[ty] + rng.integers(0, sizes[ty])]
        return subj, out_lit


# ----------------------------------------------------------------------
# family view


def family_subgraph(kg: KnowledgeGraph, users: Iterable[str | int],
                    family_relations=FAMILY_RELATIONS) -> KnowledgeGraph:
    """Family edges of ``users`` plus the interactions of their relatives.

    Interaction triples headed by any input user are removed. Input users
    without family edges are kept as isolated entities.
    """
    labels = kg.entities.labels
    user_ids = set()
    unseen = []
    for u in users:
        if isinstance(u, str):
            if u in kg.entities:
                user_ids.add(kg.entities[u])
            else:
                unseen.append(u)
        else:
            user_ids.add(int(u))
    fam_rel = {kg.relations[r] for r in family_relations if r in kg.relations}
    rel_labels = kg.relations.labels

    kept = []
    relatives = set()
    for h, r, t in kg.triples.tolist():
        if r in fam_rel and (h in user_ids or t in user_ids):
            kept.append((labels[h], rel_labels[r], labels[t]))
            for e in (h, t):
                if e not in user_ids:
                    relatives.add(e)
    for h, r, t in kg.triples.tolist():
        if r not in fam_rel and h in relatives:
            kept.append((labels[h], rel_labels[r], labels[t]))
    types = kg.type_map()
    return KnowledgeGraph.from_labels(
        "family", kept, entity_types=types,
        extra_entities=[labels[u] for u in sorted(user_ids)] + unseen,
    )
