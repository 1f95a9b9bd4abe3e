"""Planted-group synthetic multi-view data.

Customers are split into preference groups. Each group prefers one block of
items, shops and genres on the e-commerce side and one block of hotels,
months and partners on the travel side; with probability ``p_in`` an
interaction is drawn from the preferred block and otherwise uniformly over
all candidates. Demography literals come from group-specific ranges.

With ``spread=True`` several groups share a block in each source, and the
sharing pattern differs between sources, so no single view separates every
group while their combination does.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .kg_store import KnowledgeGraph


class GenError(ValueError):
    pass


@dataclass
class GenConfig:
    n_users: int = 2000
    n_groups: int = 5
    n_items: int = 500
    n_shops: int = 50
    n_genres: int = 25
    n_hotels: int = 100
    n_partners: int = 5
    n_reservation_types: int = 6
    p_in: float = 0.8
    purchases_mean: float = 10.0
    clicks_mean: float = 6.0
    bookings_mean: float = 4.0
    family_edge_prob: float = 0.5
    demography_noise: float = 0.2
    # per-group (ichiba, travel) activity probability; None means all active
    cross_service_activity: list[list[float]] | None = None
    spread: bool = False
    target_group: int = 0
    seed_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_groups < 2:
            raise GenError("n_groups must be >= 2")
        probs = [self.p_in, self.family_edge_prob, self.demography_noise, self.seed_fraction]
        if any(not 0.0 <= p <= 1.0 for p in probs):
            raise GenError("probabilities must lie in [0, 1]")
        if self.cross_service_activity is not None:
            act = np.asarray(self.cross_service_activity, dtype=float)
            if act.shape != (self.n_groups, 2):
                raise GenError("cross_service_activity must be n_groups x 2")
            if ((act < 0) | (act > 1)).any():
                raise GenError("probabilities must lie in [0, 1]")
        if not 0 <= self.target_group < self.n_groups:
            raise GenError("target_group out of range")

    def activity(self) -> np.ndarray:
        if self.cross_service_activity is None:
            return np.ones((self.n_groups, 2))
        return np.asarray(self.cross_service_activity, dtype=float)

    def to_dict(self) -> dict:
        return asdict(self)


def block_maps(cfg: GenConfig) -> dict[str, np.ndarray]:
    """Block index each group prefers, per data source."""
    g = np.arange(cfg.n_groups)
    if not cfg.spread:
        return {"ichiba": g, "travel": g, "demography": g}
    # pairs of groups collide in each source, with different partners
    return {
        "ichiba": g // 2,
        "travel": (g + 1) // 2,
        "demography": g % ((cfg.n_groups + 1) // 2),
    }


@dataclass
class SyntheticData:
    ichiba: list[tuple[str, str, str]] = field(default_factory=list)
    travel: list[tuple[str, str, str]] = field(default_factory=list)
    family: list[tuple[str, str, str]] = field(default_factory=list)
    loyalty: list[tuple[str, str, str]] = field(default_factory=list)
    attributes: list[tuple[str, str, str]] = field(default_factory=list)
    entity_types: dict[str, str] = field(default_factory=dict)
    groups: dict[str, int] = field(default_factory=dict)  # customers only
    item_block: dict[str, int] = field(default_factory=dict)
    user_block: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def users(self) -> list[str]:
        return sorted(self.groups)


def _blocked(n: int, n_blocks: int) -> np.ndarray:
    """Block id per candidate: contiguous, near-equal block sizes."""
    return (np.arange(n) * n_blocks) // n


class _Sampler:
    def __init__(self, labels: list[str], n_blocks: int, p_in: float, rng):
        self.labels = labels
        self.block = _blocked(len(labels), n_blocks)
        self.members = [np.nonzero(self.block == b)[0] for b in range(n_blocks)]
        self.p_in = p_in
        self.rng = rng

    def draw(self, block: int, size: int) -> list[str]:
        out = []
        for _ in range(size):
            if self.rng.random() < self.p_in and len(self.members[block]):
                i = self.members[block][self.rng.integers(len(self.members[block]))]
            else:
                i = self.rng.integers(len(self.labels))
            out.append(self.labels[i])
        return out


def _demography(block: int, rng) -> dict[str, str]:
    age = 20 + 12 * block + rng.uniform(0, 10)
    area = 10 + 17 * block + rng.integers(0, 8)
    year = 1998 + 5 * block + rng.integers(0, 4)
    return {
        "age": f"{age:.1f}",
        "area_code": f"{area:02d}",
        "reg_date": f"{year:04d}-{rng.integers(1, 13):02d}-{rng.integers(1, 29):02d}",
    }


def generate(cfg: GenConfig) -> SyntheticData:
    rng = np.random.default_rng(cfg.seed)
    blocks = block_maps(cfg)
    n_ib = int(blocks["ichiba"].max()) + 1
    n_tb = int(blocks["travel"].max()) + 1
    n_db = int(blocks["demography"].max()) + 1
    activity = cfg.activity()
    data = SyntheticData()
    types = data.entity_types

    w = len(str(max(cfg.n_users, 1)))
    customers = [f"u{i:0{w}d}" for i in range(cfg.n_users)]
    items = [f"item{i:04d}" for i in range(cfg.n_items)]
    shops = [f"shop{i:03d}" for i in range(cfg.n_shops)]
    genres = [f"genre{i:03d}" for i in range(cfg.n_genres)]
    mid_genres = [f"genre_mid{i:02d}" for i in range(max(1, cfg.n_genres // 5))]
    hotels = [f"hotel{i:04d}" for i in range(cfg.n_hotels)]
    months = [f"month{i:02d}" for i in range(1, 13)]
    partners = [f"partner{i:02d}" for i in range(cfg.n_partners)]
    rtypes = [f"rtype{i}" for i in range(cfg.n_reservation_types)]
    for labs, ty in ((customers, "user"), (items, "item"), (shops, "shop"), (genres, "genre"),
                     (mid_genres, "genre"), (hotels, "hotel"), (months, "month"),
                     (partners, "partner"), (rtypes, "reservation_type")):
        for lab in labs:
            types[lab] = ty
    types["genre_root"] = "genre"

    # catalogue structure: items sit in the shop and genre of their block
    item_b = _blocked(cfg.n_items, n_ib)
    shop_s = _Sampler(shops, n_ib, 1.0, rng)
    genre_s = _Sampler(genres, n_ib, 1.0, rng)
    for i, it in enumerate(items):
        data.item_block[it] = int(item_b[i])
        data.ichiba.append((it, "sold_by", shop_s.draw(item_b[i], 1)[0]))
        data.ichiba.append((it, "item_under_leaf_genre", genre_s.draw(item_b[i], 1)[0]))
    mid_b = _blocked(len(genres), len(mid_genres))
    for i, g in enumerate(genres):
        data.ichiba.append((g, "genre_parent", mid_genres[mid_b[i]]))
    for m in mid_genres:
        data.ichiba.append((m, "genre_root", "genre_root"))

    item_s = _Sampler(items, n_ib, cfg.p_in, rng)
    loyal_shop_s = _Sampler(shops, n_ib, cfg.p_in, rng)
    loyal_genre_s = _Sampler(genres, n_ib, cfg.p_in, rng)
    hotel_s = _Sampler(hotels, n_tb, cfg.p_in, rng)
    month_s = _Sampler(months, n_tb, cfg.p_in, rng)
    partner_s = _Sampler(partners, min(n_tb, len(partners)), cfg.p_in, rng)
    rtype_s = _Sampler(rtypes, min(n_tb, len(rtypes)), cfg.p_in, rng)

    def activity_for(user: str, g: int, with_loyalty: bool) -> None:
        ib, tb = int(blocks["ichiba"][g]), int(blocks["travel"][g])
        data.user_block[user] = {"ichiba": ib, "travel": tb}
        if rng.random() < activity[g, 0]:
            n_buy = 1 + rng.poisson(cfg.purchases_mean)
            for it in item_s.draw(ib, n_buy):
                data.ichiba.append((user, "bought", it))
            for it in item_s.draw(ib, rng.poisson(cfg.clicks_mean)):
                data.ichiba.append((user, "clicked", it))
            if with_loyalty:
                for s in loyal_shop_s.draw(ib, 1 + rng.integers(0, 2)):
                    data.loyalty.append((user, "loyal_shop", s))
                data.loyalty.append((user, "loyal_genre", loyal_genre_s.draw(ib, 1)[0]))
        if rng.random() < activity[g, 1]:
            n_book = 1 + rng.poisson(cfg.bookings_mean)
            for h in hotel_s.draw(tb, n_book):
                data.travel.append((user, "booked", h))
            for m in month_s.draw(tb, 1 + rng.integers(0, 2)):
                data.travel.append((user, "visiting_month", m))
            data.travel.append((user, "reserved_under_partner_id", partner_s.draw(tb % len(partner_s.members), 1)[0]))
            data.travel.append((user, "user_reservation_type", rtype_s.draw(tb % len(rtype_s.members), 1)[0]))
            if with_loyalty:
                data.loyalty.append((user, "loyal_hotel", hotel_s.draw(tb, 1)[0]))

    group_of = rng.permutation(np.arange(cfg.n_users) % cfg.n_groups)
    n_rel = 0
    for i, u in enumerate(customers):
        g = int(group_of[i])
        data.groups[u] = g
        activity_for(u, g, with_loyalty=True)
        db = int(blocks["demography"][g])
        if rng.random() < cfg.demography_noise:
            db = int(rng.integers(n_db))
        for rel, lit in _demography(db, rng).items():
            data.attributes.append((u, rel, lit))
        if rng.random() < cfg.family_edge_prob:
            for _ in range(1 + rng.integers(0, 2)):
                rel_label = f"f{n_rel:0{w + 1}d}"
                n_rel += 1
                types[rel_label] = "user"
                kind = ("spouse", "parent", "child")[rng.integers(3)]
                data.family.append((u, kind, rel_label))
                activity_for(rel_label, g, with_loyalty=False)

    if not any(t[1] == "bought" for t in data.ichiba) and activity[:, 0].any():
        raise GenError("configuration produced no e-commerce interactions")
    if not data.travel and activity[:, 1].any():
        raise GenError("configuration produced no travel interactions")
    if not data.ichiba and not data.travel:
        raise GenError("configuration produced no structural triples")
    return data


def write_dataset(data: SyntheticData, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}

    def dump(name, rows):
        p = out / name
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            for r in rows:
                fh.write("\t".join(str(x) for x in r) + "\n")
        paths[name.split(".")[0]] = p

    dump("ichiba.tsv", data.ichiba)
    dump("travel.tsv", data.travel)
    dump("family.tsv", data.family)
    dump("loyalty.tsv", data.loyalty)
    dump("attributes.tsv", data.attributes)
    dump("entity_types.tsv", sorted(data.entity_types.items()))
    dump("groups.tsv", sorted(data.groups.items()))
    dump("users.txt", [(u,) for u in data.users])
    return paths


def read_groups(path) -> dict[str, int]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                u, g = line.rstrip("\n").split("\t")
                out[u] = int(g)
    return out


@dataclass
class Campaign:
    target_group: int
    seeds: list[str]
    heldout: list[str]
    negatives: list[str]

    def test_pool(self) -> list[tuple[str, int]]:
        pool = [(u, 1) for u in self.heldout] + [(u, 0) for u in self.negatives]
        return sorted(pool)


def make_campaign(groups: dict[str, int], target_group: int, seed_fraction: float,
                  rng: np.random.Generator, ratio: int = 3) -> Campaign:
    """Seed list, held-out positives and ``ratio`` x held-out negatives."""
    members = sorted(u for u, g in groups.items() if g == target_group)
    if not members:
        raise GenError(f"group {target_group} does not exist")
    if seed_fraction <= 0 or len(members) < 2.0 / seed_fraction:
        raise GenError(f"group {target_group} has {len(members)} users; need >= {2.0 / seed_fraction:g}")
    order = rng.permutation(len(members))
    n_seed = int(round(seed_fraction * len(members)))
    seeds = sorted(members[i] for i in order[:n_seed])
    heldout = sorted(members[i] for i in order[n_seed:])
    others = sorted(u for u, g in groups.items() if g != target_group)
    n_neg = ratio * len(heldout)
    if len(others) < n_neg:
        raise GenError(f"need {n_neg} negatives but only {len(others)} users outside the group")
    negatives = sorted(others[i] for i in rng.choice(len(others), n_neg, replace=False))
    return Campaign(target_group, seeds, heldout, negatives)


def write_campaign(c: Campaign, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = out / "seeds.txt"
    seeds.write_text("".join(f"{u}\n" for u in c.seeds), encoding="utf-8")
    pool = out / "test_pool.tsv"
    pool.write_text("".join(f"{u}\t{y}\n" for u, y in c.test_pool()), encoding="utf-8")
    return {"seeds": seeds, "test_pool": pool}


def toy_kg(n_entities: int = 50, n_triples: int = 200, n_relations: int = 4, seed: int = 0) -> KnowledgeGraph:
    """Random relational KG with distinct triples over untyped entities."""
    rng = np.random.default_rng(seed)
    ents = [f"e{i:03d}" for i in range(n_entities)]
    rels = [f"r{i}" for i in range(n_relations)]
    seen = set()
    while len(seen) < n_triples:
        h, t = rng.integers(n_entities, size=2)
        if h == t:
            continue
        seen.add((ents[h], rels[rng.integers(n_relations)], ents[t]))
    return KnowledgeGraph.from_labels("toy", sorted(seen))
