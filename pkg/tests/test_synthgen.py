import numpy as np
import pytest

from eclm import synthgen as sg
from eclm.pipeline import VIEW_SOURCES, load_view_kg


def small(**kw):
    return sg.GenConfig(**{"n_users": 200, "n_items": 100, "n_hotels": 40, **kw})


@pytest.fixture(scope="module")
def data():
    return sg.generate(small())


def test_all_active_users_appear_in_both_services(data):
    ich = {h for h, r, _ in data.ichiba if r == "bought"}
    trv = {h for h, r, _ in data.travel if r == "booked"}
    assert set(data.users) <= ich and set(data.users) <= trv


def test_groups_partition_customers(data):
    assert len(data.groups) == 200
    counts = np.bincount(list(data.groups.values()))
    assert counts.tolist() == [40] * 5


def test_same_seed_same_data(tmp_path):
    a, b = sg.generate(small(seed=3)), sg.generate(small(seed=3))
    sg.write_dataset(a, tmp_path / "a")
    sg.write_dataset(b, tmp_path / "b")
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert sg.generate(small(seed=4)).ichiba != a.ichiba


def test_purchase_purity_matches_p_in():
    data = sg.generate(sg.GenConfig(n_users=500, p_in=0.8))
    hits = [data.item_block[t] == data.user_block[h]["ichiba"]
            for h, r, t in data.ichiba if r == "bought"]
    # p_in + (1 - p_in) / n_groups = 0.84 in expectation
    assert np.mean(hits) >= 0.8


def test_inactive_service_absent():
    act = [[0.0, 1.0]] + [[1.0, 1.0]] * 4
    data = sg.generate(small(cross_service_activity=act))
    g0 = {u for u, g in data.groups.items() if g == 0}
    assert not g0 & {h for h, _, _ in data.ichiba}
    assert g0 <= {h for h, r, _ in data.travel if r == "booked"}


def test_spread_blocks_differ_between_sources():
    b = sg.block_maps(sg.GenConfig(spread=True))
    # each source merges some groups, but no two groups share every block
    keys = {tuple(b[s][g] for s in ("ichiba", "travel", "demography")) for g in range(5)}
    assert len(keys) == 5
    for s in ("ichiba", "travel", "demography"):
        assert len(set(b[s].tolist())) < 5


@pytest.mark.parametrize("kw", [{"n_groups": 1}, {"p_in": 1.5}, {"target_group": 5},
                                {"cross_service_activity": [[1, 1]]}])
def test_config_errors(kw):
    with pytest.raises(sg.GenError):
        sg.GenConfig(**kw)


def test_campaign_counts():
    groups = {f"u{i:03d}": (0 if i < 100 else 1 + i % 4) for i in range(500)}
    c = sg.make_campaign(groups, 0, 0.2, np.random.default_rng(0))
    assert len(c.seeds) == 20
    assert len(c.heldout) == 80
    assert not set(c.seeds) & set(c.heldout)
    assert len(c.negatives) == 240
    assert all(groups[u] != 0 for u in c.negatives)
    assert sum(y for _, y in c.test_pool()) == 80


def test_campaign_errors():
    groups = {f"u{i}": i % 2 for i in range(12)}
    with pytest.raises(sg.GenError, match="need >= 10"):
        sg.make_campaign(groups, 0, 0.2, np.random.default_rng(0))
    with pytest.raises(sg.GenError, match="does not exist"):
        sg.make_campaign(groups, 7, 0.2, np.random.default_rng(0))
    with pytest.raises(sg.GenError, match="negatives"):
        sg.make_campaign({**{f"a{i}": 0 for i in range(20)}, "b": 1}, 0, 0.5, np.random.default_rng(0))


def test_loaders_accept_generated_files(tmp_path, data):
    sg.write_dataset(data, tmp_path)
    c = sg.make_campaign(data.groups, 0, 0.2, np.random.default_rng(0))
    paths = sg.write_campaign(c, tmp_path)
    assert paths["seeds"].read_text().split() == c.seeds
    for view in VIEW_SOURCES:
        kg = load_view_kg(tmp_path, view)
        assert kg.n_triples + kg.n_attributes > 0
        assert data.users[0] in kg.entities
    assert sg.read_groups(tmp_path / "groups.tsv") == data.groups


def test_toy_kg_shape():
    kg = sg.toy_kg(50, 200, seed=0)
    assert kg.n_triples == 200
    assert len({(h, t) for h, _, t in kg.triples.tolist() if h == t}) == 0
