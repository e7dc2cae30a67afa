import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from raprec.dataio import (OCCUPATIONS, AttributeTable, DataFormatError, LabelAccessError,
                           RatingDataset, age_bucket, attack_split_from_manifest, load_ratings,
                           load_user_attributes, rec_split_from_manifest, save_manifest,
                           split_attacker, split_recommendation)


def toy_dataset(n_users=6, n_items=50, per_user=(25, 12, 40, 20, 8, 29), seed=0) -> RatingDataset:
    rng = np.random.default_rng(seed)
    u, i, r, t = [], [], [], []
    for user, n in zip(range(n_users), per_user):
        items = rng.choice(n_items, size=n, replace=False)
        u += [user] * n
        i += items.tolist()
        r += rng.integers(1, 6, size=n).tolist()
        t += rng.integers(0, 10_000, size=n).tolist()
    return RatingDataset(np.array(u), np.array(i), np.array(r), np.array(t), n_users, n_items)


class TestLoadRatings:
    def test_two_lines(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("1\t1\t5\t0\n1\t2\t3\t1\n")
        ds = load_ratings(p)
        assert (ds.num_users, ds.num_items) == (1, 2)
        assert ds.rated_set(0) == {0, 1}

    def test_empty(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("")
        ds = load_ratings(p)
        assert len(ds) == 0 and ds.num_users == 0 and ds.num_items == 0

    def test_malformed_line_number(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("1\t1\t5\t0\n1\t2\t3\n")
        with pytest.raises(DataFormatError, match=":2:"):
            load_ratings(p)

    def test_rating_out_of_range(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("1\t1\t6\t0\n")
        with pytest.raises(DataFormatError, match="outside 1..5"):
            load_ratings(p)

    def test_duplicate_pair(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("1\t1\t5\t0\n1\t1\t4\t3\n")
        with pytest.raises(DataFormatError, match="duplicate"):
            load_ratings(p)

    def test_reindexing_is_bijection(self, tmp_path):
        p = tmp_path / "u.data"
        p.write_text("10\t7\t5\t0\n3\t99\t3\t1\n10\t99\t2\t2\n")
        ds = load_ratings(p)
        for raw in (3, 10):
            assert ds.user_ids.decode(ds.user_ids.encode(raw)) == raw
        for idx in range(ds.num_items):
            assert ds.item_ids.encode(ds.item_ids.decode(idx)) == idx

    def test_rated_is_time_ordered(self):
        ds = toy_dataset()
        for u in range(ds.num_users):
            assert np.all(np.diff(ds.rated_timestamps(u)) >= 0)

    def test_tsv_round_trip(self, tmp_path):
        ds = toy_dataset()
        ds.to_tsv(tmp_path / "x.data")
        back = load_ratings(tmp_path / "x.data")
        assert len(back) == len(ds)

    def test_immutable(self):
        ds = toy_dataset()
        with pytest.raises(ValueError):
            ds.items[0] = 3


class TestAttributes:
    def write(self, tmp_path, rows):
        p = tmp_path / "u.user"
        p.write_text("".join(r + "\n" for r in rows))
        return p

    def ids(self, tmp_path, n):
        p = tmp_path / "u.data"
        p.write_text("".join(f"{u}\t1\t3\t0\n" for u in range(1, n + 1)))
        return load_ratings(p).user_ids

    def test_example_row(self, tmp_path):
        at = load_user_attributes(self.write(tmp_path, ["1|24|M|technician|85711"]), self.ids(tmp_path, 1))
        assert at.gender[0] == 0 and at.age[0] == 0
        assert OCCUPATIONS[at.occupation[0]] == "technician"

    @pytest.mark.parametrize("age,bucket", [(1, 0), (34, 0), (35, 1), (44, 1), (45, 2), (99, 2)])
    def test_age_boundaries(self, age, bucket):
        assert age_bucket(age) == bucket

    @given(st.integers(1, 120))
    def test_bucketing_total(self, age):
        assert age_bucket(age) in (0, 1, 2)

    def test_vocabulary_has_21_sorted_entries(self):
        assert len(OCCUPATIONS) == 21 and list(OCCUPATIONS) == sorted(OCCUPATIONS)

    def test_unknown_occupation(self, tmp_path):
        with pytest.raises(DataFormatError, match="astronaut"):
            load_user_attributes(self.write(tmp_path, ["1|30|F|astronaut|0"]), self.ids(tmp_path, 1))

    def test_user_not_in_map(self, tmp_path):
        with pytest.raises(DataFormatError, match="user 2"):
            load_user_attributes(self.write(tmp_path, ["2|30|F|artist|0"]), self.ids(tmp_path, 1))

    def test_access_guard(self):
        at = AttributeTable(np.array([0, 1, 0]), np.array([0, 1, 2]), np.array([3, 4, 5]))
        view = at.restricted([0, 2])
        np.testing.assert_array_equal(view.labels("gender", [0, 2]), [0, 0])
        with pytest.raises(LabelAccessError):
            view.labels("age", [1])
        # restricting twice never widens
        with pytest.raises(LabelAccessError):
            view.restricted([1]).labels("gender", [1])


class TestRecSplit:
    def test_partition_property(self):
        ds = toy_dataset()
        split = split_recommendation(ds, 10, seed=1)
        for u, held in split.heldout.items():
            train = split.train.rated_set(u)
            assert len(held) == 10
            assert not train & held
            assert train | held == ds.rated_set(u)
        assert split.excluded == (4,)
        assert split.train.rated_set(4) == ds.rated_set(4)

    def test_counts(self):
        ds = toy_dataset(n_users=1, n_items=200, per_user=(129,))
        split = split_recommendation(ds, 35, seed=0)
        assert len(split.heldout[0]) == 35
        assert len(split.train.rated(0)) == 94

    def test_all_items_held_out_is_degenerate(self):
        ds = toy_dataset()
        split = split_recommendation(ds, 20, seed=0)
        assert 3 in split.degenerate
        assert len(split.train.rated(3)) == 0

    def test_deterministic(self):
        ds = toy_dataset()
        a, b = split_recommendation(ds, 10, 5), split_recommendation(ds, 10, 5)
        assert a.heldout == b.heldout
        assert split_recommendation(ds, 10, 6).heldout != a.heldout

    def test_bad_l(self):
        with pytest.raises(ValueError):
            split_recommendation(toy_dataset(), 0, 0)

    def test_manifest_round_trip(self, tmp_path):
        ds = toy_dataset()
        split = split_recommendation(ds, 10, 3)
        save_manifest(split, tmp_path / "m.json")
        back = rec_split_from_manifest(ds, tmp_path / "m.json")
        assert back.heldout == split.heldout
        np.testing.assert_array_equal(back.train.rated_mask(), split.train.rated_mask())


class TestAttackSplit:
    def test_sizes_canonical_n(self):
        ds = RatingDataset(np.arange(943), np.zeros(943, int), np.full(943, 3), np.zeros(943, int),
                           943, 1)
        split = split_attacker(ds, 0.8, 1, seed=0)
        assert (len(split.train_users), len(split.test_users)) == (754, 189)

    def test_two_users_half(self):
        ds = toy_dataset(n_users=2, per_user=(25, 12))
        split = split_attacker(ds, 0.5, 5, seed=0)
        assert len(split.train_users) == 1 and len(split.test_users) == 1

    def test_partition_and_intact_training_users(self):
        ds = toy_dataset()
        split = split_attacker(ds, 0.5, 10, seed=2)
        assert not set(split.train_users) & set(split.test_users)
        assert set(split.train_users) | set(split.test_users) == set(range(ds.num_users))
        for u in split.train_users:
            assert split.data.rated_set(u) == ds.rated_set(u)
        for u in split.test_users:
            n = len(ds.rated(u))
            assert len(split.removed[u]) == min(10, n - 1)
            assert split.data.rated_set(u) | split.removed[u] == ds.rated_set(u)

    def test_deterministic(self):
        ds = toy_dataset()
        a, b = split_attacker(ds, 0.5, 5, 9), split_attacker(ds, 0.5, 5, 9)
        np.testing.assert_array_equal(a.train_users, b.train_users)
        assert a.removed == b.removed

    @pytest.mark.parametrize("frac", [0.0, 1.0, -0.1, 1.5])
    def test_bad_frac(self, frac):
        with pytest.raises(ValueError):
            split_attacker(toy_dataset(), frac, 5, 0)

    def test_manifest_round_trip(self, tmp_path):
        ds = toy_dataset()
        split = split_attacker(ds, 0.5, 5, 1)
        save_manifest(split, tmp_path / "a.json")
        assert json.loads((tmp_path / "a.json").read_text())["kind"] == "attack"
        back = attack_split_from_manifest(ds, tmp_path / "a.json")
        np.testing.assert_array_equal(back.test_users, split.test_users)
        np.testing.assert_array_equal(back.data.rated_mask(), split.data.rated_mask())
