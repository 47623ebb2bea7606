import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hatesage.demography import (
    average_posteriors,
    label_group,
    read_groups,
    read_overrides,
    read_posteriors,
    write_groups,
)


def vec(p_black):
    rest = (1 - p_black) / 3
    return np.array([rest, p_black, rest, rest])


def rows(user, blacks):
    return [(user, f"m{i}", vec(b)) for i, b in enumerate(blacks)]


class TestAverage:
    def test_two_messages(self):
        assert average_posteriors(rows(1, [0.9, 0.7]))[1][1] == pytest.approx(0.8, abs=1e-15)

    def test_single_passthrough(self):
        v = vec(0.37)
        assert np.array_equal(average_posteriors([(4, "m", v)])[4], v)

    def test_three_messages(self):
        assert average_posteriors(rows(2, [0.9, 0.9, 0.6]))[2][1] == pytest.approx(0.8, abs=1e-15)

    def test_missing_users(self):
        with pytest.raises(ValueError, match=r"\[5, 9\]"):
            average_posteriors(rows(1, [0.5]), users=[1, 5, 9])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.floats(0.01, 1), min_size=4, max_size=4), min_size=1, max_size=20))
    def test_sums_to_one(self, raw):
        data = [(i % 3, str(i), np.array(r) / sum(r)) for i, r in enumerate(raw)]
        for m in average_posteriors(data).values():
            assert abs(m.sum() - 1) <= 1e-6


class TestLabel:
    def test_threshold(self):
        a = label_group({1: vec(0.85), 2: np.array([0.1, 0.8, 0.05, 0.05]), 3: vec(0.2)})
        assert a.groups == {1: "protected", 2: "other", 3: "other"}
        assert set(a.provenance.values()) == {"model"}

    def test_removals_leave_136(self):
        means = {u: vec(0.9) for u in range(168)}
        means.update({u: vec(0.3) for u in range(168, 500)})
        a = label_group(means, removals=range(32))
        assert len(a.protected) == 136
        assert all(a.provenance[u] == "override-removed" for u in range(32))

    def test_additions(self):
        a = label_group({1: vec(0.1), 2: vec(0.95)}, additions=[1])
        assert a.protected == {1, 2} and a.provenance[1] == "override-added"

    def test_unknown_override(self):
        with pytest.raises(ValueError, match="unknown users"):
            label_group({1: vec(0.9)}, removals=[2])

    def test_conflicting_override(self):
        with pytest.raises(ValueError):
            label_group({1: vec(0.9)}, removals=[1], additions=[1])

    def test_threshold_range(self):
        with pytest.raises(ValueError):
            label_group({1: vec(0.9)}, threshold=1.0)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0.01, 0.98), st.floats(0.001, 0.5))
    def test_monotone_in_threshold(self, ps, t, dt):
        means = {i: vec(p) for i, p in enumerate(ps)}
        lo = label_group(means, threshold=t).protected
        hi = label_group(means, threshold=min(t + dt, 0.99)).protected
        assert hi <= lo

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=4, max_size=20), st.randoms(use_true_random=False))
    def test_overrides_idempotent_and_order_free(self, ps, rnd):
        means = {i: vec(p) for i, p in enumerate(ps)}
        ids = list(means)
        rnd.shuffle(ids)
        rem, add = ids[:2], ids[2:4]
        a = label_group(means, removals=rem, additions=add)
        b = label_group(means, removals=rem[::-1] + rem, additions=add[::-1] + add)
        assert a.groups == b.groups and a.provenance == b.provenance


class TestFiles:
    def test_posteriors(self, tmp_path):
        p = tmp_path / "post.csv"
        p.write_text("user_id,message_id,p_white,p_black,p_hispanic,p_asian\n7,a,0.1,0.9,0,0\n7,b,0.3,0.7,0,0\n")
        out = read_posteriors(p)
        assert [r[0] for r in out] == [7, 7]
        assert average_posteriors(out)[7][1] == pytest.approx(0.8)

    def test_posteriors_bad_sum(self, tmp_path):
        p = tmp_path / "post.csv"
        p.write_text("user_id,message_id,p_white,p_black,p_hispanic,p_asian\n7,a,0.2,0.9,0,0\n")
        with pytest.raises(ValueError, match="post.csv:2"):
            read_posteriors(p)

    def test_posteriors_missing_column(self, tmp_path):
        p = tmp_path / "post.csv"
        p.write_text("user_id,message_id,p_white,p_black\n")
        with pytest.raises(ValueError, match="missing columns"):
            read_posteriors(p)

    def test_overrides(self, tmp_path):
        p = tmp_path / "ov.txt"
        p.write_text("[removals]\n3\n4  # checked by hand\n\n[additions]\n9\n")
        assert read_overrides(p) == ([3, 4], [9])
        p.write_text("3\n")
        with pytest.raises(ValueError, match="ov.txt:1"):
            read_overrides(p)

    def test_groups_round_trip(self, tmp_path):
        a = label_group({1: vec(0.9), 2: vec(0.1), 3: vec(0.95)}, removals=[3])
        write_groups(tmp_path / "g.csv", a)
        assert read_groups(tmp_path / "g.csv") == {1: "AA", 2: "other", 3: "other"}
        assert "3,other,override-removed" in (tmp_path / "g.csv").read_text()
