import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cogbias.domain import (SplitSpec, UserLog, Visit, filter_users, make_windows, normalize_visit,
                            split_sizes, split_user, windows_to_arrays)
from cogbias.errors import InsufficientVisits, InvalidVisit

PAD = 33


def make_log(n_visits, uid="u"):
    return UserLog(uid, tuple(normalize_visit([k % 33], 3) for k in range(n_visits)))


def test_normalize_pads_short_visit():
    v = normalize_visit([3, 7, 7], 5)
    assert v.actions == (3, 7, 7, PAD, PAD)
    assert v.mask == (True, True, True, False, False)


def test_normalize_identity_when_exact_length():
    v = normalize_visit([1, 2, 3, 4, 5], 5)
    assert v.actions == (1, 2, 3, 4, 5)
    assert all(v.mask)


def test_normalize_crops_around_focal():
    raw = list(range(40))
    raw = [a % 33 for a in raw]
    v = normalize_visit(raw, 21, focal=20)
    assert v.actions == tuple(raw[10:31])


def test_normalize_focal_near_edges_is_clamped():
    raw = [a % 33 for a in range(40)]
    assert normalize_visit(raw, 21, focal=2).actions == tuple(raw[:21])
    assert normalize_visit(raw, 21, focal=39).actions == tuple(raw[19:])


def test_normalize_without_focal_keeps_prefix():
    raw = [a % 33 for a in range(30)]
    assert normalize_visit(raw, 21).actions == tuple(raw[:21])


@pytest.mark.parametrize("raw", [[], [33], [-1, 2]])
def test_normalize_rejects_bad_visits(raw):
    with pytest.raises(InvalidVisit):
        normalize_visit(raw, 5)


def test_visit_needs_one_real_action():
    with pytest.raises(InvalidVisit):
        Visit((PAD, PAD), (False, False))


def test_split_sizes_twenty_visits():
    assert split_sizes(20, SplitSpec()) == (4, 10, 6)


def test_split_fifty_visits_preserves_order():
    log = make_log(50)
    parts = split_user(log)
    assert [len(p.visits) for p in parts] == [10, 25, 15]
    assert sum((p.visits for p in parts), ()) == log.visits


def test_split_ten_visits_too_short_for_m6():
    with pytest.raises(InsufficientVisits) as info:
        split_user(make_log(10), m=6)
    assert info.value.stage == "common"
    assert info.value.need == 7


@pytest.mark.parametrize("n_visits", range(10, 83))
def test_split_sizes_sum_to_total(n_visits):
    assert sum(split_sizes(n_visits, SplitSpec())) == n_visits


def test_split_spec_must_sum_to_one():
    with pytest.raises(ValueError):
        SplitSpec(0.3, 0.5, 0.3)


def test_windows_twenty_visits_m6():
    log = make_log(20)
    wins = make_windows(log, 6)
    assert len(wins) == 14
    assert wins[0].context == log.visits[:6]
    assert wins[0].target == log.visits[6]


def test_windows_boundary_and_large():
    assert len(make_windows(make_log(7), 6)) == 1
    assert len(make_windows(make_log(82), 8)) == 74


def test_windows_too_few_visits():
    with pytest.raises(InsufficientVisits):
        make_windows(make_log(6), 6)


@settings(max_examples=50, deadline=None)
@given(n_visits=st.integers(1, 40), m=st.integers(1, 10))
def test_window_count_and_stride(n_visits, m):
    log = make_log(n_visits)
    if n_visits < m + 1:
        with pytest.raises(InsufficientVisits):
            make_windows(log, m)
        return
    wins = make_windows(log, m)
    assert len(wins) == max(0, n_visits - m)
    for j, w in enumerate(wins):
        assert w.context == log.visits[j:j + m]
        assert w.target == log.visits[j + m]


@settings(max_examples=50, deadline=None)
@given(n_visits=st.integers(0, 120), common=st.integers(0, 10), personal=st.integers(0, 10))
def test_split_concatenation_roundtrip(n_visits, common, personal):
    if common + personal > 10:
        return
    spec = SplitSpec(common / 10, personal / 10, (10 - common - personal) / 10)
    log = make_log(n_visits)
    assert sum((p.visits for p in split_user(log, spec)), ()) == log.visits


@settings(max_examples=50, deadline=None)
@given(raw=st.lists(st.integers(0, 32), min_size=1, max_size=50), n=st.integers(1, 30))
def test_normalize_invariants(raw, n):
    v = normalize_visit(raw, n)
    assert len(v.actions) == len(v.mask) == n
    k = sum(v.mask)
    assert v.mask == (True,) * k + (False,) * (n - k)
    assert all(a == PAD for a, keep in zip(v.actions, v.mask) if not keep)


def test_filter_users_thresholds():
    logs = [make_log(k, f"u{k}") for k in (9, 10, 82, 83)]
    keep, rest = filter_users(logs)
    assert [u.user_id for u in keep] == ["u10", "u82"]
    assert [u.user_id for u in rest] == ["u9", "u83"]


def test_windows_to_arrays_shapes():
    wins = make_windows(make_log(9), 3)
    arr = windows_to_arrays(wins)
    assert arr["ctx"].shape == (6, 3, 3)
    assert arr["ctx_mask"].dtype == bool
    assert arr["tgt"].shape == (6, 3)
    np.testing.assert_array_equal(arr["tgt"][0], wins[0].target.actions)
