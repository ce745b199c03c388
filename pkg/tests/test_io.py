import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from confounded_pg.env import ContinuousChainSpec, OfflineDataset, TabularBanditSpec, sample_continuous, sample_tabular
from confounded_pg.errors import InputError
from confounded_pg.io import (fmt_number, format_dataset, format_matrix, format_params, parse_dataset,
                              parse_matrix, parse_params, read_csv, read_dataset, write_csv,
                              write_dataset)
from confounded_pg.policy import PolicyParams

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@st.composite
def datasets(draw):
    n = draw(st.integers(1, 6))
    horizon = draw(st.integers(1, 3))
    k = draw(st.integers(1, 2))
    o0 = draw(arrays(float, (n, k), elements=finite))
    obs = draw(arrays(float, (n, horizon, k), elements=finite))
    actions = draw(arrays(int, (n, horizon), elements=st.integers(0, 2)))
    rewards = draw(arrays(float, (n, horizon), elements=finite))
    seed = draw(st.one_of(st.none(), st.integers(0, 2**31)))
    return OfflineDataset(o0, obs, actions, rewards, 3, seed)


@given(datasets())
@settings(max_examples=60, deadline=None)
def test_dataset_round_trip_bit_exact(ds):
    text = format_dataset(ds)
    back = parse_dataset(text)
    for name in ("o0", "obs", "actions", "rewards"):
        a, b = getattr(ds, name), getattr(back, name)
        assert a.shape == b.shape
        assert a.tobytes() == b.astype(a.dtype).tobytes()
    assert back.seed == ds.seed and back.action_count == ds.action_count
    assert format_dataset(back) == text


def test_generated_files_round_trip(tmp_path):
    for ds in (sample_tabular(TabularBanditSpec(), 50, 2), sample_continuous(ContinuousChainSpec(), 50, 2)):
        path = tmp_path / "d.csv"
        write_dataset(ds, path)
        back = read_dataset(path)
        np.testing.assert_array_equal(back.obs, ds.obs)
        np.testing.assert_array_equal(back.rewards, ds.rewards)
        assert path.read_text().splitlines()[0] == \
            f"#T={ds.horizon},obs_dim=1,action_count=2,seed=2"


@pytest.mark.parametrize("text", [
    "",
    "T=1,obs_dim=1,action_count=2\n1.0,1.0,0,0.5\n",
    "#T=1,obs_dim=1\n1.0,1.0,0,0.5\n",
    "#T=1,obs_dim=x,action_count=2\n1.0,1.0,0,0.5\n",
    "#T=1,obs_dim=1,action_count=2\n1.0,1.0,0\n",
    "#T=1,obs_dim=1,action_count=2\n1.0,1.0,0.5,0.5\n",
    "#T=1,obs_dim=1,action_count=2\n1.0,abc,0,0.5\n",
    "#T=1,obs_dim=1,action_count=2\n",
])
def test_malformed_dataset(text):
    with pytest.raises(InputError):
        parse_dataset(text)


@given(st.lists(finite, min_size=1, max_size=10))
def test_params_round_trip(vals):
    p = PolicyParams(vals, (len(vals),))
    back = parse_params(format_params(p))
    assert back.theta.tobytes() == p.theta.tobytes()
    assert back.block_sizes == p.block_sizes


def test_params_multi_block_and_errors():
    p = PolicyParams(np.arange(8.0), (4, 4))
    assert parse_params(format_params(p)).block_sizes == (4, 4)
    with pytest.raises(InputError):
        parse_params("0.1\n0.2\n")
    with pytest.raises(InputError):
        parse_params("#blocks=2\n0.1\nfoo\n")


@given(arrays(float, st.tuples(st.integers(1, 5), st.integers(1, 5)), elements=finite))
def test_matrix_round_trip(m):
    assert parse_matrix(format_matrix(m)).tobytes() == m.tobytes()


def test_matrix_shape_mismatch():
    with pytest.raises(InputError):
        parse_matrix("#2,2\n1.0,2.0\n")


def test_csv_numbers(tmp_path, capsys):
    assert fmt_number(1 / 3) == "0.333333333333"
    assert fmt_number(np.int64(7)) == "7"
    assert fmt_number("naive") == "naive"
    path = tmp_path / "sub" / "out.csv"
    write_csv(str(path), ["a", "b"], [("x", 0.1), ("y", 2)])
    assert read_csv(path) == (["a", "b"], [["x", "0.1"], ["y", "2"]])
    write_csv("-", ["a"], [(1.5,)])
    assert capsys.readouterr().out == "a\n1.5\n"
