import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st

from tdlcal.model import (
    BinTruth, DelayLineModel, GroupSelector, ModelConfig, build_model, group_bins, group_cells,
    load_model_config, read_model_table, sample, write_model_table,
)

from conftest import reference_like_config


def test_zero_sigma_positions_follow_physical_order():
    m = build_model(ModelConfig(num_carry_cells=10, sigma_ps=0.0))
    assert np.all(np.diff(m.positions) > 0)
    assert m.actual_order().tolist() == list(range(80))


def test_large_sigma_inverts_some_adjacent_pair():
    m = build_model(ModelConfig(num_carry_cells=20, sigma_ps=0.6 * 3.2, seed=5))
    assert np.any(np.diff(m.positions) < 0)


def test_region_boundary_bins_are_ultra_wide():
    m = build_model(ModelConfig(num_carry_cells=30, sigma_ps=0.3, seed=2,
                                clock_regions=((0, 0.0), (80, 30.0), (160, 60.0))))
    w = m.true_widths()
    # the bin sampled just before each skew jump covers the jump
    order = m.actual_order()
    median = np.median(w)
    for boundary in (80, 160):
        before = max(order[: list(order).index(boundary)], key=lambda b: m.positions[b])
        assert w[before] > 3 * median


def test_chain_longer_than_period_rejected():
    with pytest.raises(ValueError, match="exceeds clock period"):
        build_model(ModelConfig(num_carry_cells=200, nominal_tap_ps=3.2, clock_period_ps=4000.0))


def test_bad_configs_rejected():
    with pytest.raises(ValueError):
        build_model(ModelConfig(num_carry_cells=0))
    with pytest.raises(ValueError):
        build_model(ModelConfig(num_carry_cells=2, tap_profile_ps=(1.0, 2.0)))
    with pytest.raises(ValueError):
        build_model(ModelConfig(num_carry_cells=2, jitter_mode="walk"))
    with pytest.raises(ValueError, match="unknown"):
        ModelConfig.from_mapping({"num_carry_cells": 2, "colour": 1})


def test_positions_inside_period_and_strict():
    m = build_model(reference_like_config())
    assert m.positions.min() >= 0 and m.positions.max() < m.clock_period
    assert len(np.unique(m.positions)) == len(m)
    assert len(m) % 8 == 0


def test_bin_truth_fields():
    b = BinTruth(19, 1.0)
    assert (b.carry_cell, b.tap_in_cell) == (2, 3)
    m = build_model(ModelConfig(num_carry_cells=2))
    assert all(0 <= t.tap_in_cell < 8 for t in m.bins)


def test_seed_determinism():
    a = build_model(reference_like_config(num_carry_cells=20, seed=9))
    b = build_model(reference_like_config(num_carry_cells=20, seed=9))
    c = build_model(reference_like_config(num_carry_cells=20, seed=10))
    assert a.positions.tobytes() == b.positions.tobytes()
    assert a.positions.tobytes() != c.positions.tobytes()


def test_ties_broken_toward_later_index():
    cfg = ModelConfig(num_carry_cells=1, nominal_tap_ps=0.0, start_offset_ps=5.0)
    m = build_model(cfg)
    assert m.actual_order().tolist() == list(range(8))
    assert np.all(np.diff(m.positions) > 0)


def test_cumulative_jitter_mode_is_a_random_walk():
    off = build_model(ModelConfig(num_carry_cells=40, sigma_ps=0.5, seed=1))
    cum = build_model(ModelConfig(num_carry_cells=40, sigma_ps=0.5, seed=1, jitter_mode="cumulative"))
    dev_off = off.positions - off.nominal_positions
    dev_cum = cum.positions - cum.nominal_positions
    assert np.std(dev_cum[200:]) > np.std(dev_off[200:])


def test_resynthesis_is_identity_without_noise(small_model):
    assert small_model.resynthesized(1) is small_model
    noisy = build_model(reference_like_config(num_carry_cells=4, resynthesis_noise_ps=0.1))
    moved = noisy.resynthesized(1)
    assert not np.array_equal(moved.positions, noisy.positions)
    assert np.array_equal(moved.positions, noisy.resynthesized(1).positions)


def test_sample_phase_zero_and_near_period(small_model):
    grp = GroupSelector.full_chain(small_model)
    assert not sample(small_model, 0.0, grp).any()
    eps = np.min(np.diff(np.sort(small_model.positions))) / 2
    assert sample(small_model, small_model.clock_period - eps, grp).all()
    with pytest.raises(ValueError):
        sample(small_model, small_model.clock_period, grp)
    with pytest.raises(ValueError):
        sample(small_model, -1.0, grp)


def test_figure2_thermometer_code():
    # actual order (1,2,3,5,4,6,7,8): bin 5 samples before bin 4
    pos = np.array([1.0, 2.0, 3.0, 5.0, 4.0, 6.0, 7.0, 8.0]) * 10
    m = DelayLineModel(ModelConfig(num_carry_cells=1, clock_period_ps=100.0), pos, pos)
    code = sample(m, 45.0, GroupSelector.full_chain(m))
    assert "".join(str(int(b)) for b in code) == "11101000"


@given(seed=st.integers(0, 2**16), phases=st.lists(st.floats(0, 399.99), min_size=2, max_size=6))
def test_sampling_is_bitwise_monotone_and_sorted_code_is_thermometer(seed, phases):
    m = build_model(reference_like_config(num_carry_cells=12, clock_period_ps=400.0, seed=seed,
                                      clock_regions=((0, 0.0), (32, 10.0), (64, 20.0))))
    grp = GroupSelector.full_chain(m)
    codes = [sample(m, p, grp) for p in sorted(phases)]
    for lo, hi in zip(codes, codes[1:]):
        assert np.all(hi >= lo)
        assert hi.sum() >= lo.sum()
    for code in codes:
        by_time = code[m.actual_order()]
        k = int(by_time.sum())
        assert by_time[:k].all() and not by_time[k:].any()


def test_z3_groups_partition_cells():
    for n in (1, 2, 3, 10, 147):
        cells = np.concatenate([group_cells(n, g) for g in range(3)])
        assert sorted(cells.tolist()) == list(range(n))
        bins = np.concatenate([group_bins(n, g) for g in range(3)])
        assert sorted(bins.tolist()) == list(range(8 * n))
    with pytest.raises(ValueError):
        group_cells(5, 3)


def test_group_selector_reorder_must_permute(small_model):
    g = GroupSelector.for_group(small_model, 1)
    assert g.with_order(reversed(g.order)).order == tuple(reversed(g.order))
    with pytest.raises(ValueError):
        g.with_order(g.order[:-1] + (0,))


def test_model_table_round_trip(tmp_path, small_model):
    path = tmp_path / "m.txt"
    write_model_table(small_model, path)
    assert np.array_equal(read_model_table(path), small_model.positions)
    assert path.read_text().splitlines()[1] == "physical_index sample_position_ps"


def test_model_config_yaml(tmp_path):
    cfg = reference_like_config(num_carry_cells=6)
    (tmp_path / "m.yaml").write_text(yaml.safe_dump({"model": cfg.to_mapping()}))
    assert load_model_config(tmp_path / "m.yaml") == cfg
