"""Schema enumeration, contradiction counting, margins, center initialization."""

import numpy as np
import pytest

from attrcenter import lattice
from attrcenter.lattice import (AttributeCategory, AttributeSchema, CenterRegistry,
                                SchemaError, contradiction_count, desk_schema,
                                enumerate_combinations, paper_schema)


@pytest.fixture(scope="module")
def preset():
    return paper_schema()


def two_cat_schema():
    return AttributeSchema((
        AttributeCategory("a", ("x", "y", "z")),
        AttributeCategory("b", ("u", "v")),
    ))


class TestEnumeration:
    def test_paper_preset_has_180_combinations(self, preset):
        assert preset.n_combinations == 180
        assert len(enumerate_combinations(preset)) == 180

    def test_paper_preset_has_12_binary_attributes(self, preset):
        assert preset.binary_attribute_count == 12

    def test_single_category_two_states(self):
        schema = AttributeSchema((AttributeCategory("only", ("a", "b")),))
        assert len(enumerate_combinations(schema)) == 2

    def test_3x2_gives_six_indexed_in_order(self):
        combos = enumerate_combinations(two_cat_schema())
        assert [c.index for c in combos] == list(range(6))

    def test_round_trip_all_indices(self, preset):
        for y in range(preset.n_combinations):
            combo = preset.decode(y)
            assert preset.encode(combo.state_indices) == y

    def test_decode_out_of_range(self, preset):
        with pytest.raises(SchemaError):
            preset.decode(180)

    def test_state_count_minimum(self):
        with pytest.raises(SchemaError):
            AttributeCategory("bad", ("only",))

    def test_schema_dict_round_trip(self, preset):
        again = AttributeSchema.from_dict(preset.to_dict())
        assert again == preset
        assert again.content_hash() == preset.content_hash()


class TestContradictionCount:
    def test_identical_is_zero(self, preset):
        c = preset.decode(17)
        assert contradiction_count(c, c) == 0

    def test_two_changed_categories(self, preset):
        a = preset.combination((0, 0, 0, 0))
        b = preset.combination((1, 0, 0, 1))  # hair and gender differ
        assert contradiction_count(a, b) == 2

    def test_exhaustive_matches_bruteforce_two_categories(self):
        schema = two_cat_schema()
        combos = enumerate_combinations(schema)
        for a in combos:
            for b in combos:
                brute = sum(1 for i in range(2) if a.state_indices[i] != b.state_indices[i])
                assert contradiction_count(a, b) == brute

    def test_schema_mismatch_rejected(self, preset):
        with pytest.raises(SchemaError):
            contradiction_count(preset.decode(0), desk_schema().decode(0))

    def test_triangle_inequality_random_triples(self, preset):
        rng = np.random.default_rng(5)
        for _ in range(300):
            a, b, c = (preset.decode(int(i)) for i in rng.integers(0, 180, size=3))
            assert contradiction_count(a, c) <= contradiction_count(a, b) + contradiction_count(b, c)


class TestMargins:
    def test_self_margin_zero(self, preset):
        reg = CenterRegistry(preset, 8)
        assert reg.pairwise_margin(4, 4) == 0.0

    def test_linear_in_count(self):
        schema = paper_schema()
        reg = CenterRegistry(schema, 8, margin_unit=0.5)
        a = schema.combination((0, 0, 0, 0))
        b = schema.combination((1, 1, 1, 0))  # 3 contradictions
        assert reg.pairwise_margin(a.index, b.index) == pytest.approx(1.5)

    def test_symmetry_on_random_pairs(self, preset):
        reg = CenterRegistry(preset, 8)
        rng = np.random.default_rng(0)
        for _ in range(1000):
            j, k = (int(v) for v in rng.integers(0, 180, size=2))
            assert reg.pairwise_margin(j, k) == reg.pairwise_margin(k, j)

    def test_monotone_in_count(self, preset):
        reg = CenterRegistry(preset, 8)
        counts = reg.contradiction_matrix
        margins = reg.margin_matrix
        assert (margins[counts == 2] > margins[counts == 1].max() - 1e-9).all()
        assert margins[0, 0] == 0.0

    def test_index_out_of_range(self, preset):
        reg = CenterRegistry(preset, 8)
        with pytest.raises(IndexError):
            reg.pairwise_margin(0, 180)

    def test_identity_margin_bound_enforced(self, preset):
        with pytest.raises(ValueError, match="attribute margin"):
            CenterRegistry(preset, 8, attribute_margin=1.0, identity_margin=2.0)
        CenterRegistry(preset, 8, attribute_margin=1.0, identity_margin=1.99)  # ok


class TestInitCenters:
    def test_same_seed_identical(self):
        r1 = CenterRegistry(desk_schema(), 16)
        r2 = CenterRegistry(desk_schema(), 16)
        r1.init_centers(seed=9, scale=0.7)
        r2.init_centers(seed=9, scale=0.7)
        assert np.array_equal(r1.centers.data, r2.centers.data)

    def test_zero_scale_gives_zero_centers(self):
        reg = CenterRegistry(desk_schema(), 16)
        reg.init_centers(seed=3, scale=0.0)
        assert not reg.centers.data.any()

    def test_sample_mean_law_of_large_numbers(self, preset):
        d = 32
        reg = CenterRegistry(preset, d)
        scale = 2.0
        reg.init_centers(seed=123, scale=scale)
        mean = float(reg.centers.data.mean())
        assert abs(mean) < 3.0 * scale / np.sqrt(180 * d)

    def test_negative_scale_rejected(self):
        reg = CenterRegistry(desk_schema(), 4)
        with pytest.raises(ValueError):
            reg.init_centers(seed=0, scale=-1.0)


class TestIndicators:
    def test_paper_indicator_counts_per_category(self, preset):
        counts = [len(c.indicator_states) for c in preset.categories]
        assert counts == [5, 4, 2, 1]

    def test_unknown_states_have_no_indicator(self, preset):
        combo_unknown_hair = preset.combination((5, 0, 0, 0))
        vec = combo_unknown_hair.indicator_vector()
        assert vec[:5].sum() == 0  # all five hair planes dark

    def test_indicator_vector_one_hot_per_category(self):
        schema = desk_schema()
        combo = schema.combination((1, 0, 1))
        np.testing.assert_array_equal(combo.indicator_vector(), [0, 1, 0, 1, 0, 0])
