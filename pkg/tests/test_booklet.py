"""Bundled booklet data and effect-size-table reproduction."""

import time

import numpy as np
import pytest

from mgdif.booklet import effect_size_table, load_booklet


def test_booklet_shape(booklet):
    assert booklet.n_items == 29
    assert len(booklet.groups) == 15
    assert len(booklet.item_names) == len(set(booklet.item_names)) == 29
    assert booklet.dif_shift == pytest.approx(0.4)
    assert booklet.reference_group == "Western Cape, RSA"


def test_booklet_reference_group_present(booklet):
    ref = booklet.group(booklet.reference_group)
    assert ref.n > 0
    with pytest.raises(KeyError):
        booklet.group("nowhere")


def test_booklet_grid_is_standard(booklet):
    assert len(booklet.grid) == 41
    assert booklet.grid.nodes[0] == -4.0
    assert np.allclose(np.diff(booklet.grid.nodes), 0.2)


def test_booklet_item_models_consistent(booklet):
    for item in booklet.items:
        if item.model == "2PL":
            assert item.c == 0.0
        else:
            assert 0.0 < item.c < 1.0
        assert item.a > 0


def test_effect_size_table_reproduces_reference_values(booklet):
    """All 29 x 2 area cells within 0.02 and all flags exact, under 1s."""
    t0 = time.perf_counter()
    table = effect_size_table(booklet)
    elapsed = time.perf_counter() - t0
    assert elapsed < 1.0
    assert len(table) == 29
    for row, ref in zip(table, booklet.reference_effect_sizes):
        assert row.item == ref.item
        assert row.area_a == pytest.approx(ref.area_a, abs=0.02), row.item
        assert row.area_b == pytest.approx(ref.area_b, abs=0.02), row.item
        assert row.flag_a == ref.flag_a, row.item
        assert row.flag_b == ref.flag_b, row.item


def test_effect_size_a_shifts_are_all_mild(booklet):
    """Discrimination shifts of +0.4 never reach the B/C severity classes."""
    for row in effect_size_table(booklet):
        assert row.flag_a == "A"


def test_effect_size_area_ranges(booklet):
    """Area columns span the documented ranges for the +0.4 manipulations."""
    table = effect_size_table(booklet)
    areas_a = [row.area_a for row in table]
    areas_b = [row.area_b for row in table]
    assert min(areas_a) > 0.02 and max(areas_a) < 0.35
    assert min(areas_b) > 0.15 and max(areas_b) <= 0.42
