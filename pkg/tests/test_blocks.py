import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from glmmkit.blocks import (
    BlockFormulaError,
    Cross,
    Factor,
    Nest,
    design_size,
    expand_blocks,
    format_block_formula,
    nelder,
    parse_block_formula,
)


def test_parse_nested():
    tree = parse_block_formula("~cl(4) > ind(5)")
    assert tree == Nest(Factor("cl", 4), Factor("ind", 5))


def test_parse_single_leaf():
    assert parse_block_formula("~a(1)") == Factor("a", 1)


def test_parse_bracketed_cross_then_nest():
    tree = parse_block_formula("~(cl(4) * t(3)) > ind(5)")
    assert tree == Nest(Cross(Factor("cl", 4), Factor("t", 3)), Factor("ind", 5))


def test_left_associative_at_equal_depth():
    tree = parse_block_formula("~a(2) > b(2) * c(2)")
    assert tree == Cross(Nest(Factor("a", 2), Factor("b", 2)), Factor("c", 2))


@pytest.mark.parametrize("text", ["~a(0)", "a(-3)"])
def test_nonpositive_levels_rejected(text):
    with pytest.raises(BlockFormulaError):
        parse_block_formula(text)


def test_syntax_error_reports_position():
    with pytest.raises(BlockFormulaError) as err:
        parse_block_formula("~a(2) >> b(3)")
    assert "position" in str(err.value)


def test_duplicate_factor_rejected():
    with pytest.raises(BlockFormulaError):
        parse_block_formula("~a(2) * a(3)")


def test_expand_paper_layout():
    data = nelder("~(j(4) * t(5)) > i(5)")
    assert data.n == 100
    head = [(data["j"][k], data["t"][k], data["i"][k]) for k in range(6)]
    assert head == [(1, 1, 1), (1, 1, 2), (1, 1, 3), (1, 1, 4), (1, 1, 5), (1, 2, 6)]


def test_expand_full_crossing():
    data = nelder("~a(2)*b(2)")
    rows = list(zip(data["a"], data["b"]))
    assert rows == [(1, 1), (1, 2), (2, 1), (2, 2)]


def test_expand_nested_unique_child_labels():
    # enumerate by hand: child labels continue counting across parents
    data = nelder("~cl(2) > ind(3)")
    rows = list(zip(data["cl"], data["ind"]))
    assert rows == [(1, 1), (1, 2), (1, 3), (2, 4), (2, 5), (2, 6)]
    assert sorted(data["ind"]) == [1, 2, 3, 4, 5, 6]


def test_row_cap():
    with pytest.raises(BlockFormulaError):
        nelder("~a(100000) * b(100000)")


def test_column_order_is_textual():
    data = nelder("~(j(2) * t(2)) > i(2)")
    assert data.names == ["j", "t", "i"]


_trees = st.deferred(
    lambda: st.one_of(
        st.builds(
            Factor,
            st.sampled_from([f"f{k}" for k in range(12)]),
            st.integers(min_value=1, max_value=4),
        ),
        st.builds(Cross, _trees, _trees),
        st.builds(Nest, _trees, _trees),
    )
)


def _distinct_names(tree, seen=None):
    seen = set() if seen is None else seen
    if isinstance(tree, Factor):
        if tree.name in seen:
            return False
        seen.add(tree.name)
        return True
    return _distinct_names(tree.left, seen) and _distinct_names(tree.right, seen)


@settings(max_examples=150, deadline=None)
@given(_trees)
def test_row_count_matches_product_of_levels(tree):
    if not _distinct_names(tree) or design_size(tree) > 50_000:
        return
    table = expand_blocks(tree)
    expected = design_size(tree)
    assert table.n == expected
    # every column stays 1-based and positive
    for name in table.names:
        assert table[name].min() >= 1


@settings(max_examples=150, deadline=None)
@given(_trees)
def test_format_parse_roundtrip(tree):
    if not _distinct_names(tree):
        return
    text = format_block_formula(tree)
    assert parse_block_formula(text) == tree


def test_expansion_deterministic():
    a = nelder("~(j(3) * t(4)) > i(2)")
    b = nelder("~(j(3) * t(4)) > i(2)")
    assert a.names == b.names
    for name in a.names:
        assert np.array_equal(a[name], b[name])


def test_csv_serialization_roundtrip(tmp_path):
    data = nelder("~cl(2) > ind(3)")
    path = tmp_path / "design.csv"
    data.to_csv(path)
    text = path.read_text()
    assert text.splitlines()[0] == "cl,ind"
    assert text.splitlines()[1] == "1,1"
    from glmmkit.datatable import DataTable

    back = DataTable.from_csv(path)
    assert back.names == data.names
    for name in data.names:
        assert np.array_equal(back[name], data[name])
