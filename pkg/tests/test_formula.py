import json
import math

import numpy as np
import pytest

from glmmkit.blocks import nelder
from glmmkit.datatable import DataTable
from glmmkit.formula import (
    FormulaError,
    build_design_matrix,
    compile_term,
    parse_formula,
)
from glmmkit.kernels import KERNELS, KernelError

from oracles import CLOSED_FORMS, PARAM_RANGES


def test_parse_fixed_and_random():
    f = parse_formula("~ factor(t) - 1 + (1|gr(j)*ar1(t))")
    assert not f.intercept
    assert f.fixed == [("factor", "t")]
    assert len(f.random) == 1
    term = f.random[0]
    assert term.slope is None
    assert [(fn.name, fn.variables) for fn in term.functions] == [
        ("gr", ("j",)), ("ar1", ("t",)),
    ]


def test_parse_plain_covariate():
    f = parse_formula("~ x")
    assert f.intercept
    assert f.fixed == [("var", "x")]
    assert f.random == []


def test_parse_two_random_blocks():
    f = parse_formula("~ int + factor(t)-1 + (1|gr(cl))+(1|gr(cl,t))")
    assert not f.intercept
    assert len(f.random) == 2
    assert f.random[1].functions[0].variables == ("cl", "t")


def test_parse_outcome():
    f = parse_formula("y ~ x + (1|gr(j))")
    assert f.outcome == "y"


def test_unknown_function_rejected():
    with pytest.raises(KernelError):
        parse_formula("~ (1|nope(j))")


def test_duplicate_bar_rejected():
    with pytest.raises(FormulaError):
        parse_formula("~ (1|gr(j)|ar1(t))")


def test_double_scale_product_rejected():
    with pytest.raises(FormulaError, match="scale"):
        parse_formula("~ (1|gr(j)*fexp(t))")


def test_malformed_term_rejected():
    with pytest.raises(FormulaError):
        parse_formula("~ 3x + (1|gr(j))")


# ---------------------------------------------------------------------------
# compiled programs


def _single_term(text):
    return parse_formula(text).random[0]


def test_gr_program_values():
    data = DataTable({"j": np.array([1, 1, 2, 2])})
    ct = compile_term(_single_term("~(1|gr(j))"), data)
    theta = np.array([0.25])
    same = ct.program.evaluate(ct.table, np.array([0]), ct.table, np.array([0]), theta)
    diff = ct.program.evaluate(ct.table, np.array([0]), ct.table, np.array([1]), theta)
    assert same[0] == pytest.approx(0.0625, abs=1e-15)
    assert diff[0] == 0.0


def test_gr_fexp0_product_value():
    # theta1^2 * exp(-|dt|/theta2) at same group, |dt| = 1
    data = DataTable({"j": np.array([1, 1]), "t": np.array([1, 2])})
    ct = compile_term(_single_term("~(1|gr(j)*fexp0(t))"), data)
    theta = np.array([0.25, 0.8])
    val = ct.program.evaluate(ct.table, np.array([0]), ct.table, np.array([1]), theta)
    assert val[0] == pytest.approx(0.25**2 * math.exp(-1 / 0.8), rel=1e-12)


def test_ar1_power_value():
    data = DataTable({"t": np.array([1, 3])})
    ct = compile_term(_single_term("~(1|ar1(t))"), data)
    val = ct.program.evaluate(
        ct.table, np.array([0]), ct.table, np.array([1]), np.array([0.8])
    )
    assert val[0] == pytest.approx(0.64, rel=1e-12)


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_program_matches_closed_form(name):
    """Compiled evaluation vs direct implementation, 1000 random draws."""
    rng = np.random.default_rng(hash(name) % 2**32)
    kernel = KERNELS[name]
    oracle = CLOSED_FORMS[name]
    ranges = PARAM_RANGES[name]
    x = np.concatenate([[0.0], rng.uniform(0.0, 2.0, size=999)])
    data = DataTable({"x": np.concatenate(([0.0], x))})
    ct = compile_term(_single_term(f"~(1|{name}(x))"), data)
    # table rows are sorted; row of value v found by search
    order = np.argsort(np.concatenate(([0.0], x)))
    for k in range(1000):
        theta = np.array([rng.uniform(lo, hi) for lo, hi in ranges])
        d = x[k]
        if name == "bessel" and d == 0.0:
            continue  # K_nu diverges at zero distance
        i = int(np.searchsorted(ct.table[:, 0], 0.0))
        j = int(np.searchsorted(ct.table[:, 0], d))
        got = ct.program.evaluate(
            ct.table, np.array([i]), ct.table, np.array([j]), theta
        )[0]
        want = oracle(d, theta)
        # relative 1e-12, with a machine-precision absolute floor at the
        # kernel's scale for cancellation points where the value crosses zero
        floor = 1e-13 * (1.0 + float(np.max(np.abs(theta))))
        assert got == pytest.approx(want, rel=1e-12, abs=floor), (name, d, theta)


def test_product_commutes():
    data = nelder("~(j(3) * t(4)) > i(2)")
    f1 = parse_formula("~(1|gr(j)*ar1(t))").random[0]
    f2 = parse_formula("~(1|ar1(t)*gr(j))").random[0]
    c1 = compile_term(f1, data)
    c2 = compile_term(f2, data)
    n = c1.n_combos
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    m1 = c1.program.evaluate(c1.table, ii.ravel(), c1.table, jj.ravel(),
                             np.array([0.3, 0.8])).reshape(n, n)
    m2 = c2.program.evaluate(c2.table, ii.ravel(), c2.table, jj.ravel(),
                             np.array([0.8, 0.3])).reshape(n, n)
    # same D whichever way the product is written (theta follows the order)
    assert np.allclose(m1, m2, atol=1e-15)


def test_theta_order_follows_formula():
    data = nelder("~(j(3) * t(4)) > i(2)")
    term = parse_formula("~(1|gr(j)*fexp0(t))").random[0]
    ct = compile_term(term, data)
    v1 = ct.program.evaluate(ct.table, np.array([0]), ct.table, np.array([1]),
                             np.array([0.5, 1.0]))[0]
    # swapped formula order swaps the parameter slots
    term_swapped = parse_formula("~(1|fexp0(t)*gr(j))").random[0]
    cs = compile_term(term_swapped, data)
    v2 = cs.program.evaluate(cs.table, np.array([0]), cs.table, np.array([1]),
                             np.array([1.0, 0.5]))[0]
    assert v1 == pytest.approx(v2, rel=1e-14)


def test_euclidean_distance_fold():
    data = DataTable({
        "x": np.array([0.0, 3.0]),
        "y": np.array([0.0, 4.0]),
    })
    ct = compile_term(_single_term("~(1|fexp0(x,y))"), data)
    val = ct.program.evaluate(ct.table, np.array([0]), ct.table, np.array([1]),
                              np.array([2.0]))
    assert val[0] == pytest.approx(math.exp(-5.0 / 2.0), rel=1e-12)


def test_dimension_limits_enforced():
    data = DataTable({
        "x": np.array([0.0, 1.0]), "y": np.array([0.0, 1.0]),
    })
    with pytest.raises(KernelError, match="dimension"):
        compile_term(_single_term("~(1|prodcb(x,y))"), data)


def test_program_json_dump_uses_names():
    data = DataTable({"j": np.array([1, 2])})
    ct = compile_term(_single_term("~(1|gr(j))"), data)
    doc = json.loads(ct.program.to_json())
    ops = [ins["op"] for ins in doc["instructions"]]
    assert "PUSH_PARAM" in ops and "IS_ZERO" in ops
    assert all(isinstance(op, str) for op in ops)


def test_missing_covariance_variable():
    data = DataTable({"j": np.array([1, 2])})
    with pytest.raises(FormulaError, match="not in data"):
        compile_term(_single_term("~(1|gr(nope))"), data)


def test_effective_range_scales_distance():
    data = DataTable({"x": np.array([0.0, 4.0])})
    ct = compile_term(_single_term("~(1|wend0(x))"), data, effective_range=8.0)
    val = ct.program.evaluate(ct.table, np.array([0]), ct.table, np.array([1]),
                              np.array([1.0, 2.0]))
    assert val[0] == pytest.approx((1 - 0.5) ** 2, rel=1e-12)
    # beyond the range the kernel is exactly zero
    far = DataTable({"x": np.array([0.0, 9.0])})
    cf = compile_term(_single_term("~(1|wend0(x))"), far, effective_range=8.0)
    val = cf.program.evaluate(cf.table, np.array([0]), cf.table, np.array([1]),
                              np.array([1.0, 2.0]))
    assert val[0] == 0.0


# ---------------------------------------------------------------------------
# fixed-effects design matrix


def test_factor_without_intercept_expands_all_levels():
    data = nelder("~j(2) * t(5)")
    f = parse_formula("~ factor(t) - 1")
    X, names = build_design_matrix(f, data)
    assert X.shape[1] == 5
    assert names == [f"t_{k}" for k in range(1, 6)]
    assert np.allclose(X.sum(axis=1), 1.0)


def test_stepped_wedge_design_has_12_columns():
    data = nelder("~(cl(10) * t(11)) > i(10)")
    intv = (data["t"] > data["cl"]).astype(float)
    data = data.with_column("int", intv)
    f = parse_formula("~ factor(t) + int - 1")
    X, names = build_design_matrix(f, data)
    assert X.shape == (1100, 12)
    assert names[-1] == "int"


def test_intercept_only():
    data = nelder("~a(7)")
    X, names = build_design_matrix(parse_formula("~1"), data)
    assert X.shape == (7, 1)
    assert np.all(X == 1.0)
    assert names == ["intercept"]


def test_factor_with_intercept_drops_first_level():
    data = nelder("~t(4)")
    X, names = build_design_matrix(parse_formula("~ factor(t)"), data)
    assert X.shape == (4, 4)
    assert names == ["intercept", "t_2", "t_3", "t_4"]


def test_missing_fixed_covariate():
    data = nelder("~a(3)")
    with pytest.raises(FormulaError, match="not in data"):
        build_design_matrix(parse_formula("~ b"), data)


def test_single_level_factor_with_intercept_rejected():
    data = DataTable({"g": np.array([2, 2, 2])})
    with pytest.raises(FormulaError, match="single level"):
        build_design_matrix(parse_formula("~ factor(g)"), data)


def test_bessel_opcode_against_quadrature_oracle():
    # guards the special-function backend with an independent integral
    # representation of K_nu
    from oracles import bessel_k_quadrature

    data = DataTable({"x": np.array([0.0, 0.4, 1.3, 2.7])})
    ct = compile_term(_single_term("~(1|bessel(x))"), data)
    for nu in (0.5, 1.2, 2.3):
        for j, x in enumerate((0.4, 1.3, 2.7), start=1):
            got = ct.program.evaluate(
                ct.table, np.array([0]), ct.table, np.array([j]),
                np.array([nu]),
            )[0]
            want = bessel_k_quadrature(nu, x)
            assert got == pytest.approx(want, rel=1e-9)
