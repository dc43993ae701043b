"""Model formula parsing and compilation against data.

A model formula is additive: fixed-effect terms plus parenthesised random
terms of the form ``(z | f(vars) * g(vars) * ...)``. The left of the bar is
``1`` for a random intercept or a covariate name for a random slope; the
right side is a product of covariance functions over data variables.

``compile_term`` turns one random term into a stack program bound to the
data's unique variable combinations; ``build_design_matrix`` expands the
fixed part, including ``factor()`` indicator columns.
"""

import re
from dataclasses import dataclass, field

import numpy as np

from .kernels import KernelError, get_kernel
from .rpn import Instruction, Op, Program

_IDENT = re.compile(r"[A-Za-z][A-Za-z0-9_]*$")


class FormulaError(ValueError):
    pass


@dataclass(frozen=True)
class CovFunction:
    name: str
    variables: tuple


@dataclass(frozen=True)
class RandomTerm:
    slope: object          # None for a random intercept, else covariate name
    functions: tuple       # of CovFunction

    def label(self):
        z = "1" if self.slope is None else self.slope
        prod = "*".join(f"{f.name}({','.join(f.variables)})" for f in self.functions)
        return f"({z}|{prod})"


@dataclass
class ModelFormula:
    intercept: bool
    fixed: list            # of ("var", name) or ("factor", name)
    random: list = field(default_factory=list)
    outcome: object = None # optional outcome column named left of '~'


def _split_terms(text):
    """Split on top-level + and -, keeping the sign with each term."""
    terms, depth, start, sign = [], 0, 0, "+"
    for i, c in enumerate(text):
        if c == "(":
            depth += 1
        elif c == ")":
            depth -= 1
            if depth < 0:
                raise FormulaError(f"unbalanced ')' at position {i}")
        elif c in "+-" and depth == 0:
            piece = text[start:i].strip()
            if piece:
                terms.append((sign, piece))
            sign, start = c, i + 1
    if depth != 0:
        raise FormulaError("unbalanced '(' in formula")
    piece = text[start:].strip()
    if piece:
        terms.append((sign, piece))
    return terms


def _parse_random(body):
    if body.count("|") != 1:
        raise FormulaError(f"random term ({body}) must contain exactly one '|'")
    z_text, fn_text = (s.strip() for s in body.split("|"))
    slope = None
    if z_text != "1":
        if not _IDENT.match(z_text):
            raise FormulaError(f"bad random-term covariate {z_text!r}")
        slope = z_text
    functions = []
    for piece in fn_text.split("*"):
        piece = piece.strip()
        m = re.match(r"([A-Za-z][A-Za-z0-9_]*)\((.*)\)$", piece)
        if not m:
            raise FormulaError(f"malformed covariance function {piece!r}")
        name, args = m.group(1), m.group(2)
        variables = tuple(v.strip() for v in args.split(",") if v.strip())
        if not variables:
            raise FormulaError(f"{name}() needs at least one variable")
        for v in variables:
            if not _IDENT.match(v):
                raise FormulaError(f"bad variable name {v!r} in {name}()")
        get_kernel(name)  # validates the function name
        functions.append(CovFunction(name, variables))
    n_scales = sum(get_kernel(f.name).has_scale for f in functions)
    if n_scales > 1:
        names = "*".join(f.name for f in functions)
        raise FormulaError(
            f"product {names} has {n_scales} free scale parameters and is "
            "not identifiable; use the scale-free variant (e.g. fexp0)"
        )
    return RandomTerm(slope, tuple(functions))


def parse_formula(text):
    """Parse a model formula into fixed terms and random terms.

    An outcome column may be named on the left of ``~``, e.g.
    ``"y ~ x + (1|gr(j))"``.
    """
    text = text.strip()
    outcome = None
    if "~" in text:
        lhs, text = text.split("~", 1)
        lhs = lhs.strip()
        if lhs:
            if not _IDENT.match(lhs):
                raise FormulaError(f"bad outcome name {lhs!r}")
            outcome = lhs
    intercept = True
    fixed, random = [], []
    for sign, term in _split_terms(text):
        if sign == "-":
            if term == "1":
                intercept = False
                continue
            raise FormulaError(f"only '- 1' may be subtracted, found -{term}")
        if term == "1":
            intercept = True
        elif term.startswith("(") and term.endswith(")"):
            random.append(_parse_random(term[1:-1]))
        elif m := re.match(r"factor\(([A-Za-z][A-Za-z0-9_]*)\)$", term):
            fixed.append(("factor", m.group(1)))
        elif _IDENT.match(term):
            fixed.append(("var", term))
        else:
            raise FormulaError(f"malformed term {term!r}")
    return ModelFormula(intercept, fixed, random, outcome)


# ---------------------------------------------------------------------------
# random-term compilation


class CompiledTerm:
    """One random-effect block family: program + unique combination table.

    ``table`` holds the unique rows of the term's variables (sorted by the
    grouping variables first, then the rest), plus range-scaled copies of
    the columns used by compactly supported functions. ``groups`` slices the
    combination rows into diagonal sub-blocks (one per grouping level, or a
    single slice when no ``gr`` is present). Immutable once built.
    """

    def __init__(self, term, data, effective_range=None):
        self.term = term
        self.slope = term.slope
        if self.slope is not None and self.slope not in data:
            raise FormulaError(f"random-slope variable {self.slope!r} not in data")
        self.var_names = []
        coded = getattr(data, "levels", {})
        for fn in term.functions:
            for v in fn.variables:
                if v not in data:
                    raise FormulaError(f"covariance variable {v!r} not in data")
                if fn.name != "gr" and v in coded:
                    # distance kernels need real numeric inputs; refusing is
                    # safer than trusting an arbitrary level coding
                    raise FormulaError(
                        f"variable {v!r} is non-numeric (level-coded) and "
                        f"cannot feed the distance-based function {fn.name}"
                    )
                if v not in self.var_names:
                    self.var_names.append(v)
        self.gr_vars = []
        for fn in term.functions:
            if fn.name == "gr":
                for v in fn.variables:
                    if v not in self.gr_vars:
                        self.gr_vars.append(v)
        self.has_gr = bool(self.gr_vars)

        raw = np.column_stack([np.asarray(data[v], dtype=float) for v in self.var_names])
        if not np.all(np.isfinite(raw)):
            raise FormulaError(
                f"covariance variables {self.var_names} contain non-finite values"
            )
        uniq, self.row_combo = self._sorted_unique(raw)
        self.n_combos = uniq.shape[0]

        # group slices: contiguous runs of the gr variables
        if self.has_gr:
            gidx = [self.var_names.index(v) for v in self.gr_vars]
            gvals = uniq[:, gidx]
            change = np.any(gvals[1:] != gvals[:-1], axis=1)
            starts = np.concatenate(([0], np.nonzero(change)[0] + 1))
            ends = np.concatenate((starts[1:], [self.n_combos]))
            self.groups = list(zip(starts.tolist(), ends.tolist()))
        else:
            self.groups = [(0, self.n_combos)]

        # range scaling for compactly supported functions
        self.effective_range = effective_range
        columns = {v: k for k, v in enumerate(self.var_names)}
        self.scale_vars = []
        if effective_range is not None:
            for fn in term.functions:
                if get_kernel(fn.name).compact:
                    for v in fn.variables:
                        if v not in self.scale_vars:
                            self.scale_vars.append(v)
        scaled_columns = {
            v: len(self.var_names) + k for k, v in enumerate(self.scale_vars)
        }
        self.table = self._with_scaled(uniq)

        # dimension checks and program assembly
        instructions = []
        param_indices = []
        local = 0
        for k, fn in enumerate(term.functions):
            kernel = get_kernel(fn.name)
            d = len(fn.variables)
            if kernel.max_dim is not None and d > kernel.max_dim:
                raise KernelError(
                    f"{fn.name} supports at most {kernel.max_dim} "
                    f"dimension(s), got {d}"
                )
            use_scaled = kernel.compact and effective_range is not None
            cols = [
                scaled_columns[v] if use_scaled else columns[v]
                for v in fn.variables
            ]

            def dist(out, cols=cols):
                if len(cols) == 1:
                    out.append(Instruction(Op.PUSH_DATA, cols[0]))
                    out.append(Instruction(Op.ABS_DIFF))
                else:
                    for c in cols:
                        out.append(Instruction(Op.PUSH_DATA, c))
                    out.append(Instruction(Op.EUCLID_FOLD, len(cols)))

            slots = list(range(local, local + kernel.n_params))
            kernel.emitter(instructions, slots, dist)
            local += kernel.n_params
            if k > 0:
                instructions.append(Instruction(Op.MUL))
        param_indices = list(range(local))  # local until bind_params()
        self.program = Program(instructions, param_indices, list(self.var_names))
        self.n_params = local

    def _sorted_unique(self, raw):
        """Unique rows of raw, ordered by grouping variables then the rest.

        Returns (uniq, row_map) with row_map giving each raw row's position
        in uniq."""
        uniq, inverse = np.unique(raw, axis=0, return_inverse=True)
        key_cols = self.gr_vars + [v for v in self.var_names if v not in self.gr_vars]
        lex = np.lexsort(tuple(
            uniq[:, self.var_names.index(v)] for v in reversed(key_cols)
        ))
        uniq = uniq[lex]
        rank = np.empty_like(lex)
        rank[lex] = np.arange(lex.size)
        return uniq, rank[np.asarray(inverse).ravel()]

    def _with_scaled(self, uniq):
        if not self.scale_vars:
            return uniq
        extra = np.column_stack([
            uniq[:, self.var_names.index(v)] / float(self.effective_range)
            for v in self.scale_vars
        ])
        return np.hstack([uniq, extra])

    def new_combos(self, newdata):
        """Unique combination table for new data rows, same ordering rule.

        Returns (table, row_map)."""
        raw = self.combo_of_rows(newdata)
        uniq, row_map = self._sorted_unique(raw)
        return self._with_scaled(uniq), row_map

    def bind_params(self, start):
        """Assign this term's global parameter indices starting at start."""
        self.program.param_indices = list(range(start, start + self.n_params))
        return start + self.n_params

    def param_bounds(self):
        out = []
        for fn in self.term.functions:
            kernel = get_kernel(fn.name)
            out.extend(kernel.bounds(len(fn.variables)))
        return out

    def param_names(self):
        out = []
        for fn in self.term.functions:
            label = f"{fn.name}({','.join(fn.variables)})"
            for k in range(get_kernel(fn.name).n_params):
                out.append(f"{label}.{k + 1}")
        return out

    def default_params(self):
        out = []
        for fn in self.term.functions:
            out.extend(get_kernel(fn.name).default)
        return out

    def validate_params(self, theta_local):
        pos = 0
        for fn in self.term.functions:
            kernel = get_kernel(fn.name)
            kernel.validate(theta_local[pos:pos + kernel.n_params], len(fn.variables))
            pos += kernel.n_params

    def slope_values(self, data):
        if self.slope is None:
            return np.ones(data.n)
        return np.asarray(data[self.slope], dtype=float)

    def combo_of_rows(self, data):
        """Map arbitrary rows of ``data`` onto this term's combination keys.

        Returns the raw variable matrix (used for cross-covariance against
        the stored table)."""
        return np.column_stack([
            np.asarray(data[v], dtype=float) for v in self.var_names
        ])


def compile_term(term, data, effective_range=None):
    """Compile one random term against the data it will be evaluated on."""
    return CompiledTerm(term, data, effective_range=effective_range)


# ---------------------------------------------------------------------------
# fixed-effects design matrix


def _factor_levels(values):
    return np.unique(values)


def build_design_matrix(formula, data, levels=None):
    """Expand the fixed part of a formula to a dense design matrix.

    With an intercept, each ``factor()`` drops its first (lowest) level;
    without one, the first factor term keeps all levels and later factors
    drop their first level, so the matrix stays full rank. ``levels`` pins
    factor levels (as at model build time) when expanding new data.

    Returns (X, column_names).
    """
    cols, names = [], []
    if formula.intercept:
        cols.append(np.ones(data.n))
        names.append("intercept")
    first_factor = True
    for kind, var in formula.fixed:
        if var not in data:
            raise FormulaError(f"fixed-effect variable {var!r} not in data")
        values = np.asarray(data[var], dtype=float)
        if kind == "var":
            cols.append(values)
            names.append(var)
            continue
        if levels is not None and var in levels:
            levs = np.asarray(levels[var], dtype=float)
            unseen = np.setdiff1d(np.unique(values), levs)
            if unseen.size:
                raise FormulaError(
                    f"factor({var}) has unseen level(s) {unseen.tolist()}"
                )
        else:
            levs = _factor_levels(values)
        drop_first = formula.intercept or not first_factor
        first_factor = False
        if drop_first and len(levs) < 2:
            raise FormulaError(
                f"factor({var}) has a single level and collides with the "
                "intercept; drop the intercept with '- 1'"
            )
        use = levs[1:] if drop_first else levs
        for lev in use:
            cols.append((values == lev).astype(float))
            label = int(lev) if float(lev).is_integer() else lev
            names.append(f"{var}_{label}")
    if not cols:
        raise FormulaError("empty fixed-effects specification")
    X = np.column_stack(cols)
    return X, names
