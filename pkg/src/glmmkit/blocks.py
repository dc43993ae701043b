"""Block-design notation: parse and expand crossed/nested factor layouts.

A design is written as a formula over named factors with level counts, e.g.
``~(j(4) * t(5)) > i(5)``. ``*`` crosses two blocks (all combinations) and
``>`` nests the right block inside each cell of the left block. Nested
factor labels continue counting across parent cells, so child levels are
globally unique.
"""

from dataclasses import dataclass

import numpy as np

from .datatable import DataTable

DEFAULT_ROW_CAP = 10**8


class BlockFormulaError(ValueError):
    """Raised for malformed block-design formulas; carries the position."""

    def __init__(self, message, pos=None):
        if pos is not None:
            message = f"{message} (at position {pos})"
        super().__init__(message)
        self.pos = pos


@dataclass(frozen=True)
class Factor:
    name: str
    levels: int


@dataclass(frozen=True)
class Cross:
    left: object
    right: object


@dataclass(frozen=True)
class Nest:
    left: object
    right: object


def _tokenize(text):
    tokens = []
    i = 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "()*>~":
            tokens.append((c, c, i))
            i += 1
        elif c.isalpha():
            j = i
            while j < len(text) and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(("name", text[i:j], i))
            i = j
        elif c.isdigit() or c == "-":
            j = i + 1
            while j < len(text) and text[j].isdigit():
                j += 1
            tokens.append(("int", text[i:j], i))
            i = j
        else:
            raise BlockFormulaError(f"unexpected character {c!r}", i)
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:

    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def advance(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def expect(self, kind):
        tok = self.advance()
        if tok[0] != kind:
            raise BlockFormulaError(
                f"expected {kind!r}, found {tok[1]!r}", tok[2]
            )
        return tok

    def parse(self):
        if self.peek()[0] == "~":
            self.advance()
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise BlockFormulaError(f"unexpected {tok[1]!r}", tok[2])
        return node

    def expr(self):
        # '>' and '*' share one precedence level, left-associative
        node = self.atom()
        while self.peek()[0] in (">", "*"):
            op = self.advance()[0]
            rhs = self.atom()
            node = Nest(node, rhs) if op == ">" else Cross(node, rhs)
        return node

    def atom(self):
        tok = self.peek()
        if tok[0] == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if tok[0] == "name":
            self.advance()
            self.expect("(")
            count = self.expect("int")
            self.expect(")")
            levels = int(count[1])
            if levels < 1:
                raise BlockFormulaError(
                    f"factor {tok[1]!r} needs a positive level count", count[2]
                )
            return Factor(tok[1], levels)
        raise BlockFormulaError(f"expected a factor or '(', found {tok[1]!r}", tok[2])


def parse_block_formula(text):
    """Parse block-design notation into a tree of Factor/Cross/Nest nodes."""
    tree = _Parser(text).parse()
    seen = set()
    for leaf in _leaves(tree):
        if leaf.name in seen:
            raise BlockFormulaError(f"factor {leaf.name!r} appears twice")
        seen.add(leaf.name)
    return tree


def format_block_formula(tree, top=True):
    """Render a tree back to notation (fully parenthesised composites)."""
    if isinstance(tree, Factor):
        out = f"{tree.name}({tree.levels})"
    else:
        op = " > " if isinstance(tree, Nest) else " * "
        left = format_block_formula(tree.left, top=False)
        right = format_block_formula(tree.right, top=False)
        out = f"({left}{op}{right})"
    return "~" + out if top else out


def _leaves(tree):
    if isinstance(tree, Factor):
        yield tree
    else:
        yield from _leaves(tree.left)
        yield from _leaves(tree.right)


def design_size(tree):
    size = 1
    for leaf in _leaves(tree):
        size *= leaf.levels
    return size


def expand_blocks(tree, row_cap=DEFAULT_ROW_CAP):
    """Expand a design tree to a table of 1-based integer factor columns.

    Row count is the product of all level counts. Columns appear in the
    order the factors appear in the formula text.
    """
    size = design_size(tree)
    if size > row_cap:
        raise BlockFormulaError(
            f"design expands to {size} rows, above the cap of {row_cap}"
        )
    names, cols = _expand(tree)
    return DataTable({name: col for name, col in zip(names, cols)})


def _expand(tree):
    if isinstance(tree, Factor):
        return [tree.name], [np.arange(1, tree.levels + 1, dtype=np.int64)]
    lnames, lcols = _expand(tree.left)
    rnames, rcols = _expand(tree.right)
    nl, nr = lcols[0].shape[0], rcols[0].shape[0]
    out_left = [np.repeat(col, nr) for col in lcols]
    out_right = [np.tile(col, nl) for col in rcols]
    if isinstance(tree, Nest):
        # fresh child labels per parent cell: offset by the column's span
        parent_idx = np.repeat(np.arange(nl, dtype=np.int64), nr)
        out_right = [
            tiled + parent_idx * int(col.max())
            for tiled, col in zip(out_right, rcols)
        ]
    return lnames + rnames, out_left + out_right


def nelder(text, row_cap=DEFAULT_ROW_CAP):
    """Parse and expand block-design notation in one call."""
    return expand_blocks(parse_block_formula(text), row_cap=row_cap)
