"""Generating study layouts with block-design notation.

Two operators build a layout from named factors with level counts:
``*`` crosses two blocks (every combination appears) and ``>`` nests the
right block inside each cell of the left one, with nested labels
continuing across parents so every child is globally unique.
"""

import numpy as np

from glmmkit import format_block_formula, nelder, parse_block_formula

# A cohort study: five people, each observed in ten periods.
cohort = nelder("~person(5) * time(10)")
print("cohort rows:", cohort.n, "columns:", cohort.names)

# A repeated-measures cluster study: four clusters crossed with five
# periods, five fresh individuals per cluster-period (cross-sectional).
design = nelder("~(j(4) * t(5)) > i(5)")
print("\ncluster design rows:", design.n)
print("first six rows (j, t, i):")
for k in range(6):
    print("  ", design["j"][k], design["t"][k], design["i"][k])
# note i continues 6, 7, ... in the second period: new people each time

# The same tree can be inspected, printed, and re-parsed losslessly.
tree = parse_block_formula("~(j(4) * t(5)) > i(5)")
print("\ncanonical form:", format_block_formula(tree))

# Treatment assignment is ordinary column arithmetic on the table; here a
# stepped-wedge switch pattern (cluster cl starts treatment at period cl+1).
sw = nelder("~(cl(6) * t(7)) > i(4)")
sw = sw.with_column("int", (sw["t"] > sw["cl"]).astype(np.int64))
grid = np.zeros((6, 7), dtype=int)
grid[sw["cl"] - 1, sw["t"] - 1] = sw["int"]
print("\nstepped-wedge switch pattern (rows = clusters):")
print(grid)

# Tables serialize to plain CSV for external tools.
sw.to_csv("/tmp/stepped_wedge.csv")
print("\nwrote /tmp/stepped_wedge.csv")
