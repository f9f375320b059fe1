"""A taster claims to tell which of eight cups had milk poured first.

Four of the eight cups are milk-first, chosen completely at random.  If the
taster names all four correctly, how surprising is that when the guesses
carry no information?  Three routes to the answer should agree.
"""

import numpy as np

from condrt import LARGE, ObservedData, Statistic, build_complete_randomization, exact_p_value, fisher_sharp_null, whole_space
from condrt.applications import TwoByTwoTable, fisher_exact

milk_first = np.array([1, 0, 0, 1, 1, 0, 1, 0])
guessed_milk = milk_first.astype(float)

# hits: cups that were milk-first and guessed milk-first
hits = Statistic(lambda z, y, ctx: float(y[:][np.asarray(z) == 1].sum()), LARGE, "hits")

design = build_complete_randomization(8, 4)
report = exact_p_value(design, whole_space(design), fisher_sharp_null(8), hits, ObservedData(milk_first, guessed_milk))
print(f"randomization test over {report.cell_size} arrangements: p = {report.p:.5f}")

table = TwoByTwoTable(n11=4, n10=0, n01=0, n00=4)
print(f"hypergeometric tail:                      p = {fisher_exact(table):.5f}")
print(f"one arrangement in seventy:               p = {1 / 70:.5f}")

# three of four right is much less convincing
partial = np.array([1, 0, 0, 1, 0, 1, 1, 0], dtype=float)
r3 = exact_p_value(design, whole_space(design), fisher_sharp_null(8), hits, ObservedData(milk_first, partial))
print(f"\nwith three of four correct: p = {r3.p:.4f} (17/70 = {17 / 70:.4f})")
