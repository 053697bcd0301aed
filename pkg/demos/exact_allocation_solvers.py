"""The allocation step: given estimated success rates, find the best
feasible action exactly.

Three constraint families are shown: one-to-one matching of k people to k
places, places with several seats, and families of different sizes placed
into places with limited room (a multiple knapsack; a family may be left
waiting when nothing fits).

Run:  python3 demos/exact_allocation_solvers.py
"""
import numpy as np

from combi_bandit.solvers import (
    Assignment,
    Capacitated,
    MultipleKnapsack,
    brute_force_argmax,
    solve,
    unassigned_items,
)

rng = np.random.default_rng(7)

print("one-to-one matching, 3 people x 3 places")
rates = np.round(rng.random((3, 3)), 2)
print(rates)
a = solve(rates.ravel(), Assignment(3)).reshape(3, 3)
print("chosen matching:\n", a, "\ntotal", float((a * rates).sum()))

print("\n4 people, place A has 1 seat and place B has 3")
fs = Capacitated(4, (1, 3))
rates = np.round(rng.random(fs.d), 2)
a = solve(rates, fs).reshape(4, 2)
for person, row in enumerate(a):
    print(f"  person {person + 1} -> place {'AB'[int(np.argmax(row))]}  rates {rates.reshape(4, 2)[person]}")

print("\nfamilies of sizes 4, 3, 2, 2 and 1 into places with room 5 and 4")
sizes, room = (4, 3, 2, 2, 1), (5, 4)
fs = MultipleKnapsack(sizes, room)
rates = np.round(rng.random(fs.d), 2)
a = solve(rates, fs)
for fam, row in enumerate(a.reshape(len(sizes), len(room))):
    where = f"place {'AB'[int(np.argmax(row))]}" if row.any() else "waits"
    print(f"  family {fam + 1} (size {sizes[fam]}): {where}")
print("  waiting:", [int(i) + 1 for i in unassigned_items(a, fs)])

_, best = brute_force_argmax(rates, fs)
print(f"  solver value {float(a @ rates):.2f}, exhaustive search value {best:.2f}")
