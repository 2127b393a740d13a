#!/usr/bin/env python3
"""Conformal prediction sets and the uncertainty score, step by step.

Shows how the rank-penalized score is assembled for a small probability
vector, how the threshold carves out the prediction set, and why the set
size saturates for diffuse distributions (the probability spread then does
the discriminating).
"""

import numpy as np

from xmcl import CpConfig, prediction_set, rank_and_cumulate, uncertainty
from xmcl.conformal import cp_scores

pi = np.array([0.6, 0.3, 0.1])
print("pi =", pi)
ranks, rho = rank_and_cumulate(pi)
print("descending-probability ranks:", ranks)
print("cumulative mass above each identity:", rho)
print("scores (rho + pi + penalty):", cp_scores(pi))

ps = prediction_set(pi)
print(f"members={ps.members.tolist()}  size={ps.size}  conf={ps.conf:.2f}  unc={ps.unc:.2f}")
print()

print("A sharp distribution admits only the top identity at a tight threshold:")
sharp = np.array([0.9, 0.05, 0.05])
ps = prediction_set(sharp, CpConfig(tau=0.92))
print(f"pi={sharp}, tau=0.92 -> size={ps.size}, unc={ps.unc:.2f}")
print()

print("Uniform over 100 identities: the rank penalty caps the set at 25")
uniform = np.full(100, 0.01)
ps = prediction_set(uniform)
print(f"size={ps.size}, conf={ps.conf:.2f}, unc={ps.unc:.2f}")
print()

print("With many identities the set-size term dominates: sharper is lower-unc")
c = 30
sharp = np.zeros(c)
sharp[0] = 0.97
sharp[1:] = 0.03 / (c - 1)
for name, v in [("near-one-hot", sharp), ("uniform     ", np.full(c, 1 / c))]:
    ps = prediction_set(v)
    print(f"  {name} C={c} -> size={ps.size:>2}  conf={ps.conf:.3f}  unc={ps.unc:.3f}")
print()

print("With few identities the threshold never excludes anyone, so the")
print("probability spread is the only discriminator and flatter wins:")
for name, v in [
    ("near-one-hot", np.array([0.96, 0.02, 0.01, 0.01])),
    ("uniform     ", np.full(4, 0.25)),
]:
    print(f"  {name} C=4  -> unc={uncertainty(v):.3f}")
print()
print("Lower uncertainty wins a replay-bank slot; exact ties keep the incumbent.")
