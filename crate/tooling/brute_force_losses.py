#!/usr/bin/env python3
"""Brute-force reference values for the two hand-computed loss examples.

Both values are computed from first principles with plain loops over
explicit probability tables, independent of the Rust implementation.

    python3 tooling/brute_force_losses.py
"""
import itertools
import math


def kl(p, q):
    """KL(p || q) summed over the support of p."""
    return sum(pw * (math.log(pw) - math.log(q[w])) for w, pw in p.items() if pw > 0)


def reconstruction_example():
    # target sentence [a, b] gives p = 1/2 each; the head predicts q over {a, b, c}
    tokens = ["a", "b"]
    p = {w: tokens.count(w) / len(tokens) for w in set(tokens)}
    q = {"a": 0.5, "b": 0.25, "c": 0.25}
    return kl(p, q)


def contrastive_example(c=1.0, temperature=1.0):
    # B = 2 with cosine c on the diagonal and 0 elsewhere
    n = 2
    cos = [[c if j == k else 0.0 for k in range(n)] for j in range(n)]
    total = 0.0
    for j in range(n):
        row = [math.exp(cos[j][k] / temperature) for k in range(n)]
        col = [math.exp(cos[k][j] / temperature) for k in range(n)]
        total -= math.log(row[j] / sum(row))
        total -= math.log(col[j] / sum(col))
    return total


def contrastive_closed_form(c=1.0):
    return 4.0 * math.log(1.0 + math.exp(-c))


def main():
    xtr = reconstruction_example()
    cntrs = contrastive_example()
    assert abs(cntrs - contrastive_closed_form()) < 1e-12
    # enumerate a few (c, T) points to cross-check the loop against the closed form
    for c, t in itertools.product([0.3, 1.0, 2.5], [1.0]):
        assert abs(contrastive_example(c, t) - contrastive_closed_form(c)) < 1e-12
    print(f"reconstruction KL example: {xtr:.6f}")
    print(f"contrastive 2x2 example:   {cntrs:.6f}")
    assert round(xtr, 4) == 0.3466, xtr
    assert round(cntrs, 4) == 1.2530, cntrs


if __name__ == "__main__":
    main()
