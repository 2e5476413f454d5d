"""Independent brute-force references used by the tests."""

import math


def rbf(ci, cj, gamma):
    return math.exp(-gamma * sum((a - b) ** 2 for a, b in zip(ci, cj)))


def brute_fc(n):
    return {(i, j) for i in range(n) for j in range(n) if i != j}


def brute_thresh(coords, gamma, tau):
    n = len(coords)
    return {(i, j) for i in range(n) for j in range(n)
            if i != j and rbf(coords[i], coords[j], gamma) >= tau}


def brute_topk(coords, gamma, k):
    n = len(coords)
    edges = set()
    for i in range(n):
        cands = [(-rbf(coords[i], coords[j], gamma), j) for j in range(n) if j != i]
        cands.sort()
        edges.update((i, j) for _, j in cands[:k])
    return edges
