"""Independent reference implementations used only by the tests.

Each one is written the slow, obvious way (explicit loops, no vectorized
shortcuts shared with the package) so that agreement is meaningful.
"""
import math

import numpy as np


def auc_pair_count(scores, labels):
    """P(s+ > s-) + P(tie)/2 by enumerating every positive/negative pair."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def multitask_auc_oracle(scores, labels):
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    per = []
    for t in range(scores.shape[1]):
        s = [scores[i, t] for i in range(len(scores)) if not math.isnan(labels[i, t])]
        y = [labels[i, t] for i in range(len(scores)) if not math.isnan(labels[i, t])]
        if 1 in y and 0 in y:
            per.append(auc_pair_count(s, y))
        else:
            per.append(float("nan"))
    valid = [a for a in per if not math.isnan(a)]
    return per, (sum(valid) / len(valid) if valid else float("nan"))


def positives_double_loop(anchor_labels, aug_labels, gamma):
    """Positive set of each anchor by explicit comparison of label vectors."""
    m = len(anchor_labels)
    out = [[False] * m for _ in range(m)]
    for i in range(m):
        for j in range(m):
            a = list(np.atleast_1d(anchor_labels[i]))
            b = list(np.atleast_1d(aug_labels[j]))
            agree = sum(1 for x, y in zip(a, b) if x == y)
            out[i][j] = (i == j) or (agree / len(a) >= gamma - 1e-12)
    return np.array(out)


def _cos(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return dot / (nu * nv)


def contrastive_loss_scalar(z, z_aug, positives):
    """Mean over anchors of minus the mean log-softmax probability of the
    anchor's positives, computed one scalar at a time."""
    m = len(z)
    total = 0.0
    for i in range(m):
        sims = [_cos(z[i], z_aug[j]) for j in range(m)]
        top = max(sims)
        log_den = top + math.log(sum(math.exp(s - top) for s in sims))
        pos = [j for j in range(m) if positives[i][j]]
        total += -sum(sims[j] - log_den for j in pos) / len(pos)
    return total / m


def has_cycle_union_find(num_nodes, edges):
    parent = list(range(num_nodes))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for u, v in edges:
        ru, rv = find(int(u)), find(int(v))
        if ru == rv:
            return True
        parent[ru] = rv
    return False


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))
