"""Brute-force metric references, written without sorting or ranking tricks."""
import numpy as np


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            wins += 1.0 if p > n else 0.5 if p == n else 0.0
    return wins / (len(pos) * len(neg))


def sweep_fpr_at_tpr(scores, labels, target=0.95):
    """Try every distinct score as threshold; keep the largest one reaching ``target``."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    best = None
    for t in sorted(set(scores.tolist())):
        flagged = scores >= t
        tpr = np.sum(flagged & (labels == 1)) / np.sum(labels == 1)
        if tpr >= target:
            best = t
    fpr = np.sum((scores >= best) & (labels == 0)) / np.sum(labels == 0)
    return float(fpr), best


def loop_f1(scores, labels, threshold):
    tp = fp = fn = 0
    for s, y in zip(scores, labels):
        flagged = s >= threshold
        tp += flagged and y == 1
        fp += flagged and y == 0
        fn += (not flagged) and y == 1
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def random_score_sets(count, max_points, seed):
    """Score sets with ties, both classes present, sizes up to ``max_points``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n = int(rng.integers(2, max_points + 1))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 0, 1
        shift = rng.uniform(0, 2)
        scores = rng.normal(size=n) + shift * labels
        if rng.random() < 0.5:
            scores = np.round(scores, int(rng.integers(0, 2)))
        out.append((scores, labels))
    return out
