"""Plain-Python reference implementations used as test oracles.

These deliberately avoid numpy/torch/scipy so they share no code path with
the package under test.
"""

import math


def cosine(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return dot / (nu * nv)


def unit(v):
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def softmax(xs):
    top = max(xs)
    e = [math.exp(x - top) for x in xs]
    s = sum(e)
    return [x / s for x in e]


def mean_vector(rows):
    n = len(rows)
    return [sum(r[d] for r in rows) / n for d in range(len(rows[0]))]


def level_probabilities(img, sentences, temperature):
    return softmax([cosine(img, s) / temperature for s in sentences])


def patch_level_probabilities(patches, sentences, temperature):
    return level_probabilities(mean_vector(patches), sentences, temperature)


def word_similarity(img, words):
    return sum(cosine(img, w) for w in words) / len(words)


def coarse_score(p):
    big_l = len(p)
    expected = sum((j + 1) * pj for j, pj in enumerate(p))
    return big_l / (big_l - 1) * (expected - 1)


def fine_score(w_image, w_patch, levels):
    return levels * (w_image + w_patch) / 2


def fused(q_image, q_patch, q_fine, alpha):
    return alpha * q_image + (1 - alpha) * q_patch + q_fine


def mae(q, mos):
    return sum(abs(a - b) for a, b in zip(q, mos)) / len(q)


def average_ranks(xs):
    """1-based ranks; tied values share the mean of the positions they span."""
    order = sorted(range(len(xs)), key=lambda i: xs[i])
    ranks = [0.0] * len(xs)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and xs[order[j + 1]] == xs[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def pearson(x, y):
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def spearman(x, y):
    return pearson(average_ranks(x), average_ranks(y))
