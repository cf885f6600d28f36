"""Straight-line numpy reimplementations used as test oracles.

Everything here works one triplet or one matrix entry at a time with
explicit loops, shares no code with kgalign beyond reading parameter
arrays, and is deliberately slow.
"""

import math

import numpy as np

RELATIONS = ("v-a", "b-v", "b-a", "a-v", "v-b", "a-b")


def reverse_name(r):
    h, t = r.split("-")
    return f"{t}-{h}"


def layer_norm(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x):
        mu = math.fsum(row) / len(row)
        var = math.fsum((v - mu) ** 2 for v in row) / len(row)
        out[i] = (row - mu) / math.sqrt(var + eps) * g + b
    return out


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = math.fsum(e)
    return np.array([v / s for v in e])


def encode(params, heads, seq):
    """One (4, d) sequence through the triplet encoder with outer residual."""
    p = {k: v.data for k, v in params.items()}
    n, d = seq.shape
    dh = d // heads
    x = seq + p["pos"]
    layer = 0
    while f"layer{layer}.wq" in p:
        pre = f"layer{layer}."
        h = layer_norm(x, p[pre + "ln1_g"], p[pre + "ln1_b"])
        q = h @ p[pre + "wq"] + p[pre + "bq"]
        k = h @ p[pre + "wk"] + p[pre + "bk"]
        v = h @ p[pre + "wv"] + p[pre + "bv"]
        ctx = np.zeros((n, d))
        for head in range(heads):
            cols = slice(head * dh, (head + 1) * dh)
            for i in range(n):
                w = softmax_row([float(q[i, cols] @ k[j, cols]) / math.sqrt(dh) for j in range(n)])
                ctx[i, cols] = sum(w[j] * v[j, cols] for j in range(n))
        x = x + ctx @ p[pre + "wo"] + p[pre + "bo"]
        h2 = layer_norm(x, p[pre + "ln2_g"], p[pre + "ln2_b"])
        x = x + gelu(h2 @ p[pre + "w1"] + p[pre + "b1"]) @ p[pre + "w2"] + p[pre + "b2"]
        layer += 1
    out = layer_norm(x, p["final_ln_g"], p["final_ln_b"]) @ p["head.w"] + p["head.b"]
    return out + seq


def project(state, table, h, r, t, compensation=True):
    """(compensated projected head, projected tail) for one triplet."""
    d = len(h)
    idx = RELATIONS.index(r)
    rel = table.vectors.data[idx]
    z = encode(state.params, state.heads, np.stack([h, rel[:d], rel[d:], t]))
    head = z[0] * z[1]
    tail = z[3] * z[2]
    if compensation:
        dev = table.deviation.data
        head = head - dev[0 if dev.shape[0] == 1 else idx]
    return head, tail


def cos(u, v):
    return float(u @ v) / (math.sqrt(float(u @ u)) * math.sqrt(float(v @ v)))


def plausibility(u, v, mode):
    if mode == "cosine":
        return cos(u, v)
    return -math.sqrt(float((u - v) @ (u - v)) + 1e-12)


def score_triplet(state, table, h, r, t, mode="cosine", compensation=True):
    head, tail = project(state, table, h, r, t, compensation)
    return plausibility(head, tail, mode)


def kl_row(q, logits, orientation="truth_first"):
    p = softmax_row(list(logits))
    if orientation == "truth_first":
        return math.fsum(qi * math.log(qi / pi) for qi, pi in zip(q, p) if qi > 0)
    qs = [(1 - 1e-4) * qi + 1e-4 / len(q) for qi in q]
    return math.fsum(pi * math.log(pi / qi) for qi, pi in zip(qs, p))


def truth(mask):
    return [[float(m) / sum(row) for m in row] for row in mask]


def contrast(anchors, candidates, mask, tau, mode, orientation):
    n = len(anchors)
    q = truth(mask)
    total = 0.0
    for i in range(n):
        logits = [plausibility(anchors[i], candidates[j], mode) / tau for j in range(len(candidates))]
        total += kl_row(q[i], logits, orientation)
    return total / n


def mm_loss(a, c, mask, tau=1.0, orientation="truth_first"):
    mask = np.asarray(mask, bool)
    fwd = contrast(a, c, mask, tau, "cosine", orientation)
    rev = contrast(c, a, mask.T, tau, "cosine", orientation)
    return 0.5 * (fwd + rev)


def triplet_loss(state, table, heads, r, tails, mask, tau=1.0, *, reverse=True, compensation=True,
                 mode="cosine", orientation="truth_first"):
    mask = np.asarray(mask, bool)
    pairs = [project(state, table, h, r, t, compensation) for h, t in zip(heads, tails)]
    fwd = contrast([p[0] for p in pairs], [p[1] for p in pairs], mask, tau, mode, orientation)
    if not reverse:
        return fwd
    rr = reverse_name(r)
    pairs = [project(state, table, t, rr, h, compensation) for h, t in zip(heads, tails)]
    rev = contrast([p[0] for p in pairs], [p[1] for p in pairs], mask.T, tau, mode, orientation)
    return 0.5 * (fwd + rev)


def positive_mask(head_keys, tail_keys):
    n = len(head_keys)
    return [[any(head_keys[k] == head_keys[i] and tail_keys[k] == tail_keys[j] for k in range(n))
             for j in range(n)] for i in range(n)]


def mm_similarity(V, A):
    return np.array([[cos(v, a) for a in A] for v in V])


def tri_similarity(state, table, V, A, mode="cosine", compensation=True):
    out = np.empty((len(V), len(A)))
    for i, v in enumerate(V):
        for j, a in enumerate(A):
            out[i, j] = 0.5 * (score_triplet(state, table, v, "v-a", a, mode, compensation)
                               + score_triplet(state, table, a, "a-v", v, mode, compensation))
    return out


def fuse(s_mm, s_tri):
    return [[0.5 * (x + y) for x, y in zip(rm, rt)] for rm, rt in zip(s_mm, s_tri)]
