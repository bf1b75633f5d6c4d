"""Independent brute-force oracles used to cross-check the library.

Everything here is written in plain scalar Python (loops, dicts, math)
on purpose: none of these functions share code with the package, so an
agreement between the two paths is meaningful evidence.
"""

import math


def matmul_oracle(a, b):
    """Triple-loop matrix product on nested lists."""
    m, k = len(a), len(a[0])
    k2, n = len(b), len(b[0])
    assert k == k2
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i][t] * b[t][j]
            out[i][j] = acc
    return out


def softmax_row_oracle(row):
    mx = max(row)
    exps = [math.exp(v - mx) for v in row]
    s = sum(exps)
    return [e / s for e in exps]


def cross_attention_oracle(q_in, kv_in, wq, wk, wv):
    """Direct per-element evaluation of scaled cross-attention."""
    c = len(q_in[0])
    q = matmul_oracle(q_in, wq)
    k = matmul_oracle(kv_in, wk)
    v = matmul_oracle(kv_in, wv)
    n_q, n_k = len(q), len(k)
    scores = [[sum(q[i][d] * k[j][d] for d in range(c)) / math.sqrt(c)
               for j in range(n_k)] for i in range(n_q)]
    attn = [softmax_row_oracle(r) for r in scores]
    return matmul_oracle(attn, v)


def cross_entropy_oracle(logits, labels):
    """Mean of -log softmax(logits)[label], computed row by row."""
    total = 0.0
    for row, lab in zip(logits, labels):
        probs = softmax_row_oracle(row)
        total += -math.log(probs[lab])
    return total / len(labels)


def batch_hard_triplet_oracle(feats, labels, margin):
    """Exhaustive hardest-positive / hardest-negative scan."""

    def dist(u, v):
        d2 = sum((a - b) ** 2 for a, b in zip(u, v))
        return math.sqrt(max(d2, 1e-12))

    n = len(feats)
    terms = []
    for i in range(n):
        pos = [dist(feats[i], feats[j]) for j in range(n)
               if j != i and labels[j] == labels[i]]
        negs = [dist(feats[i], feats[j]) for j in range(n)
                if labels[j] != labels[i]]
        if not pos or not negs:
            continue
        terms.append(max(0.0, max(pos) - min(negs) + margin))
    if not terms:
        raise ValueError("no valid anchor")
    return sum(terms) / len(terms)


def contrastive_loss_oracle(feats, labels, tau):
    """Direct evaluation of the per-anchor positive/negative log-ratio loss."""
    n = len(feats)

    def dot(u, v):
        return sum(a * b for a, b in zip(u, v))

    anchor_losses = []
    for i in range(n):
        pos = [j for j in range(n) if j != i and labels[j] == labels[i]]
        negs = [j for j in range(n) if labels[j] != labels[i]]
        if not pos:
            continue
        neg_sum = sum(math.exp(dot(feats[i], feats[j]) / tau) for j in negs)
        acc = 0.0
        for p in pos:
            num = math.exp(dot(feats[i], feats[p]) / tau)
            acc += -math.log(num / (num + neg_sum))
        anchor_losses.append(acc / len(pos))
    if not anchor_losses:
        raise ValueError("every anchor is positive-free")
    return sum(anchor_losses) / len(anchor_losses)


def topk_oracle(matrix, k):
    """Full sort per row: descending value, ascending index on ties."""
    result = []
    for row in matrix:
        order = sorted(range(len(row)), key=lambda j: (-row[j], j))
        result.append(order[:k])
    return result


def mutual_matches_oracle(r_vi, r_iv):
    """O(N^2 k) double-loop membership scan."""
    matches = set()
    for p, nbrs in enumerate(r_vi):
        for q in nbrs:
            if p in r_iv[q]:
                matches.add((p, q))
    return matches


def complement_oracle(mutual, s_vi):
    """Scan for uncovered rows and complete each with its row argmax."""
    n = len(s_vi)
    covered = {p for (p, _) in mutual}
    comp = set()
    for p in range(n):
        if p in covered:
            continue
        row = s_vi[p]
        best = 0
        for j in range(1, n):
            if row[j] > row[best]:
                best = j
        comp.add((p, best))
    return comp


def patch_vector_oracle(mutual, comp, s_vi, alpha):
    """Per-row weighted mean over the selected columns."""
    n = len(s_vi)
    out = [0.0] * n
    for p in range(n):
        entries = [(q, 1.0) for (pp, q) in mutual if pp == p]
        entries += [(q, alpha) for (pp, q) in comp if pp == p]
        assert entries, f"row {p} uncovered"
        out[p] = sum(w * s_vi[p][q] for q, w in entries) / len(entries)
    return out


def gelu_oracle(x):
    u = math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)
    return 0.5 * x * (1.0 + math.tanh(u))


def sigmoid_oracle(x):
    return 1.0 / (1.0 + math.exp(-x))


def qa_pipeline_oracle(f_v, f_i, k, alpha, head_w1, head_b1, head_w2, head_b2):
    """Scalar re-implementation of the five scoring steps.

    Returns (psi, mutual, complementary, s_hat). ``head_*`` are nested
    lists for the two scoring layers.
    """
    c = len(f_v[0])
    raw = [[sum(f_v[i][d] * f_i[j][d] for d in range(c)) / math.sqrt(c)
            for j in range(len(f_i))] for i in range(len(f_v))]
    raw_t = [list(col) for col in zip(*raw)]
    s_vi = [softmax_row_oracle(r) for r in raw]
    s_iv = [softmax_row_oracle(r) for r in raw_t]
    r_vi = topk_oracle(s_vi, k)
    r_iv = topk_oracle(s_iv, k)
    mutual = mutual_matches_oracle(r_vi, r_iv)
    comp = complement_oracle(mutual, s_vi)
    s_hat = patch_vector_oracle(mutual, comp, s_vi, alpha)
    hidden = [gelu_oracle(sum(s_hat[i] * head_w1[i][h] for i in range(len(s_hat)))
                          + head_b1[h]) for h in range(len(head_b1))]
    logit = sum(hidden[h] * head_w2[h][0] for h in range(len(hidden))) + head_b2[0]
    return sigmoid_oracle(logit), mutual, comp, s_hat


def average_precision_oracle(relevance):
    """Mean over relevant items of precision at their rank."""
    hits = 0
    precisions = []
    for rank, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            precisions.append(hits / rank)
    if not precisions:
        raise ValueError("query with no relevant item")
    return sum(precisions) / len(precisions)


def cmc_oracle(relevances):
    """CMC@r = fraction of queries with a hit at rank <= r."""
    depth = len(relevances[0])
    curve = []
    for r in range(1, depth + 1):
        curve.append(sum(1 for rel in relevances if any(rel[:r])) / len(relevances))
    return curve


def cosine_oracle(u, v):
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0 or nv == 0:
        return 0.0
    return sum(a * b for a, b in zip(u, v)) / (nu * nv)


def mean_oracle(values):
    total = 0.0
    for v in values:
        total += v
    return total / len(values)
