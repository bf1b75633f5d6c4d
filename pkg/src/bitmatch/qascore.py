"""Query-aware scoring of a refined visible/infrared feature pair.

Five steps: bidirectional row-softmax similarity matrices, top-k
neighborhoods per patch, reciprocal match mining with argmax completion
for uncovered visible patches, a penalty-weighted per-patch similarity
vector, and a small MLP head that maps that vector to a match score in
(0, 1). Top-k / argmax selections are frozen per forward pass; gradients
flow only through the gathered softmax entries and the head.

Tie-breaking is "lowest index wins" everywhere, which makes the whole
pipeline deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import nn

PSI_CLAMP = 1e-12
CASM_HIDDEN_FACTOR = 4


@dataclass
class QaConfig:
    k: int = 3
    alpha: float = 0.20
    lam: float = 0.6

    def validate(self, num_patches: int | None = None) -> "QaConfig":
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if num_patches is not None and self.k > num_patches:
            raise ValueError(f"k={self.k} exceeds patch count {num_patches}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.lam < 0.0:
            raise ValueError("lambda must be non-negative")
        return self


@dataclass
class SimPair:
    """Row-stochastic similarity matrices plus the raw scores.

    The raw infrared->visible scores are exactly the transpose of the
    visible->infrared ones; the row softmaxes are not transposes of each
    other in general.
    """

    s_vi: dc.Tensor
    s_iv: dc.Tensor
    s_raw: dc.Tensor


@dataclass(frozen=True)
class MatchSet:
    """Reciprocal and completion matches of one pair, visible side.

    Mutual pairs carry weight 1, complementary pairs the penalty alpha.
    Together they cover every visible patch index exactly.
    """

    mutual: frozenset
    complementary: frozenset

    def coverage(self):
        return {p for (p, _) in self.mutual} | {p for (p, _) in self.complementary}


@dataclass
class CasmHead:
    lin1: nn.LinearLayer
    lin2: nn.LinearLayer
    params: nn.ParameterSet


def build_casm_head(num_patches: int, seed: int) -> CasmHead:
    rng = np.random.default_rng([seed, 0xCA5])
    params = nn.ParameterSet()
    hidden = CASM_HIDDEN_FACTOR * num_patches
    lin1 = nn.init_linear(rng, num_patches, hidden)
    lin2 = nn.init_linear(rng, hidden, 1)
    nn.register_linear(params, "casm.lin1", lin1)
    nn.register_linear(params, "casm.lin2", lin2)
    return CasmHead(lin1=lin1, lin2=lin2, params=params)


def similarity_matrices(f_v: dc.Tensor, f_i: dc.Tensor) -> SimPair:
    """Scaled dot-product patch similarities, softmaxed along each row."""
    if f_v.shape != f_i.shape:
        raise dc.ShapeMismatch("similarity_matrices", f_v.shape, f_i.shape)
    c = f_v.shape[-1]
    s_raw = dc.scale(dc.matmul(f_v, dc.transpose(f_i)), 1.0 / math.sqrt(c))
    return SimPair(s_vi=dc.softmax_rows(s_raw),
                   s_iv=dc.softmax_rows(dc.transpose(s_raw)),
                   s_raw=s_raw)


def topk_filter(s, k: int):
    """Indices of the k largest entries per row.

    Each row's list is ordered by descending value, lowest column index on
    ties. Accepts a Tensor or a plain array; selection is not taped.
    """
    values = s.data if isinstance(s, dc.Tensor) else np.asarray(s)
    n = values.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    # stable argsort on negated values: equal entries keep ascending index
    order = np.argsort(-values, axis=-1, kind="stable")
    return [[int(j) for j in row[:k]] for row in order]


def mutual_matches(r_vi, r_iv) -> frozenset:
    """Pairs (p, q) that select each other in both directions."""
    reverse = [set(nbrs) for nbrs in r_iv]
    return frozenset((p, q) for p, nbrs in enumerate(r_vi)
                     for q in nbrs if p in reverse[q])


def smooth_complement(mutual, s_vi) -> MatchSet:
    """Complete uncovered visible patches with their row argmax."""
    values = s_vi.data if isinstance(s_vi, dc.Tensor) else np.asarray(s_vi)
    covered = {p for (p, _) in mutual}
    comp = set()
    for p in range(values.shape[0]):
        if p not in covered:
            comp.add((p, int(np.argmax(values[p]))))
    return MatchSet(mutual=frozenset(mutual), complementary=frozenset(comp))


def match_weight_matrix(ms: MatchSet, n: int, alpha: float) -> np.ndarray:
    """Constant (N, N) matrix with w(p,q)/|M'_p| at every selected entry."""
    counts = np.zeros(n)
    for p, _ in ms.mutual:
        counts[p] += 1
    for p, _ in ms.complementary:
        counts[p] += 1
    if np.any(counts == 0):
        missing = int(np.argmin(counts))
        raise ValueError(f"match set leaves visible patch {missing} uncovered")
    w = np.zeros((n, n))
    for p, q in ms.mutual:
        w[p, q] = 1.0 / counts[p]
    for p, q in ms.complementary:
        w[p, q] = alpha / counts[p]
    return w


def patch_similarity_vector(ms: MatchSet, s_vi: dc.Tensor,
                            alpha: float) -> dc.Tensor:
    """Per-patch weighted mean over matched entries of the softmax matrix."""
    n = s_vi.shape[0]
    weights = dc.tensor(match_weight_matrix(ms, n, alpha))
    return dc.sum_last(dc.mul(s_vi, weights))


def casm_score(head: CasmHead, s_hat: dc.Tensor) -> dc.Tensor:
    """sigmoid(lin2(gelu(lin1(s_hat)))), clamped into (0, 1)."""
    if s_hat.shape[-1] != head.lin1.weight.shape[0]:
        raise dc.ShapeMismatch("casm_score", s_hat.shape, head.lin1.weight.shape)
    single = s_hat.ndim == 1
    x = dc.reshape(s_hat, (1, -1)) if single else s_hat
    logits = nn.linear_forward(head.lin2, dc.gelu(nn.linear_forward(head.lin1, x)))
    psi = dc.clamp(dc.sigmoid(logits), PSI_CLAMP, 1.0 - PSI_CLAMP)
    return dc.reshape(psi, ()) if single else dc.reshape(psi, (psi.shape[0],))


def pair_loss(psi: dc.Tensor, y) -> dc.Tensor:
    """Binary cross-entropy of one score (or a vector of scores).

    Scores are clamped into [1e-12, 1 - 1e-12] before the logarithms.
    """
    y_arr = np.asarray(y, dtype=np.float64)
    if y_arr.shape != psi.shape:
        y_arr = np.broadcast_to(y_arr, psi.shape).copy()
    psi_c = dc.clamp(psi, PSI_CLAMP, 1.0 - PSI_CLAMP)
    pos = dc.mul(dc.log(psi_c), dc.tensor(y_arr))
    neg_side = dc.mul(dc.log(dc.add_scalar(dc.neg(psi_c), 1.0)),
                      dc.tensor(1.0 - y_arr))
    return dc.neg(dc.add(pos, neg_side))


def total_loss(pair_mean: dc.Tensor, l_ac: dc.Tensor, lam: float) -> dc.Tensor:
    """Stage-2 objective: mean pair loss plus lam times the contrastive term."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    return dc.add(pair_mean, dc.scale(l_ac, lam))


def qa_forward(f_v: dc.Tensor, f_i: dc.Tensor, cfg: QaConfig,
               head: CasmHead):
    """Score one refined pair; returns (psi, match set, s_hat)."""
    cfg.validate(num_patches=f_v.shape[0])
    sim = similarity_matrices(f_v, f_i)
    r_vi = topk_filter(sim.s_vi, cfg.k)
    r_iv = topk_filter(sim.s_iv, cfg.k)
    ms = smooth_complement(mutual_matches(r_vi, r_iv), sim.s_vi)
    s_hat = patch_similarity_vector(ms, sim.s_vi, cfg.alpha)
    psi = casm_score(head, s_hat)
    return psi, ms, s_hat


def qa_forward_batch(f_v: dc.Tensor, f_i: dc.Tensor, cfg: QaConfig,
                     head: CasmHead):
    """Batched scoring of (P, N, C) refined pairs.

    One taped graph for the whole batch; the per-pair index selections are
    computed on the softmax values and folded into a constant weight array.
    Returns (psi vector, list of match sets, s_hat matrix).
    """
    n = f_v.shape[-2]
    cfg.validate(num_patches=n)
    sim = similarity_matrices(f_v, f_i)
    weight_blocks = []
    match_sets = []
    for pair_idx in range(f_v.shape[0]):
        s_vi_values = sim.s_vi.data[pair_idx]
        s_iv_values = sim.s_iv.data[pair_idx]
        r_vi = topk_filter(s_vi_values, cfg.k)
        r_iv = topk_filter(s_iv_values, cfg.k)
        ms = smooth_complement(mutual_matches(r_vi, r_iv), s_vi_values)
        match_sets.append(ms)
        weight_blocks.append(match_weight_matrix(ms, n, cfg.alpha))
    weights = dc.tensor(np.stack(weight_blocks))
    s_hat = dc.sum_last(dc.mul(sim.s_vi, weights))
    psi = casm_score(head, s_hat)
    return psi, match_sets, s_hat
