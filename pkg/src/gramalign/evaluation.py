"""Retrieval and binary-classification metrics, plus the zero-shot harness.

Every metric here has a brute-force oracle in the test suite; implementations
are rank-based for speed but must agree with exhaustive enumeration exactly
(AUROC/AUPRC within 1e-12).
"""

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import NoPositives, NoRelevant, SingleClass, ZeroVector
from .heads import project
from .modality import Modality

RECALL_KS = (1, 10, 100)
DEFAULT_THRESHOLD = 0.5


class Direction(Enum):
    S_TO_P = "S_TO_P"
    P_TO_S = "P_TO_S"


@dataclass
class RetrievalResult:
    direction: Direction
    recall_at: dict  # k -> fraction of queries with a relevant hit in top-k


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int


def cosine_matrix(queries, candidates):
    """(Q, C) cosine similarities; rows are normalized internally."""
    q = np.asarray(queries, dtype=np.float64)
    c = np.asarray(candidates, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    cn = np.linalg.norm(c, axis=1, keepdims=True)
    if np.any(qn <= 1e-12) or np.any(cn <= 1e-12):
        raise ZeroVector("cosine similarity is undefined for zero rows")
    return np.clip((q / qn) @ (c / cn).T, -1.0, 1.0)


def recall_at_k(scores, relevant, ks=RECALL_KS) -> dict:
    """Fraction of queries with any relevant candidate in the top min(k, C).

    Candidates are ranked by descending score; ties break toward the lower
    candidate index. ``relevant`` is one candidate-index set per query.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n_q, n_c = scores.shape
    if len(relevant) != n_q:
        raise NoRelevant(f"{len(relevant)} relevance sets for {n_q} queries")
    rel_sets = [frozenset(int(i) for i in r) for r in relevant]
    for qi, r in enumerate(rel_sets):
        if not r:
            raise NoRelevant(f"query {qi} has no relevant candidates")
    order = np.argsort(-scores, axis=1, kind="stable")
    out = {}
    for k in ks:
        kk = min(int(k), n_c)
        hits = 0
        for qi in range(n_q):
            if any(int(c) in rel_sets[qi] for c in order[qi, :kk]):
                hits += 1
        out[int(k)] = hits / n_q
    return out


def _ranks_with_ties(scores):
    """1-based ranks, ties replaced by the mean rank of the tied block."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with half credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} positives / {n_neg} negatives")
    ranks = _ranks_with_ties(scores)
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auprc(scores, labels) -> float:
    """Area under the precision-recall step curve, descending-score sweep.

    Tied scores are processed as one block; integration is the step rule
    sum((R_i - R_{i-1}) * P_i), i.e. average precision.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise NoPositives("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s_sorted = scores[order]
    y_sorted = labels[order]
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = len(scores)
    while i < n:
        j = i
        while j + 1 < n and s_sorted[j + 1] == s_sorted[i]:
            j += 1
        tp += int(y_sorted[i : j + 1].sum())
        fp += int((j - i + 1) - y_sorted[i : j + 1].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return area


def classification_metrics(scores, labels, threshold: float = DEFAULT_THRESHOLD) -> dict:
    """Thresholded sensitivity/F1/accuracy; zero denominators score 0."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    pred = scores >= threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))

    def _safe(num, den, name):
        if den == 0:
            warnings.warn(f"{name} denominator is zero; reporting 0", RuntimeWarning)
            return 0.0
        return num / den

    return {
        "sensitivity": _safe(tp, tp + fn, "sensitivity"),
        "f1": _safe(2 * tp, 2 * tp + fp + fn, "f1"),
        "accuracy": _safe(tp + tn, tp + fp + tn + fn, "accuracy"),
        "confusion": ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn),
    }


def run_retrieval(model, smiles_table, protein_table, interactions, ks=RECALL_KS):
    """Zero-shot retrieval in both directions over the full candidate pools.

    ``interactions`` are known (smiles_id, protein_id) pairs; each pair is one
    query whose relevance set is the query entity's full set of known
    partners. Embeddings are projected in eval mode and compared by cosine.
    """
    f_s, _ = project(model.projectors[Modality.SMILES], smiles_table.rows, "eval")
    f_p, _ = project(model.projectors[Modality.PROTEIN], protein_table.rows, "eval")

    s_index = {e: i for i, e in enumerate(smiles_table.ids)}
    p_index = {e: i for i, e in enumerate(protein_table.ids)}
    partners_of_drug = {}
    partners_of_protein = {}
    for d_id, p_id in interactions:
        partners_of_drug.setdefault(s_index[d_id], set()).add(p_index[p_id])
        partners_of_protein.setdefault(p_index[p_id], set()).add(s_index[d_id])

    sim = cosine_matrix(f_s, f_p)
    results = []
    for direction, mat, partner_map, side in (
        (Direction.S_TO_P, sim, partners_of_drug, 0),
        (Direction.P_TO_S, sim.T, partners_of_protein, 1),
    ):
        query_rows = []
        relevant = []
        for d_id, p_id in interactions:
            q = s_index[d_id] if side == 0 else p_index[p_id]
            query_rows.append(q)
            relevant.append(partner_map[q])
        recall = recall_at_k(mat[query_rows], relevant, ks)
        results.append(RetrievalResult(direction=direction, recall_at=recall))
    return results
