"""Deliberately naive reference implementations used as test oracles."""
import math


def soft_targets_brute(labels, alpha):
    n = len(labels)
    q = [[0.0] * n for _ in range(n)]
    fallback = []
    for i in range(n):
        others = [j for j in range(n) if j != i and labels[j] == labels[i]]
        if not others:
            q[i][i] = 1.0
            fallback.append(i)
            continue
        q[i][i] = alpha
        for j in others:
            q[i][j] = (1.0 - alpha) / len(others)
    return q, fallback


def hardest_positive_brute(zhat, labels):
    out = []
    for i in range(len(labels)):
        best, best_j = None, -1
        for j in range(len(labels)):
            if j == i or labels[j] != labels[i]:
                continue
            s = sum(a * b for a, b in zip(zhat[i], zhat[j]))
            if best is None or s < best:
                best, best_j = s, j
        out.append(best_j)
    return out


def ranking_brute(dist_row, valid):
    """Selection-sort ranking by (distance, index)."""
    remaining = list(valid)
    order = []
    while remaining:
        pick = remaining[0]
        for g in remaining[1:]:
            if (dist_row[g], g) < (dist_row[pick], pick):
                pick = g
        order.append(pick)
        remaining.remove(pick)
    return order


def retrieval_brute(dist, q_ids, q_cams, g_ids, g_cams, ks):
    """Return ({k: cmc}, mAP) by re-ranking every query from scratch."""
    found = {k: 0 for k in ks}
    aps = []
    for q in range(len(q_ids)):
        valid = [g for g in range(len(g_ids)) if not (g_ids[g] == q_ids[q] and g_cams[g] == q_cams[q])]
        order = ranking_brute(dist[q], valid)
        rel = [g_ids[g] == q_ids[q] for g in order]
        if not any(rel):
            continue
        first = rel.index(True) + 1
        for k in ks:
            found[k] += first <= k
        hits, precisions = 0, []
        for r, is_rel in enumerate(rel, start=1):
            if is_rel:
                hits += 1
                precisions.append(hits / r)
        aps.append(math.fsum(precisions) / len(precisions))
    if not aps:
        return {k: 0.0 for k in ks}, 0.0
    return {k: found[k] / len(aps) for k in ks}, math.fsum(aps) / len(aps)


def logsumexp(xs):
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def batch_violations(batch, cfg, multi_index, single_index):
    """List every way a composed batch breaks the sampling contract."""
    bad = []
    if len(batch.multi) != cfg.P_m * cfg.K_m or len(batch.single) != cfg.P_s * cfg.K_s:
        bad.append(f"sizes {len(batch.multi)}+{len(batch.single)}")
    for part, P, K, index in ((batch.multi, cfg.P_m, cfg.K_m, multi_index),
                              (batch.single, cfg.P_s, cfg.K_s, single_index)):
        ids = [r.identity for r in part]
        groups = {}
        for r in part:
            groups.setdefault(r.identity, []).append(r)
        if len(groups) != P or any(len(g) != K for g in groups.values()):
            bad.append(f"part is not {P} ids x {K}: {sorted(ids)}")
        if part is batch.multi:
            for ident, recs in groups.items():
                available = len(index[ident])
                seen = len({r.camera for r in recs})
                if seen != min(K, available):
                    bad.append(f"id {ident}: {seen} cameras of {available} available")
        else:
            bad += [f"uncaptioned single record {r.image_path}" for r in part if not r.caption]
    return bad
