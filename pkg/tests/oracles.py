"""Independently coded naive-loop oracles for head math.

Nothing here touches the head module's tensor machinery: plain python loops
over plain numpy arrays, written directly from the defining formulas. Tests
compare the production implementations against these.
"""

import math

import numpy as np


def ln_row(x, g, b, eps=1e-6):
    m = x.mean()
    v = ((x - m) ** 2).mean()
    return (x - m) / math.sqrt(v + eps) * g + b


def norm_row(x, eps=1e-6):
    return x / (np.linalg.norm(x) + eps)


def oracle_cap(p, q, params, cfg, block_id):
    """Three-loop cross-attention pooling; returns (v_prototype, v_query)."""
    spec = [s for s in cfg.blocks if s.block_id == block_id][0]
    c = p.shape[1]
    n_heads = spec.heads if spec.heads else c // 64
    d = c // n_heads
    g = params[f"b{block_id}.ln_g"]
    b = params[f"b{block_id}.ln_b"]
    vq = ln_row(q.reshape(-1), g, b)
    vt = np.stack([ln_row(row, g, b) for row in p])
    s_count = p.shape[0]
    vp_parts, vq_parts = [], []
    for j in range(n_heads):
        wk = params[f"b{block_id}.wk"][j]
        wv = params[f"b{block_id}.wv"][j]
        kap = params[f"b{block_id}.kappa"][j]
        gate = 1.0 / (1.0 + np.exp(-(vq @ kap))) if cfg.coexcitation else np.ones(d)
        qv = vq @ wv
        if cfg.cross_attention:
            qk = vq @ wk
            zk = np.stack([vt[i] @ wk for i in range(s_count)])
            if cfg.cas_kind == "dba":
                c_dba = math.sqrt(4.0 / math.pi) * d
                s_dba = math.sqrt((2.0 - 4.0 / math.pi) * d)
                raw = np.array([(c_dba - np.abs(qk - zk[i]).sum()) / s_dba
                                * cfg.eta for i in range(s_count)])
            else:
                raw = np.array([(qk @ zk[i]) / math.sqrt(d) * cfg.eta
                                for i in range(s_count)])
            e = np.exp(raw - raw.max())
            weights = e / e.sum()
            values = np.stack([
                (vt[i] @ wv) * gate
                + (zk[i] if cfg.skip_mode == "in_attention" else 0.0)
                for i in range(s_count)])
            o_p = np.zeros(d)
            for i in range(s_count):
                o_p = o_p + weights[i] * values[i]
            o_q = qv * gate + (qk if cfg.skip_mode == "in_attention" else 0.0)
        else:
            values = np.stack([
                (vt[i] @ wv) * gate
                + (vt[i][j * d:(j + 1) * d] if cfg.skip_mode == "in_attention"
                   else 0.0)
                for i in range(s_count)])
            o_p = values.mean(axis=0)
            o_q = qv * gate + (vq[j * d:(j + 1) * d]
                               if cfg.skip_mode == "in_attention" else 0.0)
        vp_parts.append(o_p)
        vq_parts.append(o_q)
    return np.concatenate(vp_parts), np.concatenate(vq_parts)


def oracle_block_logits(protos, q, temperature):
    m = protos.mean(axis=0)
    qh = norm_row(q.reshape(-1) - m)
    return np.array([qh @ norm_row(protos[l] - m)
                     for l in range(protos.shape[0])]) / temperature


def oracle_logsumexp(rows):
    out = []
    for l in range(rows.shape[1]):
        col = rows[:, l]
        m = col.max()
        out.append(m + math.log(np.exp(col - m).sum()))
    return np.array(out)
