"""Slow reference implementations used as oracles. Only numpy and math; no package code."""
from __future__ import annotations

import math

import numpy as np


def linear_loop(x, w, b=None):
    x, w = np.asarray(x, float), np.asarray(w, float)
    m, k = x.shape
    n = w.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += x[i, t] * w[t, j]
            out[i, j] = s + (0.0 if b is None else b[j])
    return out


def layer_norm_loop(x, scale, shift, eps=1e-5):
    out = np.zeros_like(x, dtype=float)
    for i, row in enumerate(np.atleast_2d(x)):
        mu = sum(row) / len(row)
        var = sum((v - mu) ** 2 for v in row) / len(row)
        out[i] = [(v - mu) / math.sqrt(var + eps) * s + t for v, s, t in zip(row, scale, shift)]
    return out


def softmax_list(z):
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def gelu_scalar(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def mhca_loop(q_seq, kv_seq, w):
    """Per-head, per-query loops over a dict of raw weight arrays (pre-norm, FFN inside the increment)."""
    heads, dh = w["heads"], w["d_head"]
    qn = layer_norm_loop(q_seq, w["ln_q_scale"], w["ln_q_shift"])
    kvn = layer_norm_loop(kv_seq, w["ln_kv_scale"], w["ln_kv_shift"])
    Q, K, V = linear_loop(qn, w["w_q"]), linear_loop(kvn, w["w_k"]), linear_loop(kvn, w["w_v"])
    Lq, Lk = Q.shape[0], K.shape[0]
    ctx = np.zeros((Lq, heads * dh))
    weights = np.zeros((heads, Lq, Lk))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(Lq):
            scores = [float(np.dot(Q[i, sl], K[j, sl])) / math.sqrt(dh) for j in range(Lk)]
            a = softmax_list(scores)
            weights[h, i] = a
            for j in range(Lk):
                ctx[i, sl] += a[j] * V[j, sl]
    out = linear_loop(ctx, w["w_o"])
    if "ffn_w1" in w:
        hid = linear_loop(layer_norm_loop(out, w["ln_ffn_scale"], w["ln_ffn_shift"]), w["ffn_w1"], w["ffn_b1"])
        hid = np.vectorize(gelu_scalar)(hid)
        out = out + linear_loop(hid, w["ffn_w2"], w["ffn_b2"])
    return out, weights


def topk_full_sort(q_proj, rows, k):
    """Cosine against every row, full sort by (-score, index)."""
    qn = math.sqrt(sum(v * v for v in q_proj))
    scored = []
    for i, r in enumerate(rows):
        rn = math.sqrt(sum(v * v for v in r))
        s = 0.0 if qn == 0 or rn == 0 else float(np.dot(q_proj / qn, r / rn))
        scored.append((-s, i))
    scored.sort()
    return [i for _, i in scored[:k]], [-s for s, _ in scored[:k]]


def epicenter_loop(f, center_rc, tau, rows, cols):
    r, c = center_rc
    window = [f[i * cols + j] for i in range(max(r - 1, 0), min(r + 2, rows))
              for j in range(max(c - 1, 0), min(c + 2, cols))]
    q = np.mean(window, axis=0)
    w = softmax_list([float(np.dot(fi, q)) / tau for fi in f])
    return sum(wi * fi for wi, fi in zip(w, f))


def nll_formula(logits, targets):
    total = 0.0
    for row, y in zip(logits, targets):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[y]
    return total


def cider_by_hand(cands, refs, n_max=4):
    """Textbook CIDEr with one reference: TF-IDF cosine per order, mean over orders present in the reference, x10."""
    toks = [(c.split(), r.split()) for c, r in zip(cands, refs)]
    N = len(toks)

    def grams(t, n):
        out = {}
        for i in range(len(t) - n + 1):
            g = tuple(t[i:i + n])
            out[g] = out.get(g, 0) + 1
        return out

    df = [{} for _ in range(n_max)]
    for _, r in toks:
        for n in range(1, n_max + 1):
            for g in grams(r, n):
                df[n - 1][g] = df[n - 1].get(g, 0) + 1
    total = 0.0
    for c, r in toks:
        sims = []
        for n in range(1, n_max + 1):
            rg, cg = grams(r, n), grams(c, n)
            if not rg:
                continue
            idf = lambda g: math.log(N / max(1, df[n - 1].get(g, 0)))  # noqa: E731
            vc = {g: k * idf(g) for g, k in cg.items()}
            vr = {g: k * idf(g) for g, k in rg.items()}
            nc = math.sqrt(sum(v * v for v in vc.values()))
            nr = math.sqrt(sum(v * v for v in vr.values()))
            if nc and nr:
                sims.append(sum(v * vr.get(g, 0.0) for g, v in vc.items()) / (nc * nr))
            else:
                sims.append(1.0 if cg == rg else 0.0)
        total += 10.0 * sum(sims) / len(sims)
    return total / N


def count_entities(scene_record):
    veh = sum(1 for e in scene_record["entities"] if e["kind"] in ("vehicle", "small-vehicle"))
    ped = sum(1 for e in scene_record["entities"] if e["kind"] == "pedestrian")
    return veh, ped


def bank_rows_by_enumeration(scene_records, qa_records):
    """Distinct (scene, event kind) pairs over referent-bearing questions, kinds read off the violation flags."""
    keys = set()
    for rec, per in zip(scene_records, qa_records):
        kinds = {e["id"]: e["kind"] for e in rec["entities"]}
        for q in per:
            ref = q["referent"]
            if ref is None:
                continue
            v = rec["violations"][str(ref)]
            if kinds[ref] == "pedestrian":
                if v["jaywalking"]:
                    keys.add((rec["id"], "jaywalking"))
            elif v["crosswalk"]:
                keys.add((rec["id"], "crosswalk-violation"))
            elif v["wrong_way"]:
                keys.add((rec["id"], "wrong-way"))
            else:
                keys.add((rec["id"], "lane-driving"))
    return sorted(keys)
