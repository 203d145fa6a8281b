"""Independent reference computations used by the test-suite and the CLI.

Everything here is written with plain Python loops and ``math`` so that it
shares no code path with the vectorized implementation it checks.
"""

from __future__ import annotations

import math

import numpy as np

from .graph import neumann_propagate, propagation_matrix, symmetric_normalize


def _softplus(x):
    return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


def _sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def mlp_row(x, p):
    W1, b1, W2, b2 = (np.asarray(p[k]).tolist() for k in ("W1", "b1", "W2", "b2"))
    b1, b2 = np.ravel(b1).tolist(), np.ravel(b2).tolist()
    hidden = []
    for j in range(len(b1)):
        s = b1[j]
        for i in range(len(x)):
            s += x[i] * W1[i][j]
        hidden.append(_softplus(s))
    out = []
    for k in range(len(b2)):
        s = b2[k]
        for j in range(len(hidden)):
            s += hidden[j] * W2[j][k]
        out.append(s)
    return out


def _std_offdiag(M):
    n = len(M)
    vals = [M[i][j] for i in range(n) for j in range(n) if i != j]
    mu = sum(vals) / len(vals)
    sd = math.sqrt(sum((v - mu) ** 2 for v in vals) / len(vals))
    return 1.0 if sd < 1e-12 else sd


def _gauss_jordan_inverse(M):
    n = len(M)
    a = [list(map(float, row)) + [1.0 if i == j else 0.0 for j in range(n)]
         for i, row in enumerate(M)]
    for col in range(n):
        piv = max(range(col, n), key=lambda r: abs(a[r][col]))
        a[col], a[piv] = a[piv], a[col]
        pv = a[col][col]
        a[col] = [v / pv for v in a[col]]
        for r in range(n):
            if r != col:
                factor = a[r][col]
                a[r] = [v - factor * w for v, w in zip(a[r], a[col])]
    return [row[n:] for row in a]


def _matvec_rows(P, Z):
    n, c = len(Z), len(Z[0])
    return [[sum(P[i][j] * Z[j][k] for j in range(n)) for k in range(c)] for i in range(n)]


def scripted_forward(episode, named: dict, vp: bool, sp: bool, rg: bool,
                     alpha: float, mu: float, aux: str = "none") -> dict:
    """Step-by-step, one graph per query, reference forward pass."""
    comp = {c: ({k: named[f"{c}.{k}"] for k in ("W1", "b1", "W2", "b2")}
                if f"{c}.W1" in named else None) for c in "fghw"}
    Xs = episode.support_features.tolist()
    As = episode.support_attributes.tolist()
    Xq = episode.query_features.tolist()
    ys = episode.support_labels.tolist()
    yq = episode.reveal_query_labels().tolist()
    N, NK = episode.n_way, len(Xs)

    zv_s = [mlp_row(x, comp["f"]) for x in Xs]
    za_s = [mlp_row(a, comp["g"]) for a in As]
    c = len(zv_s[0])

    def transfer(r):
        return r if comp["h"] is None else mlp_row(r, comp["h"])

    probs, lam_s, lam_q = [], [], []
    for t, xq in enumerate(Xq):
        zv = zv_s + [mlp_row(xq, comp["f"])]
        za = za_s + [[0.0] * c]
        n = NK + 1
        if vp or sp:
            dist = [[0.0] * n for _ in range(n)]
            for i in range(n):
                for j in range(n):
                    r = [(zv[i][k] - zv[j][k]) ** 2 for k in range(c)]
                    if rg:
                        dist[i][j] = 0.0 if i == j else sum(abs(v) for v in transfer(r))
                    else:
                        dist[i][j] = sum(r)
            s2 = _std_offdiag(dist)
            A = [[0.0 if i == j else math.exp(-dist[i][j] / s2) for j in range(n)]
                 for i in range(n)]
            deg = [sum(row) for row in A]
            S = [[A[i][j] / math.sqrt(deg[i] * deg[j]) for j in range(n)] for i in range(n)]
            inv = _gauss_jordan_inverse(
                [[(1.0 if i == j else 0.0) - alpha * S[i][j] for j in range(n)]
                 for i in range(n)])
            P = [[(1 - alpha) * v for v in row] for row in inv]
            zv_t = _matvec_rows(P, zv) if vp else zv
            za_t = _matvec_rows(P, za) if sp else za
        else:
            zv_t, za_t = zv, za
        fused, lams = [], []
        for i in range(n):
            lam = _sigmoid(mlp_row(zv_t[i] + za_t[i], comp["w"])[0])
            lams.append(lam)
            fused.append([lam * a + (1 - lam) * b for a, b in zip(zv_t[i], za_t[i])])
        q = fused[NK] if sp else zv_t[NK]
        protos = []
        for cls in range(N):
            members = [fused[i] for i in range(NK) if ys[i] == cls]
            protos.append([sum(m[k] for m in members) / len(members) for k in range(c)])
        d = [math.sqrt(sum((q[k] - p[k]) ** 2 for k in range(c))) for p in protos]
        m = min(d)
        e = [math.exp(-(v - m)) for v in d]
        z = sum(e)
        probs.append([v / z for v in e])
        lam_s.append(lams[:NK])
        lam_q.append(lams[NK])

    l_cls = -sum(math.log(max(probs[t][yq[t]], 1e-12)) for t in range(len(Xq))) / len(Xq)

    def pair_mse(left, right):
        tot, cnt = 0.0, 0
        for i in range(NK):
            for j in range(NK):
                if i == j:
                    continue
                a, b = left(i, j), right(i, j)
                tot += sum((u - v) ** 2 for u, v in zip(a, b))
                cnt += len(a)
        return tot / cnt

    def rv(i, j):
        return [(zv_s[i][k] - zv_s[j][k]) ** 2 for k in range(c)]

    def ra(i, j):
        return [(za_s[i][k] - za_s[j][k]) ** 2 for k in range(c)]

    l_rg = pair_mse(lambda i, j: transfer(rv(i, j)), ra) if rg else 0.0
    if aux == "instance-constraint":
        l_aux = sum((zv_s[i][k] - za_s[i][k]) ** 2 for i in range(NK) for k in range(c)) / (NK * c)
    elif aux == "relation-constraint":
        l_aux = pair_mse(rv, ra)
    else:
        l_aux = 0.0
    total = l_cls + mu * l_rg + mu * l_aux
    return {
        "probs": np.array(probs),
        "lambda_support": np.array(lam_s),
        "lambda_query": np.array(lam_q) if sp else None,
        "losses": (l_cls, l_rg, l_aux, total),
    }


def neumann_gap(rng: np.random.Generator, graphs: int = 100, max_n: int = 20,
                alpha: float = 0.2, k: int = 64) -> float:
    """Max-abs gap between closed-form and truncated-series propagation."""
    worst = 0.0
    for _ in range(graphs):
        n = int(rng.integers(2, max_n + 1))
        c = int(rng.integers(1, 6))
        A = rng.random((n, n))
        A = (A + A.T) / 2
        np.fill_diagonal(A, 0.0)
        S = symmetric_normalize(A)
        Z = rng.standard_normal((n, c))
        closed = propagation_matrix(S, alpha) @ Z
        series = neumann_propagate(S, alpha, Z, k)
        worst = max(worst, float(np.abs(closed - series).max()))
    return worst
