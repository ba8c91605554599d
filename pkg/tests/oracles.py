"""Independent reference implementations used by the tests."""

import numpy as np


def flood_fill_components(img: np.ndarray) -> np.ndarray:
    """4-connected flood fill with an explicit stack."""
    h, w = img.shape
    out = np.full((h, w), -1, dtype=np.int64)
    n = 0
    for sy in range(h):
        for sx in range(w):
            if out[sy, sx] != -1:
                continue
            val = img[sy, sx]
            stack = [(sy, sx)]
            while stack:
                y, x = stack.pop()
                if y < 0 or y >= h or x < 0 or x >= w or out[y, x] != -1 or img[y, x] != val:
                    continue
                out[y, x] = n
                stack += [(y + 1, x), (y - 1, x), (y, x + 1), (y, x - 1)]
            n += 1
    return out


def same_partition(a: np.ndarray, b: np.ndarray) -> bool:
    """True when two label images induce the same partition."""
    pairs = set(zip(a.ravel().tolist(), b.ravel().tolist()))
    return len(pairs) == len(np.unique(a)) == len(np.unique(b))


def naive_attention(q_tok, k_tok, v_tok, wq, bq, wk, bk, wv, bv, heads, key_count=None):
    """Scalar-loop multi-head attention for one sample; returns (out, probs)."""
    nq, nk = len(q_tok), (len(k_tok) if key_count is None else key_count)
    dim = wq.shape[1]
    dh = dim // heads
    q = [[sum(q_tok[i][c] * wq[c][j] for c in range(len(q_tok[i]))) + bq[j] for j in range(dim)] for i in range(nq)]
    k = [[sum(k_tok[i][c] * wk[c][j] for c in range(len(k_tok[i]))) + bk[j] for j in range(dim)] for i in range(nk)]
    v = [[sum(v_tok[i][c] * wv[c][j] for c in range(len(v_tok[i]))) + bv[j] for j in range(wv.shape[1])]
         for i in range(nk)]
    dv = wv.shape[1] // heads
    out = np.zeros((nq, wv.shape[1]))
    probs = np.zeros((heads, nq, nk))
    for h in range(heads):
        for i in range(nq):
            s = [sum(q[i][h * dh + d] * k[j][h * dh + d] for d in range(dh)) / np.sqrt(dh) for j in range(nk)]
            m = max(s)
            e = [np.exp(x - m) for x in s]
            z = sum(e)
            for j in range(nk):
                probs[h, i, j] = e[j] / z
                for d in range(dv):
                    out[i, h * dv + d] += probs[h, i, j] * v[j][h * dv + d]
    return out, probs


def probe_parameter_gradients(fn, params: dict, rng, n_tensors: int, n_entries: int, h: float = 1e-5) -> float:
    """Central differences on a random subset of parameter entries.

    Runs one backward pass, then compares ``p.grad`` at ``n_entries`` random
    entries of ``n_tensors`` random tensors with finite differences of the
    scalar ``fn()``. The relative error uses a floor of ``1e-3`` times the
    largest gradient of the tensor, so entries whose true gradient is tiny
    are judged against the tensor's own scale. Returns the worst error.
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    fn().backward()
    names = sorted(params)
    worst = 0.0
    for name in [names[i] for i in rng.choice(len(names), min(n_tensors, len(names)), replace=False)]:
        p = params[name]
        flat = p.data.reshape(-1)
        idx = rng.choice(flat.size, min(n_entries, flat.size), replace=False)
        ana, num = [], []
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(fn().data)
            flat[i] = orig - h
            fm = float(fn().data)
            flat[i] = orig
            num.append((fp - fm) / (2 * h))
            ana.append(p.grad.reshape(-1)[i])
        ana, num = np.array(ana), np.array(num)
        floor = max(1e-8, 1e-3 * float(np.abs(p.grad).max()))
        err = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), floor)
        worst = max(worst, float(err.max()))
    return worst
