"""Pure-numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, or when
``IMAGEOME_BACKEND=python`` is set. Signatures match the extension exactly.
"""
import numpy as np


def conv2d_forward(x, w):
    """Stride-1 'same' convolution, NHWC input, [k, k, C_in, C_out] kernel."""
    n, h, wd, cin = x.shape
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    out = np.zeros((n, h, wd, w.shape[3]), dtype=np.float64)
    for dy in range(k):
        for dx in range(k):
            out += xp[:, dy:dy + h, dx:dx + wd, :] @ w[dy, dx]
    return out


def conv2d_backward(x, w, gy):
    """Gradients of ``conv2d_forward`` w.r.t. input and kernel."""
    n, h, wd, cin = x.shape
    k = w.shape[0]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    g2 = gy.reshape(-1, gy.shape[3])
    for dy in range(k):
        for dx in range(k):
            patch = xp[:, dy:dy + h, dx:dx + wd, :]
            gw[dy, dx] = patch.reshape(-1, cin).T @ g2
            gxp[:, dy:dy + h, dx:dx + wd, :] += gy @ w[dy, dx].T
    gx = gxp[:, p:p + h, p:p + wd, :]
    return np.ascontiguousarray(gx), gw


def nearest_codes(z, codes):
    """Index of the nearest code row (squared L2) for every row of ``z``.

    Ties resolve to the lowest index.
    """
    m = z.shape[0]
    idx = np.empty(m, dtype=np.int64)
    best = np.empty(m, dtype=np.float64)
    # chunked to bound the [m, n_q, d] temporary
    step = max(1, 65536 // max(1, codes.shape[0] * codes.shape[1]))
    for s in range(0, m, step):
        diff = z[s:s + step, None, :] - codes[None, :, :]
        d2 = np.einsum("mqd,mqd->mq", diff, diff)
        idx[s:s + step] = np.argmin(d2, axis=1)
        best[s:s + step] = d2[np.arange(d2.shape[0]), idx[s:s + step]]
    return idx, best
