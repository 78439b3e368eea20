"""Hot inner loops, each with a numba ``@njit`` body and a pure-numpy twin.

The backend is picked once at import time; ``masked_tanh`` always runs the
numpy twin because it is the faster of the two. Set ``MOLGRAPH_UQ_NUMBA=0`` to force
the numpy path (also used automatically when numba is not importable). Both
paths agree to floating-point rounding; bit-identical reruns are only promised
within one backend.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False


def _env_wants_numba():
    flag = os.environ.get("MOLGRAPH_UQ_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off", "")


USE_NUMBA = HAVE_NUMBA and _env_wants_numba()
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------


def masked_tanh_numpy(scores, adj):
    """tanh(scores) on edges of ``adj`` and exact zeros elsewhere."""
    return np.where(adj != 0.0, np.tanh(scores), 0.0)


def masked_tanh_backward_numpy(grad_out, alpha, adj):
    return np.where(adj != 0.0, grad_out * (1.0 - alpha * alpha), 0.0)


def adam_update_numpy(param, grad, m, v, lr, beta1, beta2, eps, step):
    """In-place bias-corrected Adam update of ``param``, ``m`` and ``v``."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True)
    def _masked_tanh_nb(scores, adj, out):
        b_dim, n, k = scores.shape
        for b in range(b_dim):
            for i in range(n):
                for j in range(k):
                    if adj[b, i, j] != 0.0:
                        out[b, i, j] = np.tanh(scores[b, i, j])
                    else:
                        out[b, i, j] = 0.0

    @numba.njit(cache=True)
    def _masked_tanh_backward_nb(grad_out, alpha, adj, out):
        b_dim, n, k = grad_out.shape
        for b in range(b_dim):
            for i in range(n):
                for j in range(k):
                    if adj[b, i, j] != 0.0:
                        a = alpha[b, i, j]
                        out[b, i, j] = grad_out[b, i, j] * (1.0 - a * a)
                    else:
                        out[b, i, j] = 0.0

    @numba.njit(cache=True)
    def _adam_update_nb(param, grad, m, v, lr, beta1, beta2, eps, step):
        c1 = 1.0 - beta1**step
        c2 = 1.0 - beta2**step
        for i in range(param.size):
            g = grad[i]
            m[i] = beta1 * m[i] + (1.0 - beta1) * g
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
            param[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


def _as3d(x):
    return x if x.ndim == 3 else x[None]


def masked_tanh_numba(scores, adj):
    s3 = np.ascontiguousarray(_as3d(scores))
    a3 = np.ascontiguousarray(np.broadcast_to(_as3d(adj), s3.shape))
    out = np.empty_like(s3)
    _masked_tanh_nb(s3, a3, out)
    return out.reshape(scores.shape)


def masked_tanh_backward_numba(grad_out, alpha, adj):
    g3 = np.ascontiguousarray(_as3d(grad_out))
    al3 = np.ascontiguousarray(_as3d(alpha))
    a3 = np.ascontiguousarray(np.broadcast_to(_as3d(adj), g3.shape))
    out = np.empty_like(g3)
    _masked_tanh_backward_nb(g3, al3, a3, out)
    return out.reshape(grad_out.shape)


def adam_update_numba(param, grad, m, v, lr, beta1, beta2, eps, step):
    # flat views share memory, so the update lands in the caller's arrays
    _adam_update_nb(
        param.reshape(-1),
        np.ascontiguousarray(grad).reshape(-1),
        m.reshape(-1),
        v.reshape(-1),
        float(lr),
        float(beta1),
        float(beta2),
        float(eps),
        int(step),
    )


# numpy's vectorised tanh beats numba's scalar libm call by more than the
# skipped off-edge entries save, so the forward pass stays on numpy in both
# backends (see benchmarks/bench_kernels.py)
masked_tanh = masked_tanh_numpy

if USE_NUMBA:
    masked_tanh_backward = masked_tanh_backward_numba
    adam_update = adam_update_numba
else:
    masked_tanh_backward = masked_tanh_backward_numpy
    adam_update = adam_update_numpy
