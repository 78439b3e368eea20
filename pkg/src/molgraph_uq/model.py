"""Augmented graph convolutional network with Concrete dropout.

Architecture: linear input projection (28 -> 32), three layers of
4-head tanh-attention convolution followed by a gated skip and Concrete dropout,
a sum readout through a 256-wide MLP, and a two-layer head. Every function here
works on a single padded graph ``(n, f)`` or on a batch ``(b, n, f)``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointFormatError, ShapeError
from .graph import F_INP

K_HEADS = 4
F_HIDDEN = 32
D_GRAPH = 256
D_HEAD = 256
N_LAYERS = 3
TEMPERATURE = 0.1
P0_RANGE = (0.05, 0.1)
NOISE_EPS = 1e-7

CKPT_MAGIC = "molgraph-uq-ckpt v1"
TASKS = ("regression", "classification")


@dataclass
class LayerParams:
    W: list  # K tensors (F, F)
    C: list  # K tensors (F, F)
    W_O: T.Tensor  # (K F, F)
    U_r1: T.Tensor
    U_r2: T.Tensor
    b_r: T.Tensor  # (1, F)
    rho: T.Tensor  # (1, 1)

    def named(self, prefix):
        out = [(f"{prefix}.W_{k}", w) for k, w in enumerate(self.W)]
        out += [(f"{prefix}.C_{k}", c) for k, c in enumerate(self.C)]
        out += [
            (f"{prefix}.W_O", self.W_O),
            (f"{prefix}.U_r1", self.U_r1),
            (f"{prefix}.U_r2", self.U_r2),
            (f"{prefix}.b_r", self.b_r),
            (f"{prefix}.rho", self.rho),
        ]
        return out


@dataclass
class ModelParams:
    task: str
    W_in: T.Tensor
    layers: list
    readout_W: T.Tensor
    readout_b: T.Tensor
    readout_rho: T.Tensor
    head_W1: T.Tensor
    head_b1: T.Tensor
    head_rho: T.Tensor
    head_W2: T.Tensor
    head_b2: T.Tensor
    extra: dict = field(default_factory=dict)

    def named(self):
        out = [("W_in", self.W_in)]
        for l, layer in enumerate(self.layers):
            out += layer.named(f"layer{l}")
        out += [
            ("readout.W", self.readout_W),
            ("readout.b", self.readout_b),
            ("readout.rho", self.readout_rho),
            ("head.W1", self.head_W1),
            ("head.b1", self.head_b1),
            ("head.rho", self.head_rho),
            ("head.W2", self.head_W2),
            ("head.b2", self.head_b2),
        ]
        return out

    def tensors(self):
        return [t for _, t in self.named()]

    def rhos(self):
        return [t for name, t in self.named() if name.endswith("rho")]

    def dropout_probs(self):
        return [float(1.0 / (1.0 + np.exp(-r.item()))) for r in self.rhos()]

    def copy(self):
        return params_from_named(self.task, [(n, t.copy()) for n, t in self.named()])

    def dropout_sites(self):
        """``(rho, weights, k_in)`` per dropout: weights that consume the dropped features."""
        sites = []
        for l in range(N_LAYERS - 1):
            nxt = self.layers[l + 1]
            sites.append((self.layers[l].rho, list(nxt.W) + [nxt.U_r1], F_HIDDEN))
        sites.append((self.layers[-1].rho, [self.readout_W], F_HIDDEN))
        sites.append((self.readout_rho, [self.head_W1], D_GRAPH))
        sites.append((self.head_rho, [self.head_W2], D_HEAD))
        return sites


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _rho(rng):
    p0 = rng.uniform(*P0_RANGE)
    return np.array([[np.log(p0) - np.log1p(-p0)]])


def init_params(task, rng):
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")

    def p(value, name):
        return T.Tensor(value, requires_grad=True, name=name)

    F = F_HIDDEN
    layers = []
    for l in range(N_LAYERS):
        pre = f"layer{l}"
        layers.append(
            LayerParams(
                W=[p(_glorot(rng, F, F), f"{pre}.W_{k}") for k in range(K_HEADS)],
                C=[p(_glorot(rng, F, F), f"{pre}.C_{k}") for k in range(K_HEADS)],
                W_O=p(_glorot(rng, K_HEADS * F, F), f"{pre}.W_O"),
                U_r1=p(_glorot(rng, F, F), f"{pre}.U_r1"),
                U_r2=p(_glorot(rng, F, F), f"{pre}.U_r2"),
                b_r=p(np.zeros((1, F)), f"{pre}.b_r"),
                rho=p(_rho(rng), f"{pre}.rho"),
            )
        )
    W_in = p(_glorot(rng, F_INP, F), "W_in")
    readout_W = p(_glorot(rng, F, D_GRAPH), "readout.W")
    head_W1 = p(_glorot(rng, D_GRAPH, D_HEAD), "head.W1")
    W2 = _glorot(rng, D_HEAD, 2)
    if task == "regression":
        W2[:, 1] = 0.0  # log-variance starts at exactly 0
    return ModelParams(
        task=task,
        W_in=W_in,
        layers=layers,
        readout_W=readout_W,
        readout_b=p(np.zeros((1, D_GRAPH)), "readout.b"),
        readout_rho=p(_rho(rng), "readout.rho"),
        head_W1=head_W1,
        head_b1=p(np.zeros((1, D_HEAD)), "head.b1"),
        head_rho=p(_rho(rng), "head.rho"),
        head_W2=p(W2, "head.W2"),
        head_b2=p(np.zeros((1, 2)), "head.b2"),
    )


def params_from_named(task, named):
    d = dict(named)
    try:
        layers = []
        for l in range(N_LAYERS):
            pre = f"layer{l}"
            layers.append(
                LayerParams(
                    W=[d[f"{pre}.W_{k}"] for k in range(K_HEADS)],
                    C=[d[f"{pre}.C_{k}"] for k in range(K_HEADS)],
                    W_O=d[f"{pre}.W_O"],
                    U_r1=d[f"{pre}.U_r1"],
                    U_r2=d[f"{pre}.U_r2"],
                    b_r=d[f"{pre}.b_r"],
                    rho=d[f"{pre}.rho"],
                )
            )
        return ModelParams(
            task=task,
            W_in=d["W_in"],
            layers=layers,
            readout_W=d["readout.W"],
            readout_b=d["readout.b"],
            readout_rho=d["readout.rho"],
            head_W1=d["head.W1"],
            head_b1=d["head.b1"],
            head_rho=d["head.rho"],
            head_W2=d["head.W2"],
            head_b2=d["head.b2"],
        )
    except KeyError as exc:
        raise CheckpointFormatError(f"missing tensor {exc.args[0]!r}") from None


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


@dataclass
class GraphBatch:
    """Stacked graphs trimmed to the largest real atom count in the batch."""

    X: np.ndarray  # (b, n, F_INP)
    A: np.ndarray  # (b, n, n)
    mask: np.ndarray  # (b, n)

    @property
    def size(self):
        return self.X.shape[0]

    @classmethod
    def from_compact(cls, items):
        """``items``: sequence of ``(X_n, A_n)`` arrays cut to each graph's atom count."""
        n = max(1, max(x.shape[0] for x, _ in items))
        b = len(items)
        X = np.zeros((b, n, F_INP))
        A = np.zeros((b, n, n))
        mask = np.zeros((b, n))
        for i, (x, a) in enumerate(items):
            m = x.shape[0]
            X[i, :m] = x
            A[i, :m, :m] = a
            mask[i, :m] = 1.0
        return cls(X, A, mask)

    @classmethod
    def from_graphs(cls, gts):
        return cls.from_compact([compact(gt) for gt in gts])

    def repeat(self, times):
        """Each graph repeated ``times`` consecutively (for Monte-Carlo sampling)."""
        return GraphBatch(
            np.repeat(self.X, times, axis=0),
            np.repeat(self.A, times, axis=0),
            np.repeat(self.mask, times, axis=0),
        )


def compact(gt):
    n = gt.n_atoms
    return gt.X[:n].copy(), gt.A[:n, :n].copy()


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


def _lead(t):
    return t.shape[:-2]


def add_bias(h, b):
    """``h + b`` with the (1, c) row ``b`` expanded explicitly over rows and batch."""
    lead = _lead(h)
    return T.add(h, T.expand_rows(b, h.rows, batch=lead[0] if lead else None))


def gcn_plain(H, W, A, mask=None):
    """Plain graph convolution ReLU(A H W) with padded rows zeroed.

    Without ``mask`` the real nodes are read off the self-loops of ``A``.
    """
    A = np.asarray(A, dtype=np.float64)
    if mask is None:
        mask = np.diagonal(A, axis1=-2, axis2=-1)
    mask = np.asarray(mask, dtype=np.float64)
    if A.shape[-1] != H.rows or W.rows != H.cols:
        raise ShapeError(f"gcn_plain: H {H.shape}, W {W.shape}, A {A.shape}")
    out = T.relu(T.matmul(T.Tensor(A), T.matmul(H, W)))
    return T.hadamard(out, T.Tensor(np.broadcast_to(mask[..., None], out.shape)))


def attention_coefficients(H, W_k, C_k, A):
    """tanh((H_i W_k) C_k (H_j W_k)^T) on edges of ``A``, zero elsewhere."""
    P = T.matmul(H, W_k)
    return _alpha(P, C_k, A)


def _alpha(P, C_k, A):
    if A.shape[-1] != P.rows:
        raise ShapeError(f"attention: adjacency {A.shape} vs features {P.shape}")
    scores = T.matmul(T.matmul(P, C_k), T.transpose(P))
    return T.masked_tanh(scores, A)


def gcn_attention(H, layer, A, mask, alpha_override=None):
    """K-head tanh-attention convolution projected back to F columns by W_O.

    ``alpha_override`` (constant array) replaces the learned coefficients;
    used to check the reduction to the plain convolution.
    """
    A = np.asarray(A, dtype=np.float64)
    F = layer.W[0].cols
    if H.cols != layer.W[0].rows:
        raise ShapeError(f"gcn_attention: H {H.shape} vs W_k {layer.W[0].shape}")
    W_cat = T.concat_cols(layer.W) if len(layer.W) > 1 else layer.W[0]
    P_all = T.matmul(H, W_cat)
    heads = []
    for k in range(len(layer.W)):
        P = T.cols(P_all, k * F, (k + 1) * F) if len(layer.W) > 1 else P_all
        if alpha_override is not None:
            alpha = T.Tensor(alpha_override)
        else:
            alpha = _alpha(P, layer.C[k], A)
        heads.append(T.relu(T.matmul(alpha, P)))
    M = T.concat_cols(heads) if len(heads) > 1 else heads[0]
    return T.matmul(M, layer.W_O)


def gate(H_prev, H_tilde, layer):
    if H_prev.shape != H_tilde.shape:
        raise ShapeError(f"gated_skip: shapes {H_prev.shape} and {H_tilde.shape} differ")
    pre = T.add(T.matmul(H_prev, layer.U_r1), T.matmul(H_tilde, layer.U_r2))
    return T.sigmoid(add_bias(pre, layer.b_r))


def gated_skip(H_prev, H_tilde, layer):
    """r * H_tilde + (1 - r) * H_prev with r = sigmoid(H_prev U1 + H_tilde U2 + b)."""
    r = gate(H_prev, H_tilde, layer)
    keep = T.sub(T.Tensor(1.0), r)
    return T.add(T.hadamard(r, H_tilde), T.hadamard(keep, H_prev))


def draw_uniform(rng, shape):
    return np.clip(rng.random(shape), NOISE_EPS, 1.0 - NOISE_EPS)


def concrete_dropout(H, rho, temperature=TEMPERATURE, rng=None, u=None):
    """Relaxed-Bernoulli dropout of whole feature columns, differentiable in ``rho``.

    One uniform draw per (graph, column), shared by every row of the graph.
    Kept features are rescaled by 1 / (1 - p), p = sigmoid(rho).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    lead = _lead(H)
    if u is None:
        u = draw_uniform(rng, lead + (1, H.cols))
    noise = T.Tensor(np.log(u) - np.log1p(-u))
    drop = T.sigmoid(T.scale(T.add(rho, noise), 1.0 / temperature))
    z = T.sub(T.Tensor(1.0), drop)
    inv_keep = T.add(T.Tensor(1.0), T.exp(rho))  # 1 / (1 - sigmoid(rho))
    mult = T.hadamard(z, inv_keep)
    return T.hadamard(H, T.expand_rows(mult, H.rows))


def mlp_layer(h, W, b, activation=True):
    out = add_bias(T.matmul(h, W), b)
    return T.relu(out) if activation else out


def readout(H, mask, W, b):
    """Sum over real nodes of ReLU(H_v W + b)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != H.shape[:-1]:
        raise ShapeError(f"readout: mask {mask.shape} vs node features {H.shape}")
    return T.sum_rows_masked(mlp_layer(H, W, b), mask)


def forward(graph, params, mode="stochastic", rng=None, temperature=TEMPERATURE):
    """Network output: ``(.., 1, 2)`` = [y_hat, log variance] or two class logits.

    ``graph`` is a :class:`~molgraph_uq.graph.GraphTensor` (output ``(1, 2)``)
    or a :class:`GraphBatch` (output ``(b, 1, 2)``). ``mode="deterministic"``
    skips dropout entirely.
    """
    if mode not in ("stochastic", "deterministic"):
        raise ValueError(f"unknown mode {mode!r}")
    stochastic = mode == "stochastic"
    if stochastic and rng is None:
        raise ValueError("stochastic mode needs an rng")
    X, A, mask = graph.X, graph.A, graph.mask

    def drop(h, rho):
        return concrete_dropout(h, rho, temperature, rng) if stochastic else h

    H = T.matmul(T.Tensor(X), params.W_in)
    for layer in params.layers:
        H_tilde = gcn_attention(H, layer, A, mask)
        H = drop(gated_skip(H, H_tilde, layer), layer.rho)
    z = drop(readout(H, mask, params.readout_W, params.readout_b), params.readout_rho)
    h = drop(mlp_layer(z, params.head_W1, params.head_b1), params.head_rho)
    return mlp_layer(h, params.head_W2, params.head_b2, activation=False)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def format_checkpoint(params):
    lines = [f"{CKPT_MAGIC} task={params.task}"]
    for name, t in params.named():
        v = t.value
        lines.append(f"{name} {v.shape[0]} {v.shape[1]}")
        for row in v:
            lines.append(" ".join(repr(float(x)) for x in row))
    return "\n".join(lines) + "\n"


def save_checkpoint(path, params):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_checkpoint(params))


def parse_checkpoint(text):
    lines = text.splitlines()
    if not lines or not lines[0].startswith(CKPT_MAGIC + " task="):
        raise CheckpointFormatError("missing 'molgraph-uq-ckpt v1' header")
    task = lines[0].split("task=", 1)[1].strip()
    if task not in TASKS:
        raise CheckpointFormatError(f"unknown task {task!r}")
    named = []
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        head = lines[i].split()
        if len(head) != 3:
            raise CheckpointFormatError(f"line {i + 1}: expected 'name rows cols'")
        name, rows, cols = head[0], int(head[1]), int(head[2])
        body = lines[i + 1 : i + 1 + rows]
        if len(body) != rows:
            raise CheckpointFormatError(f"tensor {name}: truncated")
        try:
            values = np.array([[float(x) for x in row.split()] for row in body])
        except ValueError:
            raise CheckpointFormatError(f"tensor {name}: bad number") from None
        if values.shape != (rows, cols):
            raise CheckpointFormatError(f"tensor {name}: expected {rows}x{cols}, got {values.shape}")
        named.append((name, T.Tensor(values, requires_grad=True, name=name)))
        i += 1 + rows
    return params_from_named(task, named)


def load_checkpoint(path):
    with open(path, encoding="utf-8") as fh:
        return parse_checkpoint(fh.read())
