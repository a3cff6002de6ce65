import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sparse

from modules.errors import ConvergenceError, GraphError
from modules.nn import LayerCost, Module, Parameter, kaiming_uniform
from modules.tensor import Tensor, as_tensor

logger = logging.getLogger("kavi.graph")

ORACLE_MAX_NODES = 256


@dataclass(frozen=True)
class InstanceGraph:
    '''Per-minibatch graph. `topk` holds the row-wise Top-K similarities (exactly k
    stored entries per row, explicit zeros kept); `adjacency` is its nonnegative
    symmetrization, from which the normalized Laplacian is built.'''
    node_features: Tensor | None
    neighbors: np.ndarray
    topk: sparse.csr_matrix
    adjacency: sparse.csr_matrix
    sym_laplacian: np.ndarray
    k: int

    @property
    def n(self) -> int:
        return self.sym_laplacian.shape[0]

    @property
    def propagation(self) -> np.ndarray:
        '''F~ = I - L^sym, the shift operator under lambda_max=2, lambda_min=0.'''
        return np.eye(self.n) - self.sym_laplacian

    def eigenvalues(self) -> np.ndarray:
        return scipy.linalg.eigvalsh(self.sym_laplacian)

    @classmethod
    def from_adjacency(cls, adjacency: np.ndarray, node_features: Tensor | None = None) -> "InstanceGraph":
        adjacency = np.asarray(adjacency, dtype=np.float64)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise GraphError(f"adjacency must be square, got {adjacency.shape}")
        if (adjacency < 0).any():
            raise GraphError("adjacency weights must be nonnegative")
        support = sparse.csr_matrix(adjacency)
        k = int(support.getnnz(axis=1).max()) if support.nnz else 0
        neighbors = np.argsort(-adjacency, axis=1, kind='stable')[:, :max(k, 1)]
        symmetric = support.maximum(support.T).tocsr()
        return cls(node_features, neighbors, support, symmetric, _sym_laplacian(symmetric), k)


def _sym_laplacian(adjacency: sparse.csr_matrix) -> np.ndarray:
    n = adjacency.shape[0]
    degree = np.asarray(adjacency.sum(axis=1)).reshape(-1)
    inv_sqrt = np.zeros(n)
    inv_sqrt[degree > 0] = 1.0 / np.sqrt(degree[degree > 0])
    dense = adjacency.toarray()
    lap = np.eye(n) - inv_sqrt[:, None] * dense * inv_sqrt[None, :]
    # isolated nodes without a self-loop keep L_ii = 1, F_ii = 0
    return (lap + lap.T) / 2.0


def cosine_similarity(x: np.ndarray, on_zero_norm: str = 'raise') -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    zero = norms == 0
    if zero.any() and on_zero_norm == 'raise':
        raise GraphError(f"{int(zero.sum())} zero-norm feature row(s); cosine normalization undefined")
    unit = x / np.where(zero, 1.0, norms)[:, None]
    sim = np.clip(unit @ unit.T, -1.0, 1.0)
    # zero rows become isolated nodes that only see themselves
    sim[zero, :] = 0.0
    sim[:, zero] = 0.0
    np.fill_diagonal(sim, 1.0)
    return sim


def build_instance_graph(features, k: int = 2, on_zero_norm: str = 'raise') -> InstanceGraph:
    '''Graph generation: cosine similarities of the feature rows, Top-k per row
    (self-similarity included, ties broken toward the lowest column index).'''
    x = as_tensor(features).data
    if x.ndim != 2:
        raise GraphError(f"features must be N x d, got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= k <= n:
        raise GraphError(f"need 1 <= k <= N, got k={k} N={n}")
    if not np.isfinite(x).all():
        raise GraphError("features contain non-finite values")

    sim = cosine_similarity(x, on_zero_norm)
    neighbors = np.argsort(-sim, axis=1, kind='stable')[:, :k]
    rows = np.repeat(np.arange(n), k)
    weights = np.take_along_axis(sim, neighbors, axis=1)
    topk = sparse.csr_matrix((weights.reshape(-1), (rows, neighbors.reshape(-1))), shape=(n, n))
    topk.sort_indices()

    # negative similarities carry no edge weight; the support stays Top-k
    positive = topk.copy()
    positive.data = np.maximum(positive.data, 0.0)
    symmetric = positive.maximum(positive.T).tocsr()
    node_features = features if isinstance(features, Tensor) else Tensor(x)
    return InstanceGraph(node_features, neighbors, topk, symmetric, _sym_laplacian(symmetric), k)


def dump_graph(graph: InstanceGraph) -> str:
    '''Plain-text dump: N, K, row-major Top-K triplets, Laplacian eigenvalues.'''
    def fmt(v):
        return f"{round(float(v), 10) + 0.0:.10f}"

    lines = [f"N {graph.n}", f"K {graph.k}", "# i j weight"]
    coo = graph.topk.tocoo()
    for i, j, w in sorted(zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())):
        lines.append(f"{i} {j} {fmt(w)}")
    lines.append("# eigenvalues")
    lines.extend(fmt(v) for v in graph.eigenvalues())
    return "\n".join(lines) + "\n"


def arma_response(ps, qs, lambda_max: float = 2.0, lambda_min: float = 0.0) -> Callable[[np.ndarray], np.ndarray]:
    '''h(lambda) = sum_k q_k / (1 - p_k * gamma) with gamma = (lambda_max - lambda_min)/2 - lambda.'''
    ps = np.atleast_1d(np.asarray(ps, dtype=np.float64))
    qs = np.atleast_1d(np.asarray(qs, dtype=np.float64))

    def response(lam):
        gamma = 0.5 * (lambda_max - lambda_min) - np.asarray(lam, dtype=np.float64)
        return sum(q / (1.0 - p * gamma) for p, q in zip(ps, qs))
    return response


def spectral_filter_oracle(graph: InstanceGraph, response: Callable, signal) -> Tensor:
    '''Exact filtering U diag(h(lambda)) U^T X through a dense eigendecomposition.'''
    if graph.n > ORACLE_MAX_NODES:
        raise GraphError(f"oracle limited to {ORACLE_MAX_NODES} nodes, got {graph.n}")
    lap = graph.sym_laplacian
    if not np.allclose(lap, lap.T, atol=1e-10, rtol=0):
        raise GraphError("Laplacian is not symmetric")
    try:
        lam, u = scipy.linalg.eigh(lap)
    except scipy.linalg.LinAlgError as e:
        raise GraphError(f"eigendecomposition failed: {e}") from e
    h = np.asarray(response(lam), dtype=np.float64)
    if h.shape != lam.shape:
        h = np.array([response(v) for v in lam], dtype=np.float64)
    x = as_tensor(signal).data
    flat = x.reshape(graph.n, -1)
    out = u @ (h[:, None] * (u.T @ flat))
    return Tensor(out.reshape(x.shape))


def shift_operator(graph: InstanceGraph, lambda_max: float = 2.0, lambda_min: float = 0.0) -> np.ndarray:
    return 0.5 * (lambda_max - lambda_min) * np.eye(graph.n) - graph.sym_laplacian


def arma1_step(x_bar, x0, F, p: float, q: float) -> Tensor:
    '''One recursion step: p * F @ x_bar + q * x0.'''
    x_bar, x0, F = as_tensor(x_bar), as_tensor(x0), as_tensor(F)
    if F.ndim != 2 or F.shape[1] != x_bar.shape[0] or x_bar.shape != x0.shape:
        raise GraphError(f"shape mismatch: F {F.shape}, x_bar {x_bar.shape}, x0 {x0.shape}")
    return (F @ _as_matrix(x_bar)).reshape(x_bar.shape) * p + x0 * q


def _as_matrix(t: Tensor) -> Tensor:
    return t.reshape(t.shape[0], 1) if t.ndim == 1 else t


def arma1_fixed_point(graph: InstanceGraph, x0, p: float, q: float, max_iter: int = 1000,
                      tol: float = 1e-12, lambda_max: float = 2.0, lambda_min: float = 0.0) -> Tensor:
    '''Iterate the ARMA_1 recursion from zero until successive iterates differ by <= tol.'''
    F = shift_operator(graph, lambda_max, lambda_min)
    radius = abs(p) * np.abs(scipy.linalg.eigvalsh(F)).max()
    if radius >= 1.0:
        raise ConvergenceError(f"|p| * max|gamma| = {radius:.6f} >= 1; recursion does not converge")
    x0 = as_tensor(x0).data
    if p == 0:
        return Tensor(q * x0)
    flat_x0 = x0.reshape(graph.n, -1)
    x = np.zeros_like(flat_x0)
    for it in range(max_iter):
        nxt = p * (F @ x) + q * flat_x0
        if np.abs(nxt - x).max() <= tol:
            logger.debug("ARMA_1 converged after %d iterations", it + 1)
            return Tensor(nxt.reshape(x0.shape))
        x = nxt
    raise ConvergenceError(f"no convergence within {max_iter} iterations (tol={tol})")


@dataclass
class ArmaLayerParams:
    '''Either a trainable stack (W, V) or a fixed-coefficient stack (p, q).'''
    W: Tensor | None = None
    V: Tensor | None = None
    p: float | None = None
    q: float | None = None

    def __post_init__(self):
        if self.is_fixed:
            return
        if self.W is None or self.V is None:
            raise GraphError("a stack needs either (W, V) or (p, q)")
        if self.W.shape != self.V.shape:
            raise GraphError(f"W {self.W.shape} and V {self.V.shape} must agree")

    @property
    def is_fixed(self) -> bool:
        return self.p is not None and self.q is not None


def arma_layer_forward(graph: InstanceGraph, features: Tensor, params: ArmaLayerParams) -> Tensor:
    '''ReLU(F~ X W + X V): one trainable recursion step with the layer input as skip term.'''
    features = as_tensor(features)
    if features.shape[0] != graph.n or features.shape[1] != params.W.shape[0]:
        raise GraphError(f"features {features.shape} do not fit graph of {graph.n} nodes and W {params.W.shape}")
    propagated = Tensor(graph.propagation) @ features
    return (propagated @ params.W + features @ params.V).relu()


def armaK_forward(graph: InstanceGraph, features, stacks: list[ArmaLayerParams], K: int | None = None) -> Tensor:
    '''Sum of K parallel ARMA_1 stacks.'''
    if not stacks:
        raise GraphError("empty stack list")
    if K is not None and K != len(stacks):
        raise GraphError(f"K={K} but {len(stacks)} stacks given")
    out = None
    for stack in stacks:
        if stack.is_fixed:
            y = arma1_fixed_point(graph, features, stack.p, stack.q)
        else:
            y = arma_layer_forward(graph, features, stack)
        out = y if out is None else out + y
    return out


class ArmaConv(Module):
    '''ARMA_K graph convolution with K trainable stacks applied once each.'''

    def __init__(self, in_features: int, out_features: int, stacks: int, rng: np.random.Generator):
        super().__init__()
        if stacks < 1:
            raise GraphError(f"stack count must be positive, got {stacks}")
        self.weights = [Parameter(kaiming_uniform((in_features, out_features), in_features, rng))
                        for _ in range(stacks)]
        self.roots = [Parameter(kaiming_uniform((in_features, out_features), in_features, rng))
                      for _ in range(stacks)]

    @property
    def stacks(self) -> list[ArmaLayerParams]:
        return [ArmaLayerParams(W=w, V=v) for w, v in zip(self.weights, self.roots)]

    def forward(self, graph: InstanceGraph, x: Tensor) -> Tensor:
        return armaK_forward(graph, x, self.stacks, K=len(self.weights))

    def cost(self, in_shape, nodes: int = 1, nnz: int = 0) -> LayerCost:
        '''Totals for a graph of `nodes` nodes with `nnz` adjacency entries.'''
        d_in, d_out = self.weights[0].shape
        per_stack = 2 * nnz * d_in + 2 * 2 * nodes * d_in * d_out + 2 * nodes * d_out
        flops = len(self.weights) * per_stack + (len(self.weights) - 1) * nodes * d_out
        params = sum(w.size + v.size for w, v in zip(self.weights, self.roots))
        return LayerCost(params, flops, (d_out,))
