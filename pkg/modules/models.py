import logging
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict

from modules.errors import TensorError
from modules.graph import ArmaConv, build_instance_graph
from modules.nn import BatchNorm, Conv1d, GlobalAvgPool1d, LayerCost, Linear, MaxPool1d, Module, ReLU
from modules.tensor import Tensor, as_tensor

logger = logging.getLogger("kavi.models")

INPUT_LENGTH = 1024
GRAPH_NODES = 128
FC1_WIDTH = 256
FC2_WIDTH = 128
FC4_WIDTH = 128


class TeacherOutput(NamedTuple):
    fc1: Tensor
    fc2: Tensor
    logits: Tensor


class StudentOutput(NamedTuple):
    fc4: Tensor
    logits: Tensor


class CostReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    parameter_count: int
    model_size_bytes: int
    model_size_bytes_f64: int
    flops: int

    @property
    def model_size_mb(self) -> float:
        return self.model_size_bytes / 2 ** 20


class _Head(Module):
    '''FC1 256 + ReLU, FC2 128 + ReLU, FC3 n_c.'''

    def __init__(self, in_features: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(in_features, FC1_WIDTH, rng)
        self.fc2 = Linear(FC1_WIDTH, FC2_WIDTH, rng)
        self.fc3 = Linear(FC2_WIDTH, n_classes, rng)

    def forward(self, h: Tensor) -> TeacherOutput:
        fc1 = self.fc1(h).relu()
        fc2 = self.fc2(fc1).relu()
        return TeacherOutput(fc1, fc2, self.fc3(fc2))

    def cost(self, in_shape) -> list[LayerCost]:
        costs = []
        for layer in (self.fc1, self.fc2, self.fc3):
            c = layer.cost(in_shape)
            costs.append(c)
            if layer is not self.fc3:
                costs.append(ReLU().cost(c.out_shape))
            in_shape = c.out_shape
        return costs


def _check_input(x, input_len: int) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != input_len:
        raise TensorError(f"expected a batch of {input_len}-point segments, got shape {x.shape}")
    if x.shape[0] < 1:
        raise TensorError("empty batch")
    return x


class TeacherModel(Module):
    '''Instance graph over the batch, three ARMA_K layers (each followed by BN and ReLU),
    then the FC1/FC2/FC3 head.'''
    kind = 'teacher'

    def __init__(self, n_classes: int, nodes: int = 128, input_len: int = INPUT_LENGTH,
                 rng: np.random.Generator | None = None, k: int = 2, stacks: int = 3):
        super().__init__()
        if n_classes < 2 or nodes < 1 or input_len < 1:
            raise TensorError(f"invalid teacher dimensions n_c={n_classes} nodes={nodes} input_len={input_len}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes = n_classes
        self.nodes = nodes
        self.input_len = input_len
        self.k = k
        self.arma = [ArmaConv(input_len, nodes, stacks, rng),
                     ArmaConv(nodes, nodes, stacks, rng),
                     ArmaConv(nodes, nodes, stacks, rng)]
        self.norms = [BatchNorm(nodes) for _ in range(3)]
        self.head = _Head(nodes, n_classes, rng)

    def forward(self, x) -> TeacherOutput:
        x = _check_input(x, self.input_len)
        # a single sample forms a one-node graph
        graph = build_instance_graph(x, min(self.k, x.shape[0]), on_zero_norm='isolate')
        h = x
        for conv, norm in zip(self.arma, self.norms):
            h = norm(conv(graph, h)).relu()
        return self.head(h)

    def cost(self, graph_nodes: int = GRAPH_NODES) -> list[LayerCost]:
        '''Per-sample costs; graph terms are totals over a batch of `graph_nodes`
        divided by the batch size.'''
        n = graph_nodes
        nnz = self.k * n
        costs = [LayerCost(0, (2 * n * n * self.input_len + 3 * n * self.input_len + n * n) // n, (self.input_len,))]
        in_shape = (self.input_len,)
        for conv, norm in zip(self.arma, self.norms):
            c = conv.cost(in_shape, nodes=n, nnz=nnz)
            costs.append(LayerCost(c.params, c.flops // n, c.out_shape))
            costs.append(norm.cost(c.out_shape))
            costs.append(ReLU().cost(c.out_shape))
            in_shape = c.out_shape
        return costs + self.head.cost(in_shape)


class CnnTeacher(Module):
    '''Convolutional Teacher backbone: three conv blocks (3/2/16, 3/2/32, 3/2/64) with BN
    and ReLU, global average pooling, then the FC1/FC2/FC3 head.'''
    kind = 'cnn_teacher'

    def __init__(self, n_classes: int, input_len: int = INPUT_LENGTH, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes = n_classes
        self.input_len = input_len
        self.convs = [Conv1d(1, 16, 3, 2, rng), Conv1d(16, 32, 3, 2, rng), Conv1d(32, 64, 3, 2, rng)]
        self.norms = [BatchNorm(16), BatchNorm(32), BatchNorm(64)]
        self.pool = GlobalAvgPool1d()
        self.head = _Head(64, n_classes, rng)

    def forward(self, x) -> TeacherOutput:
        x = _check_input(x, self.input_len)
        h = x.reshape(x.shape[0], 1, self.input_len)
        for conv, norm in zip(self.convs, self.norms):
            h = norm(conv(h)).relu()
        return self.head(self.pool(h))

    def cost(self, graph_nodes: int = GRAPH_NODES) -> list[LayerCost]:
        costs = []
        in_shape = (1, self.input_len)
        for conv, norm in zip(self.convs, self.norms):
            c = conv.cost(in_shape)
            costs += [c, norm.cost(c.out_shape), ReLU().cost(c.out_shape)]
            in_shape = c.out_shape
        pooled = self.pool.cost(in_shape)
        return costs + [pooled] + self.head.cost(pooled.out_shape)


class StudentModel(Module):
    '''Conv 3/2/16 + BN + ReLU + max-pool, conv 3/2/32 + BN + ReLU + GAP, FC4 128, FC5 n_c.'''
    kind = 'student'

    def __init__(self, n_classes: int, input_len: int = INPUT_LENGTH, rng: np.random.Generator | None = None):
        super().__init__()
        if n_classes < 2 or input_len < 8:
            raise TensorError(f"invalid student dimensions n_c={n_classes} input_len={input_len}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_classes = n_classes
        self.input_len = input_len
        self.conv1 = Conv1d(1, 16, 3, 2, rng)
        self.bn1 = BatchNorm(16)
        self.pool1 = MaxPool1d(2, 2)
        self.conv2 = Conv1d(16, 32, 3, 2, rng)
        self.bn2 = BatchNorm(32)
        self.pool2 = GlobalAvgPool1d()
        self.fc4 = Linear(32, FC4_WIDTH, rng)
        self.fc5 = Linear(FC4_WIDTH, n_classes, rng)

    def forward(self, x) -> StudentOutput:
        x = _check_input(x, self.input_len)
        h = x.reshape(x.shape[0], 1, self.input_len)
        h = self.pool1(self.bn1(self.conv1(h)).relu())
        h = self.pool2(self.bn2(self.conv2(h)).relu())
        fc4 = self.fc4(h).relu()
        return StudentOutput(fc4, self.fc5(fc4))

    def cost(self, graph_nodes: int = GRAPH_NODES) -> list[LayerCost]:
        costs = []
        shape = (1, self.input_len)
        for layer in (self.conv1, self.bn1, ReLU(), self.pool1, self.conv2, self.bn2, ReLU(),
                      self.pool2, self.fc4, ReLU(), self.fc5):
            c = layer.cost(shape)
            costs.append(c)
            shape = c.out_shape
        return costs


def build_teacher(n_classes: int, nodes: int = 128, input_len: int = INPUT_LENGTH,
                  seed: int = 0, k: int = 2, stacks: int = 3) -> TeacherModel:
    return TeacherModel(n_classes, nodes, input_len, np.random.default_rng(seed), k=k, stacks=stacks)


def build_cnn_teacher(n_classes: int, input_len: int = INPUT_LENGTH, seed: int = 0) -> CnnTeacher:
    return CnnTeacher(n_classes, input_len, np.random.default_rng(seed))


def build_student(n_classes: int, input_len: int = INPUT_LENGTH, seed: int = 0) -> StudentModel:
    # offset keeps Teacher and Student initializations independent under one run seed
    return StudentModel(n_classes, input_len, np.random.default_rng(seed + 10_007))


def cost_report(model: Module, input_len: int | None = None, graph_nodes: int = GRAPH_NODES,
                name: str | None = None) -> CostReport:
    '''Parameters, storage at 32- and 64-bit per weight, and per-sample FLOPs
    (2 per multiply-accumulate, 1 per element for BN and activations).'''
    if input_len is not None and input_len != model.input_len:
        raise TensorError(f"model was built for {model.input_len}-point input, not {input_len}")
    flops = sum(c.flops for c in model.cost(graph_nodes))
    params = model.num_parameters()
    label = name or (f"{model.kind}-{model.nodes}" if isinstance(model, TeacherModel) else model.kind)
    return CostReport(name=label, parameter_count=params, model_size_bytes=4 * params,
                      model_size_bytes_f64=8 * params, flops=int(flops))
