"""Graph assembly on top of the uap ONNX codec.

A GraphBuilder accumulates nodes and initializers while an architecture
walker traverses a torch module in eval mode. Values get sequential names
under caller-chosen tags so repeated sub-structures (inception branches,
encoder blocks) stay readable in the serialized file.

Everything is emitted against opset 13: LayerNorm is decomposed into
ReduceMean/Sub/Mul/Sqrt/Div primitives rather than relying on the
LayerNormalization op that only exists from opset 17 on, and GELU is spelled
out through Erf.
"""

from __future__ import annotations

import math

import numpy as np

from uap.onnx_model import Attribute, Graph, Node, ValueInfo


def _pair(value) -> tuple[int, int]:
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def _attr(name: str, value) -> Attribute:
    if isinstance(value, bool):
        return Attribute.i(name, int(value))
    if isinstance(value, int):
        return Attribute.i(name, value)
    if isinstance(value, float):
        return Attribute.f(name, value)
    if isinstance(value, str):
        return Attribute.s(name, value)
    if isinstance(value, np.ndarray):
        return Attribute.t(name, value)
    if isinstance(value, (list, tuple)):
        if all(isinstance(v, int) for v in value):
            return Attribute.ints(name, value)
        return Attribute.floats(name, value)
    raise TypeError(f"no attribute encoding for {name}={value!r}")


class GraphBuilder:
    """Collects nodes/initializers and finalizes into a single-input graph."""

    def __init__(self, name: str):
        self.graph = Graph(name=name)
        self._counter = 0

    # -- plumbing -----------------------------------------------------------

    def fresh(self, tag: str) -> str:
        self._counter += 1
        return f"{tag}.{self._counter}"

    def node(self, op_type: str, inputs: list[str], tag: str, out: str | None = None, **attrs) -> str:
        name = out if out is not None else self.fresh(tag)
        self.graph.nodes.append(
            Node(
                op_type=op_type,
                inputs=list(inputs),
                outputs=[name],
                name=name,
                attributes={k: _attr(k, v) for k, v in attrs.items()},
            )
        )
        return name

    def init(self, tag: str, array: np.ndarray) -> str:
        name = self.fresh(tag)
        self.graph.initializers[name] = np.ascontiguousarray(array)
        return name

    def tensor(self, tag: str, t) -> str:
        """Register a torch tensor (weights stay float32)."""
        return self.init(tag, t.detach().cpu().numpy())

    def floats(self, tag: str, values) -> str:
        return self.init(tag, np.asarray(values, dtype=np.float32))

    def int64s(self, tag: str, values) -> str:
        return self.init(tag, np.asarray(values, dtype=np.int64))

    def finish(self, input_name: str, input_shape: tuple, output_name: str, output_shape: tuple) -> Graph:
        self.graph.inputs = [ValueInfo(input_name, shape=input_shape)]
        self.graph.outputs = [ValueInfo(output_name, shape=output_shape)]
        return self.graph

    # -- torch module wrappers ---------------------------------------------

    def conv(self, x: str, mod, tag: str) -> str:
        inputs = [x, self.tensor(f"{tag}.w", mod.weight)]
        if mod.bias is not None:
            inputs.append(self.tensor(f"{tag}.b", mod.bias))
        ph, pw = _pair(mod.padding)
        return self.node(
            "Conv",
            inputs,
            tag,
            strides=list(_pair(mod.stride)),
            pads=[ph, pw, ph, pw],
            dilations=list(_pair(mod.dilation)),
            group=int(mod.groups),
        )

    def batch_norm(self, x: str, mod, tag: str) -> str:
        inputs = [
            x,
            self.tensor(f"{tag}.scale", mod.weight),
            self.tensor(f"{tag}.bias", mod.bias),
            self.tensor(f"{tag}.mean", mod.running_mean),
            self.tensor(f"{tag}.var", mod.running_var),
        ]
        return self.node("BatchNormalization", inputs, tag, epsilon=float(mod.eps))

    def max_pool(self, x: str, mod, tag: str) -> str:
        ph, pw = _pair(mod.padding)
        return self.node(
            "MaxPool",
            [x],
            tag,
            kernel_shape=list(_pair(mod.kernel_size)),
            strides=list(_pair(mod.stride)),
            pads=[ph, pw, ph, pw],
            ceil_mode=int(bool(mod.ceil_mode)),
        )

    def gemm(self, x: str, mod, tag: str, out: str | None = None) -> str:
        """nn.Linear on a 2D value."""
        inputs = [x, self.tensor(f"{tag}.w", mod.weight), self.tensor(f"{tag}.b", mod.bias)]
        return self.node("Gemm", inputs, tag, out=out, transB=1)

    def token_linear(self, x: str, weight, bias, tag: str) -> str:
        """Linear over the last axis of a token stack: MatMul(x, W^T) + b."""
        wt = self.init(f"{tag}.w", weight.detach().cpu().numpy().T)
        y = self.node("MatMul", [x, wt], tag)
        return self.node("Add", [y, self.tensor(f"{tag}.b", bias)], tag)

    def layer_norm(self, x: str, mod, tag: str) -> str:
        # opset-13 spelling: normalize over the last axis with primitives
        mean = self.node("ReduceMean", [x], f"{tag}.mean", axes=[-1], keepdims=1)
        centered = self.node("Sub", [x, mean], f"{tag}.center")
        sq = self.node("Mul", [centered, centered], f"{tag}.sq")
        var = self.node("ReduceMean", [sq], f"{tag}.var", axes=[-1], keepdims=1)
        shifted = self.node("Add", [var, self.floats(f"{tag}.eps", [mod.eps])], f"{tag}.shift")
        denom = self.node("Sqrt", [shifted], f"{tag}.denom")
        unit = self.node("Div", [centered, denom], f"{tag}.unit")
        scaled = self.node("Mul", [unit, self.tensor(f"{tag}.g", mod.weight)], f"{tag}.scale")
        return self.node("Add", [scaled, self.tensor(f"{tag}.b", mod.bias)], tag)

    # -- primitive sugar ----------------------------------------------------

    def relu(self, x: str, tag: str) -> str:
        return self.node("Relu", [x], tag)

    def add(self, a: str, b: str, tag: str) -> str:
        return self.node("Add", [a, b], tag)

    def mul(self, a: str, b: str, tag: str) -> str:
        return self.node("Mul", [a, b], tag)

    def concat(self, xs: list[str], axis: int, tag: str) -> str:
        return self.node("Concat", xs, tag, axis=axis)

    def reshape(self, x: str, dims: list[int], tag: str) -> str:
        return self.node("Reshape", [x, self.int64s(f"{tag}.shape", dims)], tag)

    def transpose(self, x: str, perm: tuple, tag: str) -> str:
        return self.node("Transpose", [x], tag, perm=list(perm))

    def softmax(self, x: str, tag: str, axis: int = -1) -> str:
        return self.node("Softmax", [x], tag, axis=axis)

    def slice_axis(self, x: str, axis: int, start: int, end: int, tag: str) -> str:
        return self.node(
            "Slice",
            [
                x,
                self.int64s(f"{tag}.starts", [start]),
                self.int64s(f"{tag}.ends", [end]),
                self.int64s(f"{tag}.axes", [axis]),
            ],
            tag,
        )

    def squeeze(self, x: str, axes: list[int], tag: str) -> str:
        return self.node("Squeeze", [x, self.int64s(f"{tag}.axes", axes)], tag)

    def gelu(self, x: str, tag: str) -> str:
        # exact (erf) variant, matching torch's approximate="none"
        scaled = self.node("Div", [x, self.floats(f"{tag}.sqrt2", [math.sqrt(2.0)])], f"{tag}.in")
        erf = self.node("Erf", [scaled], f"{tag}.erf")
        lifted = self.node("Add", [erf, self.floats(f"{tag}.one", [1.0])], f"{tag}.lift")
        gated = self.node("Mul", [x, lifted], f"{tag}.gate")
        return self.node("Mul", [gated, self.floats(f"{tag}.half", [0.5])], tag)
