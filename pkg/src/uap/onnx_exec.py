"""CPU reference executor for the ONNX operator subset used by image classifiers.

Feed-forward graphs only: nodes run in stored order (valid ONNX graphs are
topologically sorted) and every operator is implemented with numpy. Arrays
stay in their incoming dtype, so a float32 graph computes in float32
end to end. Intermediate values are released as soon as no later node needs
them, which keeps deep networks at 224x224 inside a modest memory budget.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import OnnxError
from .onnx_model import Graph, Node


def _attr_ints(node: Node, name: str, default):
    value = node.attr(name, default)
    return None if value is None else [int(v) for v in value]


def _conv_pads(node: Node, rank: int) -> tuple[list[int], list[int]]:
    pads = _attr_ints(node, "pads", [0] * (2 * rank))
    if len(pads) != 2 * rank:
        raise OnnxError(f"node {node.name}: pads must have {2 * rank} entries, got {pads}")
    return pads[:rank], pads[rank:]


def _pool_output_dim(size: int, kernel: int, stride: int, ceil_mode: bool) -> int:
    if ceil_mode:
        return -((size - kernel) // -stride) + 1
    return (size - kernel) // stride + 1


def _windows(x: np.ndarray, kernel: tuple[int, int], strides: tuple[int, int]) -> np.ndarray:
    # (N, C, OH, OW, KH, KW) view, no copy
    view = sliding_window_view(x, kernel, axis=(2, 3))
    return view[:, :, :: strides[0], :: strides[1]]


def op_conv(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x, w = vals[0], vals[1]
    bias = vals[2] if len(vals) > 2 else None
    group = int(node.attr("group", 1))
    strides = _attr_ints(node, "strides", [1, 1])
    dilations = _attr_ints(node, "dilations", [1, 1])
    begin, end = _conv_pads(node, 2)
    if dilations != [1, 1]:
        kh, kw = w.shape[2], w.shape[3]
        dil = np.zeros(
            (w.shape[0], w.shape[1], (kh - 1) * dilations[0] + 1, (kw - 1) * dilations[1] + 1),
            dtype=w.dtype,
        )
        dil[:, :, :: dilations[0], :: dilations[1]] = w
        w = dil
    x = np.pad(x, ((0, 0), (0, 0), (begin[0], end[0]), (begin[1], end[1])))
    n, cin = x.shape[0], x.shape[1]
    m, cg, kh, kw = w.shape
    if cin != cg * group or m % group:
        raise OnnxError(
            f"node {node.name}: Conv channel mismatch (input {cin}, weight {w.shape}, group {group})"
        )
    outs = []
    for g in range(group):
        xg = x[:, g * cg : (g + 1) * cg]
        wg = w[g * (m // group) : (g + 1) * (m // group)]
        win = _windows(xg, (kh, kw), tuple(strides))
        outs.append(np.einsum("nchwij,ocij->nohw", win, wg, optimize=True))
    y = outs[0] if group == 1 else np.concatenate(outs, axis=1)
    y = np.ascontiguousarray(y, dtype=x.dtype)
    if bias is not None:
        y += bias.reshape(1, -1, 1, 1)
    return y


def op_batch_norm(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x, scale, bias, mean, var = vals[:5]
    eps = float(node.attr("epsilon", 1e-5))
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = (scale / np.sqrt(var + eps)).astype(x.dtype)
    off = (bias - mean * scale / np.sqrt(var + eps)).astype(x.dtype)
    return x * inv.reshape(shape) + off.reshape(shape)


def _pool_common(node: Node, x: np.ndarray, pad_value: float):
    kernel = _attr_ints(node, "kernel_shape", None)
    if kernel is None or len(kernel) != 2:
        raise OnnxError(f"node {node.name}: 2D pooling requires kernel_shape")
    strides = _attr_ints(node, "strides", [1, 1])
    begin, end = _conv_pads(node, 2)
    ceil_mode = bool(node.attr("ceil_mode", 0))
    oh = _pool_output_dim(x.shape[2] + begin[0] + end[0], kernel[0], strides[0], ceil_mode)
    ow = _pool_output_dim(x.shape[3] + begin[1] + end[1], kernel[1], strides[1], ceil_mode)
    # ceil_mode windows may overrun the padded edge; extend so slicing stays legal
    need_h = (oh - 1) * strides[0] + kernel[0]
    need_w = (ow - 1) * strides[1] + kernel[1]
    extra_h = max(0, need_h - (x.shape[2] + begin[0] + end[0]))
    extra_w = max(0, need_w - (x.shape[3] + begin[1] + end[1]))
    padded = np.pad(
        x,
        ((0, 0), (0, 0), (begin[0], end[0] + extra_h), (begin[1], end[1] + extra_w)),
        constant_values=pad_value,
    )
    win = _windows(padded, (kernel[0], kernel[1]), tuple(strides))
    return win[:, :, :oh, :ow], (kernel, strides, begin, end, oh, ow)


def op_max_pool(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    win, _ = _pool_common(node, vals[0], -np.inf)
    return np.ascontiguousarray(win.max(axis=(4, 5)))


def op_average_pool(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x = vals[0]
    win, (kernel, strides, begin, end, oh, ow) = _pool_common(node, x, 0.0)
    total = win.sum(axis=(4, 5))
    if node.attr("count_include_pad", 0):
        count = np.full((oh, ow), kernel[0] * kernel[1], dtype=x.dtype)
    else:
        ones = np.ones((1, 1) + x.shape[2:], dtype=x.dtype)
        owin, _ = _pool_common(node, ones, 0.0)
        count = owin.sum(axis=(4, 5))[0, 0]
    return np.ascontiguousarray(total / count)


def op_global_average_pool(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    return vals[0].mean(axis=(2, 3), keepdims=True)


def op_gemm(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    a, b = vals[0], vals[1]
    if node.attr("transA", 0):
        a = a.T
    if node.attr("transB", 0):
        b = b.T
    y = float(node.attr("alpha", 1.0)) * (a @ b)
    if len(vals) > 2:
        y = y + float(node.attr("beta", 1.0)) * vals[2]
    return y.astype(a.dtype, copy=False)


def op_softmax(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x = vals[0]
    axis = int(node.attr("axis", -1))
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def op_reshape(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x, shape = vals[0], vals[1]
    out = []
    for i, d in enumerate(shape.astype(np.int64).tolist()):
        if d == 0 and not node.attr("allowzero", 0):
            out.append(x.shape[i])
        else:
            out.append(d)
    return x.reshape(out)


def op_transpose(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    perm = _attr_ints(node, "perm", None)
    return np.transpose(vals[0], perm)


def op_flatten(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x = vals[0]
    axis = int(node.attr("axis", 1)) % (x.ndim + 1)
    lead = int(np.prod(x.shape[:axis], dtype=np.int64))
    return x.reshape(lead, -1)


def op_concat(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(vals, axis=int(node.attr("axis", 0)))


def op_squeeze(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x = vals[0]
    axes = vals[1].astype(np.int64).tolist() if len(vals) > 1 else _attr_ints(node, "axes", None)
    if axes is None:
        return np.squeeze(x)
    return np.squeeze(x, axis=tuple(a % x.ndim for a in axes))


def op_unsqueeze(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x = vals[0]
    axes = vals[1].astype(np.int64).tolist() if len(vals) > 1 else _attr_ints(node, "axes", None)
    if axes is None:
        raise OnnxError(f"node {node.name}: Unsqueeze requires axes")
    out_rank = x.ndim + len(axes)
    return np.expand_dims(x, tuple(a % out_rank for a in axes))


def op_pad(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x = vals[0]
    mode = node.attr("mode", "constant")
    if len(vals) > 1:
        pads = vals[1].astype(np.int64).tolist()
    else:
        pads = _attr_ints(node, "pads", None)
    if pads is None or len(pads) != 2 * x.ndim:
        raise OnnxError(f"node {node.name}: Pad needs 2*rank pad counts, got {pads}")
    value = float(vals[2]) if len(vals) > 2 and vals[2] is not None else 0.0
    width = list(zip(pads[: x.ndim], pads[x.ndim :]))
    if mode == "constant":
        return np.pad(x, width, constant_values=np.asarray(value, dtype=x.dtype))
    if mode in ("reflect", "edge"):
        return np.pad(x, width, mode={"reflect": "reflect", "edge": "edge"}[mode])
    raise OnnxError(f"node {node.name}: Pad mode '{mode}' not supported")


def op_reduce_mean(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x = vals[0]
    axes = _attr_ints(node, "axes", None)
    if axes is None and len(vals) > 1:
        axes = vals[1].astype(np.int64).tolist()
    keep = bool(node.attr("keepdims", 1))
    axis = None if axes is None else tuple(a % x.ndim for a in axes)
    return x.mean(axis=axis, keepdims=keep, dtype=x.dtype)


def op_slice(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x = vals[0]
    starts = vals[1].astype(np.int64).tolist()
    ends = vals[2].astype(np.int64).tolist()
    axes = (
        vals[3].astype(np.int64).tolist()
        if len(vals) > 3 and vals[3] is not None
        else list(range(len(starts)))
    )
    steps = (
        vals[4].astype(np.int64).tolist()
        if len(vals) > 4 and vals[4] is not None
        else [1] * len(starts)
    )
    index = [slice(None)] * x.ndim
    for start, stop, axis, step in zip(starts, ends, axes, steps):
        # ONNX clamps INT64_MAX/MIN sentinels; python slices do that natively
        index[axis % x.ndim] = slice(start, stop, step)
    return x[tuple(index)]


def op_layer_norm(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x, scale = vals[0], vals[1]
    bias = vals[2] if len(vals) > 2 else None
    axis = int(node.attr("axis", -1)) % x.ndim
    eps = np.asarray(node.attr("epsilon", 1e-5), dtype=x.dtype)
    red = tuple(range(axis, x.ndim))
    mean = x.mean(axis=red, keepdims=True, dtype=x.dtype)
    centered = x - mean
    var = (centered * centered).mean(axis=red, keepdims=True, dtype=x.dtype)
    y = centered / np.sqrt(var + eps) * scale
    return y + bias if bias is not None else y


def op_constant(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    value = node.attr("value")
    if value is None:
        raise OnnxError(f"node {node.name}: Constant without a 'value' tensor attribute")
    return np.asarray(value)


def op_erf(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    x = vals[0]
    return erf(x).astype(x.dtype, copy=False)


_BINARY = {
    "Add": np.add,
    "Sub": np.subtract,
    "Mul": np.multiply,
    "Div": np.true_divide,
    "Pow": np.power,
}

_OPS = {
    "Conv": op_conv,
    "BatchNormalization": op_batch_norm,
    "Relu": lambda node, vals: np.maximum(vals[0], 0),
    "MaxPool": op_max_pool,
    "AveragePool": op_average_pool,
    "GlobalAveragePool": op_global_average_pool,
    "MatMul": lambda node, vals: np.matmul(vals[0], vals[1]),
    "Gemm": op_gemm,
    "Softmax": op_softmax,
    "Sigmoid": lambda node, vals: 1.0 / (1.0 + np.exp(-vals[0])),
    "Tanh": lambda node, vals: np.tanh(vals[0]),
    "Sqrt": lambda node, vals: np.sqrt(vals[0]),
    "Erf": op_erf,
    "Reshape": op_reshape,
    "Transpose": op_transpose,
    "Flatten": op_flatten,
    "Concat": op_concat,
    "Squeeze": op_squeeze,
    "Unsqueeze": op_unsqueeze,
    "Pad": op_pad,
    "ReduceMean": op_reduce_mean,
    "Slice": op_slice,
    "LayerNormalization": op_layer_norm,
    "Constant": op_constant,
    "Dropout": lambda node, vals: vals[0],
    "Identity": lambda node, vals: vals[0],
}
_OPS.update(
    {
        name: (lambda fn: lambda node, vals: fn(vals[0], vals[1]))(fn)
        for name, fn in _BINARY.items()
    }
)


class GraphExecutor:
    """Runs a decoded ONNX graph on numpy arrays."""

    def __init__(self, graph: Graph):
        self.graph = graph
        self.output_names = {vi.name for vi in graph.outputs}
        # last node index that consumes each value, for early release
        self._last_use: dict[str, int] = {}
        for idx, node in enumerate(graph.nodes):
            for name in node.inputs:
                if name:
                    self._last_use[name] = idx

    def unsupported_ops(self) -> set[str]:
        missing = set()
        for node in self.graph.nodes:
            if node.domain not in ("", "ai.onnx"):
                missing.add(f"{node.domain}.{node.op_type}")
            elif node.op_type not in _OPS:
                missing.add(node.op_type)
        return missing

    def run(self, feed: dict[str, np.ndarray], outputs: list[str]) -> dict[str, np.ndarray]:
        values: dict[str, np.ndarray] = {}
        values.update(self.graph.initializers)
        values.update(feed)
        wanted = set(outputs)
        missing_feed = [
            vi.name
            for vi in self.graph.inputs
            if vi.name not in values and vi.name not in self.graph.initializers
        ]
        if missing_feed:
            raise OnnxError(f"missing graph input(s): {', '.join(missing_feed)}")
        for idx, node in enumerate(self.graph.nodes):
            fn = _OPS.get(node.op_type)
            if fn is None or node.domain not in ("", "ai.onnx"):
                raise OnnxError(f"node {node.name}: operator '{node.op_type}' not supported")
            args = []
            for name in node.inputs:
                if not name:
                    args.append(None)
                elif name in values:
                    args.append(values[name])
                else:
                    raise OnnxError(
                        f"node {node.name}: input '{name}' is not produced by any "
                        "earlier node, initializer, or feed"
                    )
            try:
                result = fn(node, args)
            except OnnxError:
                raise
            except Exception as exc:  # surface the failing node
                raise OnnxError(f"node {node.name} ({node.op_type}): {exc}") from exc
            outs = result if isinstance(result, tuple) else (result,)
            for name, arr in zip(node.outputs, outs):
                if name:
                    values[name] = arr
            for name in node.inputs:
                if (
                    name
                    and name not in wanted
                    and name not in self.graph.initializers
                    and self._last_use.get(name) == idx
                ):
                    values.pop(name, None)
        missing = wanted - values.keys()
        if missing:
            raise OnnxError(f"graph produced no value for: {', '.join(sorted(missing))}")
        return {name: values[name] for name in outputs}
