"""Minimal ONNX model reader/writer speaking the protobuf wire format directly.

Covers the subset of the format needed to store and execute feed-forward
image classifiers: a single graph of nodes with scalar/tensor attributes,
float32/int64 initializers, and static tensor shapes. No protobuf runtime or
generated code is involved; messages are encoded and decoded field by field
against the published field numbers of onnx.proto (IR version 8, default
opset 13). Unknown fields are skipped on read so models produced by other
exporters remain loadable as long as they stay inside this subset.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import OnnxError

# TensorProto.DataType values we understand.
FLOAT = 1
UINT8 = 2
INT8 = 3
INT32 = 6
INT64 = 7
BOOL = 9
DOUBLE = 11

_DTYPE_OF = {
    FLOAT: np.dtype(np.float32),
    UINT8: np.dtype(np.uint8),
    INT8: np.dtype(np.int8),
    INT32: np.dtype(np.int32),
    INT64: np.dtype(np.int64),
    BOOL: np.dtype(np.bool_),
    DOUBLE: np.dtype(np.float64),
}
_CODE_OF = {v: k for k, v in _DTYPE_OF.items()}

# AttributeProto.AttributeType
ATTR_FLOAT = 1
ATTR_INT = 2
ATTR_STRING = 3
ATTR_TENSOR = 4
ATTR_FLOATS = 6
ATTR_INTS = 7
ATTR_STRINGS = 8


def _uvarint(value: int) -> bytes:
    out = bytearray()
    while True:
        bits = value & 0x7F
        value >>= 7
        if value:
            out.append(bits | 0x80)
        else:
            out.append(bits)
            return bytes(out)


def _varint64(value: int) -> bytes:
    # protobuf int64: negatives take the full 10-byte two's complement form
    return _uvarint(value & 0xFFFFFFFFFFFFFFFF)


def _signed(value: int) -> int:
    return value - (1 << 64) if value >= (1 << 63) else value


def _tag(field_number: int, wire_type: int) -> bytes:
    return _uvarint((field_number << 3) | wire_type)


def _len_delimited(field_number: int, payload: bytes) -> bytes:
    return _tag(field_number, 2) + _uvarint(len(payload)) + payload


def _string(field_number: int, text: str) -> bytes:
    return _len_delimited(field_number, text.encode("utf-8"))


class _Reader:
    """Forward-only cursor over one serialized message."""

    def __init__(self, buf: bytes, origin: str):
        self.buf = buf
        self.pos = 0
        self.origin = origin

    def done(self) -> bool:
        return self.pos >= len(self.buf)

    def uvarint(self) -> int:
        result = 0
        shift = 0
        while True:
            if self.pos >= len(self.buf):
                raise OnnxError(f"{self.origin}: truncated varint")
            byte = self.buf[self.pos]
            self.pos += 1
            result |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return result
            shift += 7
            if shift > 63:
                raise OnnxError(f"{self.origin}: varint overflow")

    def tag(self) -> tuple[int, int]:
        key = self.uvarint()
        return key >> 3, key & 0x7

    def bytes_field(self) -> bytes:
        length = self.uvarint()
        end = self.pos + length
        if end > len(self.buf):
            raise OnnxError(f"{self.origin}: length-delimited field overruns buffer")
        chunk = self.buf[self.pos : end]
        self.pos = end
        return chunk

    def fixed32(self) -> bytes:
        end = self.pos + 4
        if end > len(self.buf):
            raise OnnxError(f"{self.origin}: truncated fixed32")
        chunk = self.buf[self.pos : end]
        self.pos = end
        return chunk

    def fixed64(self) -> bytes:
        end = self.pos + 8
        if end > len(self.buf):
            raise OnnxError(f"{self.origin}: truncated fixed64")
        chunk = self.buf[self.pos : end]
        self.pos = end
        return chunk

    def skip(self, wire_type: int) -> None:
        if wire_type == 0:
            self.uvarint()
        elif wire_type == 1:
            self.fixed64()
        elif wire_type == 2:
            self.bytes_field()
        elif wire_type == 5:
            self.fixed32()
        else:
            raise OnnxError(f"{self.origin}: unsupported wire type {wire_type}")


@dataclass
class Attribute:
    """One node attribute; ``kind`` is an AttributeProto type constant."""

    name: str
    kind: int
    value: object

    @staticmethod
    def f(name: str, value: float) -> "Attribute":
        return Attribute(name, ATTR_FLOAT, float(value))

    @staticmethod
    def i(name: str, value: int) -> "Attribute":
        return Attribute(name, ATTR_INT, int(value))

    @staticmethod
    def s(name: str, value: str) -> "Attribute":
        return Attribute(name, ATTR_STRING, value)

    @staticmethod
    def t(name: str, value: np.ndarray) -> "Attribute":
        return Attribute(name, ATTR_TENSOR, np.asarray(value))

    @staticmethod
    def ints(name: str, values) -> "Attribute":
        return Attribute(name, ATTR_INTS, [int(v) for v in values])

    @staticmethod
    def floats(name: str, values) -> "Attribute":
        return Attribute(name, ATTR_FLOATS, [float(v) for v in values])


@dataclass
class Node:
    op_type: str
    inputs: list[str]
    outputs: list[str]
    name: str = ""
    attributes: dict[str, Attribute] = field(default_factory=dict)
    domain: str = ""

    def attr(self, name: str, default=None):
        a = self.attributes.get(name)
        return default if a is None else a.value


@dataclass
class ValueInfo:
    """Named tensor with element type and shape; dims may be symbolic strings."""

    name: str
    elem_type: int = FLOAT
    shape: tuple = ()


@dataclass
class Graph:
    name: str = "graph"
    nodes: list[Node] = field(default_factory=list)
    inputs: list[ValueInfo] = field(default_factory=list)
    outputs: list[ValueInfo] = field(default_factory=list)
    initializers: dict[str, np.ndarray] = field(default_factory=dict)

    def value_shape(self, name: str):
        """Declared shape for a graph input/output/initializer, else None."""
        if name in self.initializers:
            return tuple(self.initializers[name].shape)
        for vi in list(self.inputs) + list(self.outputs):
            if vi.name == name:
                return tuple(vi.shape)
        return None


@dataclass
class Model:
    graph: Graph
    ir_version: int = 8
    opset_version: int = 13
    producer_name: str = "uap"
    producer_version: str = "0.1"


def tensor_to_array(buf: bytes, origin: str) -> tuple[str, np.ndarray]:
    """Decode one TensorProto into (name, ndarray)."""
    r = _Reader(buf, origin)
    dims: list[int] = []
    data_type = FLOAT
    raw = None
    floats: list[float] = []
    ints: list[int] = []
    name = ""
    while not r.done():
        fieldno, wt = r.tag()
        if fieldno == 1:  # dims
            if wt == 2:
                sub = _Reader(r.bytes_field(), origin)
                while not sub.done():
                    dims.append(_signed(sub.uvarint()))
            else:
                dims.append(_signed(r.uvarint()))
        elif fieldno == 2:
            data_type = r.uvarint()
        elif fieldno == 4:  # float_data
            if wt == 2:
                chunk = r.bytes_field()
                floats.extend(struct.unpack(f"<{len(chunk) // 4}f", chunk))
            else:
                floats.append(struct.unpack("<f", r.fixed32())[0])
        elif fieldno in (5, 7):  # int32_data / int64_data
            if wt == 2:
                sub = _Reader(r.bytes_field(), origin)
                while not sub.done():
                    ints.append(_signed(sub.uvarint()))
            else:
                ints.append(_signed(r.uvarint()))
        elif fieldno == 8:
            name = r.bytes_field().decode("utf-8")
        elif fieldno == 9:
            raw = r.bytes_field()
        elif fieldno == 10:  # double_data
            if wt == 2:
                chunk = r.bytes_field()
                floats.extend(struct.unpack(f"<{len(chunk) // 8}d", chunk))
            else:
                floats.append(struct.unpack("<d", r.fixed64())[0])
        else:
            r.skip(wt)
    dtype = _DTYPE_OF.get(data_type)
    if dtype is None:
        raise OnnxError(f"{origin}: tensor '{name}' has unsupported data type {data_type}")
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if raw is not None:
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).astype(dtype, copy=True)
    elif dtype.kind == "f":
        arr = np.asarray(floats, dtype=dtype)
    else:
        arr = np.asarray(ints, dtype=dtype)
    if arr.size != count:
        raise OnnxError(
            f"{origin}: tensor '{name}' has {arr.size} elements, shape {dims} wants {count}"
        )
    return name, arr.reshape(dims)


def array_to_tensor(name: str, arr: np.ndarray) -> bytes:
    """Encode an ndarray as a TensorProto (always raw_data)."""
    arr = np.asarray(arr)
    code = _CODE_OF.get(arr.dtype)
    if code is None:
        raise OnnxError(f"tensor '{name}': unsupported dtype {arr.dtype}")
    out = bytearray()
    for d in arr.shape:
        out += _tag(1, 0) + _varint64(int(d))
    out += _tag(2, 0) + _uvarint(code)
    out += _string(8, name)
    out += _len_delimited(9, np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
    return bytes(out)


def _decode_shape(buf: bytes, origin: str) -> tuple:
    dims = []
    r = _Reader(buf, origin)
    while not r.done():
        fieldno, wt = r.tag()
        if fieldno == 1 and wt == 2:  # Dimension
            dim_val = None
            sub = _Reader(r.bytes_field(), origin)
            while not sub.done():
                f2, w2 = sub.tag()
                if f2 == 1:
                    dim_val = _signed(sub.uvarint())
                elif f2 == 2:
                    dim_val = sub.bytes_field().decode("utf-8")
                else:
                    sub.skip(w2)
            dims.append(dim_val)
        else:
            r.skip(wt)
    return tuple(dims)


def _decode_value_info(buf: bytes, origin: str) -> ValueInfo:
    r = _Reader(buf, origin)
    name = ""
    elem_type = FLOAT
    shape: tuple = ()
    while not r.done():
        fieldno, wt = r.tag()
        if fieldno == 1:
            name = r.bytes_field().decode("utf-8")
        elif fieldno == 2 and wt == 2:  # TypeProto
            tr = _Reader(r.bytes_field(), origin)
            while not tr.done():
                f2, w2 = tr.tag()
                if f2 == 1 and w2 == 2:  # tensor_type
                    tt = _Reader(tr.bytes_field(), origin)
                    while not tt.done():
                        f3, w3 = tt.tag()
                        if f3 == 1:
                            elem_type = tt.uvarint()
                        elif f3 == 2 and w3 == 2:
                            shape = _decode_shape(tt.bytes_field(), origin)
                        else:
                            tt.skip(w3)
                else:
                    tr.skip(w2)
        else:
            r.skip(wt)
    return ValueInfo(name, elem_type, shape)


def _encode_value_info(vi: ValueInfo) -> bytes:
    shape_buf = bytearray()
    for d in vi.shape:
        if isinstance(d, str):
            dim = _string(2, d)
        elif d is None:
            dim = b""
        else:
            dim = _tag(1, 0) + _varint64(int(d))
        shape_buf += _len_delimited(1, dim)
    tensor_type = (
        _tag(1, 0)
        + _uvarint(vi.elem_type)
        + _len_delimited(2, bytes(shape_buf))
    )
    type_proto = _len_delimited(1, tensor_type)
    return _string(1, vi.name) + _len_delimited(2, type_proto)


def _decode_attribute(buf: bytes, origin: str) -> Attribute:
    r = _Reader(buf, origin)
    name = ""
    kind = 0
    f_val = 0.0
    i_val = 0
    s_val = b""
    t_val = None
    floats: list[float] = []
    ints: list[int] = []
    strings: list[bytes] = []
    while not r.done():
        fieldno, wt = r.tag()
        if fieldno == 1:
            name = r.bytes_field().decode("utf-8")
        elif fieldno == 2:
            f_val = struct.unpack("<f", r.fixed32())[0]
        elif fieldno == 3:
            i_val = _signed(r.uvarint())
        elif fieldno == 4:
            s_val = r.bytes_field()
        elif fieldno == 5 and wt == 2:
            t_val = tensor_to_array(r.bytes_field(), origin)[1]
        elif fieldno == 6:
            if wt == 2:
                chunk = r.bytes_field()
                floats.extend(struct.unpack(f"<{len(chunk) // 4}f", chunk))
            else:
                floats.append(struct.unpack("<f", r.fixed32())[0])
        elif fieldno == 7:
            if wt == 2:
                sub = _Reader(r.bytes_field(), origin)
                while not sub.done():
                    ints.append(_signed(sub.uvarint()))
            else:
                ints.append(_signed(r.uvarint()))
        elif fieldno == 8:
            strings.append(r.bytes_field())
        elif fieldno == 20:
            kind = r.uvarint()
        else:
            r.skip(wt)
    value: object
    if kind == ATTR_FLOAT:
        value = f_val
    elif kind == ATTR_INT:
        value = i_val
    elif kind == ATTR_STRING:
        value = s_val.decode("utf-8")
    elif kind == ATTR_TENSOR:
        if t_val is None:
            raise OnnxError(f"{origin}: tensor attribute '{name}' missing payload")
        value = t_val
    elif kind == ATTR_FLOATS:
        value = floats
    elif kind == ATTR_INTS:
        value = ints
    elif kind == ATTR_STRINGS:
        value = [s.decode("utf-8") for s in strings]
    else:
        raise OnnxError(f"{origin}: attribute '{name}' has unsupported type {kind}")
    return Attribute(name, kind, value)


def _encode_attribute(attr: Attribute) -> bytes:
    out = bytearray(_string(1, attr.name))
    out += _tag(20, 0) + _uvarint(attr.kind)
    if attr.kind == ATTR_FLOAT:
        out += _tag(2, 5) + struct.pack("<f", attr.value)
    elif attr.kind == ATTR_INT:
        out += _tag(3, 0) + _varint64(attr.value)
    elif attr.kind == ATTR_STRING:
        out += _len_delimited(4, attr.value.encode("utf-8"))
    elif attr.kind == ATTR_TENSOR:
        out += _len_delimited(5, array_to_tensor("", attr.value))
    elif attr.kind == ATTR_FLOATS:
        out += _len_delimited(6, struct.pack(f"<{len(attr.value)}f", *attr.value))
    elif attr.kind == ATTR_INTS:
        payload = b"".join(_varint64(v) for v in attr.value)
        out += _len_delimited(7, payload)
    elif attr.kind == ATTR_STRINGS:
        for s in attr.value:
            out += _len_delimited(8, s.encode("utf-8"))
    else:
        raise OnnxError(f"attribute '{attr.name}' has unsupported type {attr.kind}")
    return bytes(out)


def _decode_node(buf: bytes, origin: str) -> Node:
    r = _Reader(buf, origin)
    node = Node(op_type="", inputs=[], outputs=[])
    while not r.done():
        fieldno, wt = r.tag()
        if fieldno == 1:
            node.inputs.append(r.bytes_field().decode("utf-8"))
        elif fieldno == 2:
            node.outputs.append(r.bytes_field().decode("utf-8"))
        elif fieldno == 3:
            node.name = r.bytes_field().decode("utf-8")
        elif fieldno == 4:
            node.op_type = r.bytes_field().decode("utf-8")
        elif fieldno == 5 and wt == 2:
            attr = _decode_attribute(r.bytes_field(), origin)
            node.attributes[attr.name] = attr
        elif fieldno == 7:
            node.domain = r.bytes_field().decode("utf-8")
        else:
            r.skip(wt)
    if not node.op_type:
        raise OnnxError(f"{origin}: node '{node.name}' has no op_type")
    return node


def _encode_node(node: Node) -> bytes:
    out = bytearray()
    for s in node.inputs:
        out += _string(1, s)
    for s in node.outputs:
        out += _string(2, s)
    if node.name:
        out += _string(3, node.name)
    out += _string(4, node.op_type)
    for attr in node.attributes.values():
        out += _len_delimited(5, _encode_attribute(attr))
    if node.domain:
        out += _string(7, node.domain)
    return bytes(out)


def _decode_graph(buf: bytes, origin: str) -> Graph:
    r = _Reader(buf, origin)
    graph = Graph()
    while not r.done():
        fieldno, wt = r.tag()
        if fieldno == 1 and wt == 2:
            graph.nodes.append(_decode_node(r.bytes_field(), origin))
        elif fieldno == 2:
            graph.name = r.bytes_field().decode("utf-8")
        elif fieldno == 5 and wt == 2:
            name, arr = tensor_to_array(r.bytes_field(), origin)
            if not name:
                raise OnnxError(f"{origin}: graph initializer without a name")
            graph.initializers[name] = arr
        elif fieldno == 11 and wt == 2:
            graph.inputs.append(_decode_value_info(r.bytes_field(), origin))
        elif fieldno == 12 and wt == 2:
            graph.outputs.append(_decode_value_info(r.bytes_field(), origin))
        else:
            r.skip(wt)
    return graph


def _encode_graph(graph: Graph) -> bytes:
    out = bytearray()
    for node in graph.nodes:
        out += _len_delimited(1, _encode_node(node))
    out += _string(2, graph.name)
    for name, arr in graph.initializers.items():
        out += _len_delimited(5, array_to_tensor(name, arr))
    for vi in graph.inputs:
        out += _len_delimited(11, _encode_value_info(vi))
    for vi in graph.outputs:
        out += _len_delimited(12, _encode_value_info(vi))
    return bytes(out)


def decode_model(buf: bytes, origin: str = "<bytes>") -> Model:
    r = _Reader(buf, origin)
    graph = None
    ir_version = 8
    opset_version = 13
    producer_name = ""
    producer_version = ""
    while not r.done():
        fieldno, wt = r.tag()
        if fieldno == 1:
            ir_version = _signed(r.uvarint())
        elif fieldno == 2:
            producer_name = r.bytes_field().decode("utf-8")
        elif fieldno == 3:
            producer_version = r.bytes_field().decode("utf-8")
        elif fieldno == 7 and wt == 2:
            graph = _decode_graph(r.bytes_field(), origin)
        elif fieldno == 8 and wt == 2:
            sub = _Reader(r.bytes_field(), origin)
            domain = ""
            version = 0
            while not sub.done():
                f2, w2 = sub.tag()
                if f2 == 1:
                    domain = sub.bytes_field().decode("utf-8")
                elif f2 == 2:
                    version = _signed(sub.uvarint())
                else:
                    sub.skip(w2)
            if domain == "":
                opset_version = version
        else:
            r.skip(wt)
    if graph is None:
        raise OnnxError(f"{origin}: model has no graph")
    return Model(
        graph=graph,
        ir_version=ir_version,
        opset_version=opset_version,
        producer_name=producer_name,
        producer_version=producer_version,
    )


def encode_model(model: Model) -> bytes:
    out = bytearray()
    out += _tag(1, 0) + _varint64(model.ir_version)
    if model.producer_name:
        out += _string(2, model.producer_name)
    if model.producer_version:
        out += _string(3, model.producer_version)
    out += _len_delimited(7, _encode_graph(model.graph))
    opset = _string(1, "") + _tag(2, 0) + _varint64(model.opset_version)
    out += _len_delimited(8, opset)
    return bytes(out)


def load_model(path: str | Path) -> Model:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OnnxError(f"{path}: cannot read model ({exc})") from exc
    if not buf:
        raise OnnxError(f"{path}: model file is empty")
    return decode_model(buf, origin=str(path))


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(encode_model(model))
