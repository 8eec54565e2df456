"""The DeXpression graph: construction, shape inference, forward/backward, checkpoints."""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import layers as L
from .tensor import DTYPE, SpatialMismatchError, Tensor, read_tensor, write_tensor

KINDS = ("data", "conv", "maxpool", "lrn", "relu", "concat", "fc", "softmax")
PARAM_KINDS = ("conv", "fc")

# Published per-layer output sizes, verbatim. "Data" carries no channel count;
# the "Pooling 3b" and "Classifier" rows are misprints.
PUBLISHED_SHAPES: dict[str, tuple[int, ...]] = {
    "Data": (224, 224),
    "Convolution 1": (64, 112, 112),
    "Pooling 1": (64, 56, 56),
    "LRN 1": (64, 56, 56),
    "Convolution 2a": (96, 56, 56),
    "Convolution 2b": (208, 56, 56),
    "Pooling 2a": (64, 56, 56),
    "Convolution 2c": (64, 56, 56),
    "Concat 2": (272, 56, 56),
    "Pooling 2b": (272, 28, 28),
    "Convolution 3a": (96, 28, 28),
    "Convolution 3b": (208, 28, 28),
    "Pooling 3a": (272, 28, 28),
    "Convolution 3c": (64, 28, 28),
    "Concat 3": (272, 28, 28),
    "Pooling 3b": (282, 14, 14),
    "Classifier": (11, 1, 1),
}
# Pooling cannot change the channel count, so 282 must be 272.
PUBLISHED_SHAPE_FIXES: dict[str, tuple[int, ...]] = {"Pooling 3b": (272, 14, 14)}

CHECKPOINT_MAGIC = b"DXPR"
CHECKPOINT_VERSION = 1


class GraphError(ValueError):
    pass


class ShapeConflictError(GraphError):
    def __init__(self, layer: str, upstream: str | None, message: str):
        self.layer = layer
        self.upstream = upstream
        where = f"{layer!r}" if upstream is None else f"{layer!r} (input from {upstream!r})"
        super().__init__(f"shape conflict at {where}: {message}")


class CheckpointError(ValueError):
    pass


class ClassCountError(ValueError):
    pass


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: dict[str, Any] = field(default_factory=dict)
    shape: tuple[int, ...] | None = None  # declared output shape, checked by infer_shapes


@dataclass
class NetworkGraph:
    layers: list[LayerSpec]
    input_shape: tuple[int, int, int]
    num_classes: int

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        seen: set[str] = set()
        consumed: set[str] = set()
        for i, spec in enumerate(self.layers):
            if spec.kind not in KINDS:
                raise GraphError(f"layer {spec.name!r} has unknown kind {spec.kind!r}")
            if spec.name in seen:
                raise GraphError(f"duplicate layer name {spec.name!r}")
            want = {"data": 0, "concat": 2}.get(spec.kind, 1)
            if len(spec.inputs) != want:
                raise GraphError(f"{spec.kind} layer {spec.name!r} needs {want} input(s), has {len(spec.inputs)}")
            if (spec.kind == "data") != (i == 0):
                raise GraphError("the graph must have exactly one data layer, placed first")
            for up in spec.inputs:
                if up not in seen:
                    raise GraphError(f"layer {spec.name!r} references unknown or later layer {up!r}")
                consumed.add(up)
            seen.add(spec.name)
        if not self.layers or self.layers[-1].kind != "softmax":
            raise GraphError("the graph must end in a softmax layer")
        sinks = [s.name for s in self.layers if s.name not in consumed]
        if sinks != [self.layers[-1].name]:
            raise GraphError(f"graph must have a single sink, found {sinks}")
        if self.num_classes < 2:
            raise GraphError("num_classes must be >= 2")

    def __getitem__(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(f"unknown layer {name!r}; valid names: {self.layer_names()}")

    def layer_names(self) -> list[str]:
        return [s.name for s in self.layers]

    @property
    def classifier(self) -> LayerSpec:
        return self[self.layers[-1].inputs[0]]

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [
                {"name": s.name, "kind": s.kind, "inputs": list(s.inputs), "attrs": s.attrs,
                 "shape": None if s.shape is None else list(s.shape)}
                for s in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkGraph":
        layers = [
            LayerSpec(
                name=item["name"],
                kind=item["kind"],
                inputs=tuple(item["inputs"]),
                attrs=_untuple(item["attrs"]),
                shape=None if item.get("shape") is None else tuple(item["shape"]),
            )
            for item in d["layers"]
        ]
        return cls(layers, tuple(d["input_shape"]), int(d["num_classes"]))


def _untuple(attrs: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in attrs.items()}


# ---------------------------------------------------------------- construction

def _conv(name, inp, out_channels, kernel, stride=1, padding=0):
    return LayerSpec(name, "conv", (inp,), {"out_channels": out_channels, "kernel": (kernel, kernel),
                                           "stride": stride, "padding": padding})


def _pool(name, inp, window=3, stride=1, padding=0):
    return LayerSpec(name, "maxpool", (inp,), {"window": window, "stride": stride, "padding": padding})


def _relu(name, inp):
    return LayerSpec(name, "relu", (inp,))


def _featex(block: str, inp: str) -> list[LayerSpec]:
    """Two parallel paths joined by channel concatenation, then a stride-2 pool."""
    b = block
    return [
        _conv(f"Convolution {b}a", inp, 96, 1),
        _relu(f"ReLU {b}a", f"Convolution {b}a"),
        _conv(f"Convolution {b}b", f"ReLU {b}a", 208, 3, padding=1),
        _relu(f"ReLU {b}b", f"Convolution {b}b"),
        _pool(f"Pooling {b}a", inp, 3, stride=1, padding=1),
        _conv(f"Convolution {b}c", f"Pooling {b}a", 64, 1),
        _relu(f"ReLU {b}c", f"Convolution {b}c"),
        LayerSpec(f"Concat {b}", "concat", (f"ReLU {b}b", f"ReLU {b}c")),
        _pool(f"Pooling {b}b", f"Concat {b}", 3, stride=2),
    ]


def build_dexpression(num_classes: int, input_size: int = 224, featex_blocks: int = 2,
                      lrn: L.LrnParams | None = None) -> NetworkGraph:
    """Build the DeXpression graph for single-channel ``input_size`` square images.

    With ``input_size=224`` every layer listed in ``PUBLISHED_SHAPES`` carries its
    declared output shape (misprints corrected), so ``infer_shapes`` checks the
    wiring against it. Smaller inputs give the same topology with a
    proportionally smaller classifier, used for fast gradient checks.
    """
    if featex_blocks not in (1, 2):
        raise ValueError("featex_blocks must be 1 or 2")
    lrn = lrn or L.LrnParams()
    specs = [
        LayerSpec("Data", "data"),
        _conv("Convolution 1", "Data", 64, 7, stride=2, padding=3),
        _relu("ReLU 1", "Convolution 1"),
        _pool("Pooling 1", "ReLU 1", 3, stride=2),
        LayerSpec("LRN 1", "lrn", ("Pooling 1",), asdict(lrn)),
    ]
    specs += _featex("2", "LRN 1")
    if featex_blocks == 2:
        specs += _featex("3", "Pooling 2b")
    specs += [
        LayerSpec("Classifier", "fc", (specs[-1].name,), {"out_dim": num_classes}),
        LayerSpec("Softmax", "softmax", ("Classifier",)),
    ]
    if input_size == 224:
        for spec in specs:
            if spec.name in PUBLISHED_SHAPES and spec.name not in ("Data", "Classifier"):
                spec.shape = PUBLISHED_SHAPE_FIXES.get(spec.name, PUBLISHED_SHAPES[spec.name])
        specs[0].shape = (1, 224, 224)
    specs[-2].shape = (num_classes,)
    return NetworkGraph(specs, (1, input_size, input_size), num_classes)


# ---------------------------------------------------------------- shapes

def infer_shapes(g: NetworkGraph) -> dict[str, tuple[int, ...]]:
    """Propagate shapes through the graph, checking every declared shape.

    A layer whose inferred shape disagrees with its declaration is reported at
    the next declared consumer (looking through undeclared ReLUs), naming both
    the consuming layer and the offending upstream.
    """
    shapes: dict[str, tuple[int, ...]] = {}
    declared = {s.name: s.shape for s in g.layers}
    by_name = {s.name: s for s in g.layers}

    def declared_source(up):
        # undeclared ReLUs pass shapes through unchanged; look behind them
        while declared[up] is None and by_name[up].kind == "relu":
            up = by_name[up].inputs[0]
        return up

    def upstream(spec, up):
        if declared[spec.name] is not None or spec.kind == "softmax":
            src = declared_source(up)
            want = declared[src]
            if want is not None and tuple(want) != shapes[src]:
                raise ShapeConflictError(spec.name, src,
                                         f"{src!r} produces {list(shapes[src])}, declared {list(want)}")
        return shapes[up]

    for spec in g.layers:
        a = spec.attrs
        ins = [upstream(spec, up) for up in spec.inputs]
        try:
            if spec.kind == "data":
                out = tuple(g.input_shape)
            elif spec.kind == "conv":
                if len(ins[0]) != 3:
                    raise ShapeConflictError(spec.name, spec.inputs[0], f"expected rank-3 input, got {list(ins[0])}")
                out = L.conv_output_shape(ins[0], a["out_channels"], a["kernel"], a["stride"], a["padding"])
            elif spec.kind == "maxpool":
                out = L.pool_output_shape(ins[0], a["window"], a["stride"], a["padding"])
            elif spec.kind in ("relu", "lrn"):
                out = ins[0]
            elif spec.kind == "concat":
                (ca, *sa), (cb, *sb) = ins
                if sa != sb:
                    raise ShapeConflictError(
                        spec.name, spec.inputs[1],
                        f"spatial extents {sa} of {spec.inputs[0]!r} and {sb} of {spec.inputs[1]!r} differ",
                    )
                out = (ca + cb, *sa)
            elif spec.kind == "fc":
                out = (a["out_dim"],)
            else:  # softmax
                out = ins[0]
                if out != (g.num_classes,):
                    raise ShapeConflictError(spec.name, spec.inputs[0],
                                             f"classifier emits {list(out)}, expected [{g.num_classes}]")
        except L.DegenerateOutputError as exc:
            raise ShapeConflictError(spec.name, spec.inputs[0] if spec.inputs else None, str(exc)) from None
        shapes[spec.name] = tuple(int(d) for d in out)
    for spec in g.layers:
        # declarations no declared consumer looked at
        if spec.shape is not None and tuple(spec.shape) != shapes[spec.name]:
            raise ShapeConflictError(spec.name, None,
                                     f"produces {list(shapes[spec.name])}, declared {list(spec.shape)}")
    return shapes


def fc_in_dim(g: NetworkGraph, shapes: dict, spec: LayerSpec) -> int:
    return int(np.prod(shapes[spec.inputs[0]]))


def param_shapes(g: NetworkGraph) -> dict[str, tuple[int, ...]]:
    shapes = infer_shapes(g)
    out = {}
    for spec in g.layers:
        if spec.kind == "conv":
            c = shapes[spec.inputs[0]][0]
            n, m = spec.attrs["kernel"]
            out[f"{spec.name}.weights"] = (spec.attrs["out_channels"], c, n, m)
            out[f"{spec.name}.bias"] = (spec.attrs["out_channels"],)
        elif spec.kind == "fc":
            out[f"{spec.name}.weights"] = (spec.attrs["out_dim"], fc_in_dim(g, shapes, spec))
            out[f"{spec.name}.bias"] = (spec.attrs["out_dim"],)
    return out


def init_params(g: NetworkGraph, seed: int = 0, dtype=DTYPE) -> dict[str, Tensor]:
    """Uniform Xavier weights in [-a, a], a = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for key, shape in param_shapes(g).items():
        if key.endswith(".bias"):
            params[key] = np.zeros(shape, dtype=dtype)
        elif len(shape) == 4:
            o, c, n, m = shape
            params[key] = L.xavier_uniform(rng, shape, c * n * m, o * n * m, dtype)
        else:
            params[key] = L.xavier_uniform(rng, shape, shape[1], shape[0], dtype)
    return params


def _conv_params(spec, params):
    return L.ConvParams(params[f"{spec.name}.weights"], params[f"{spec.name}.bias"],
                        spec.attrs["stride"], spec.attrs["padding"])


def _pool_params(spec):
    return L.PoolParams(spec.attrs["window"], spec.attrs["stride"], spec.attrs["padding"])


def _fc_params(spec, params):
    return L.FcParams(params[f"{spec.name}.weights"], params[f"{spec.name}.bias"])


# ---------------------------------------------------------------- forward / backward

@dataclass
class Trace:
    """Activations of every layer plus pooling argmax maps from one forward pass."""

    activations: dict[str, Tensor]
    argmax: dict[str, np.ndarray]
    logits: Tensor
    probabilities: Tensor


def run(g: NetworkGraph, params: dict[str, Tensor], x: Tensor) -> Trace:
    if tuple(x.shape) != g.input_shape:
        raise ValueError(f"input shape {list(x.shape)} does not match network input {list(g.input_shape)}")
    acts: dict[str, Tensor] = {}
    argmax: dict[str, np.ndarray] = {}
    for spec in g.layers:
        ins = [acts[up] for up in spec.inputs]
        k = spec.kind
        if k == "data":
            out = x
        elif k == "conv":
            out = L.conv_forward(ins[0], _conv_params(spec, params))
        elif k == "relu":
            out = L.relu_forward(ins[0])
        elif k == "maxpool":
            out, argmax[spec.name] = L.maxpool_forward(ins[0], _pool_params(spec))
        elif k == "lrn":
            out = L.lrn_forward(ins[0], L.LrnParams(**spec.attrs))
        elif k == "concat":
            out = np.concatenate(ins, axis=0)
        elif k == "fc":
            out = L.fc_forward(ins[0], _fc_params(spec, params))
        else:
            out = L.softmax(ins[0])
        acts[spec.name] = out
    return Trace(acts, argmax, acts[g.layers[-1].inputs[0]], acts[g.layers[-1].name])


def forward(g: NetworkGraph, params: dict[str, Tensor], x: Tensor, capture: bool = False):
    """Class probabilities for one [C,H,W] image; with ``capture`` also every layer's activation."""
    trace = run(g, params, x)
    return trace.probabilities, (trace.activations if capture else None)


def output_gradient(probs: Tensor, target: int) -> Tensor:
    """Gradient of softmax cross-entropy with respect to the classifier output: p - onehot."""
    if not 0 <= target < probs.size:
        raise ValueError(f"target class {target} outside [0, {probs.size})")
    grad = probs.copy()
    grad[target] -= 1
    return grad


def backward_from(g: NetworkGraph, params: dict[str, Tensor], trace: Trace,
                  grad_logits: Tensor, need_input: bool = False) -> dict[str, Tensor]:
    """Backpropagate a classifier-output gradient through the graph."""
    acts = trace.activations
    grads: dict[str, Tensor] = {}
    pending: dict[str, Tensor] = {g.layers[-1].inputs[0]: grad_logits}

    def push(name, value):
        if name in pending:
            pending[name] = pending[name] + value
        else:
            pending[name] = value

    for spec in reversed(g.layers[:-1]):
        gout = pending.pop(spec.name, None)
        if gout is None:
            continue
        k = spec.kind
        if k == "data":
            if need_input:
                grads["input"] = gout
            continue
        inp = acts[spec.inputs[0]]
        if k == "conv":
            wants_x = need_input or g[spec.inputs[0]].kind != "data"
            gx, gw, gb = L.conv_backward(inp, _conv_params(spec, params), gout, input_grad=wants_x)
            grads[f"{spec.name}.weights"] = gw
            grads[f"{spec.name}.bias"] = gb
            if gx is not None:
                push(spec.inputs[0], gx)
        elif k == "fc":
            gx, gw, gb = L.fc_backward(inp, _fc_params(spec, params), gout)
            grads[f"{spec.name}.weights"] = gw
            grads[f"{spec.name}.bias"] = gb
            push(spec.inputs[0], gx)
        elif k == "relu":
            push(spec.inputs[0], L.relu_backward(inp, gout))
        elif k == "maxpool":
            push(spec.inputs[0], L.maxpool_backward(trace.argmax[spec.name], gout, inp.shape))
        elif k == "lrn":
            push(spec.inputs[0], L.lrn_backward(inp, L.LrnParams(**spec.attrs), gout))
        elif k == "concat":
            ca = acts[spec.inputs[0]].shape[0]
            push(spec.inputs[0], gout[:ca])
            push(spec.inputs[1], gout[ca:])
    return grads


def loss_and_grads(g: NetworkGraph, params: dict[str, Tensor], x: Tensor, target: int):
    """Cross-entropy loss, class probabilities, and parameter gradients for one sample."""
    if not 0 <= target < g.num_classes:
        raise ValueError(f"target class {target} outside [0, {g.num_classes})")
    trace = run(g, params, x)
    logits = trace.logits
    loss = float(-L.log_softmax(logits.astype(np.float64))[target])
    grads = backward_from(g, params, trace, output_gradient(trace.probabilities, target))
    return loss, trace.probabilities, grads


def backward(g: NetworkGraph, params: dict[str, Tensor], x: Tensor, target: int) -> dict[str, Tensor]:
    return loss_and_grads(g, params, x, target)[2]


def kink_signature(g: NetworkGraph, params: dict[str, Tensor], x: Tensor):
    """ReLU activity masks and pooling argmax maps; constant on each differentiable piece."""
    trace = run(g, params, x)
    masks = [trace.activations[s.inputs[0]] > 0 for s in g.layers if s.kind == "relu"]
    return masks + [trace.argmax[k] for k in sorted(trace.argmax)]


def check_network_gradients(input_size: int = 16, num_classes: int = 3, seed: int = 0,
                            tolerance: float = 1e-3, eps: float = 1e-3,
                            max_coords: int = 12) -> L.GradCheckReport:
    """End-to-end float64 gradient check of the loss on a shrunken DeXpression graph.

    Probes that flip a ReLU mask or a pooling argmax are skipped and counted.
    """
    g = build_dexpression(num_classes, input_size=input_size)
    rng = np.random.default_rng(seed)
    params = init_params(g, seed=seed, dtype=np.float64)
    for key in params:
        if key.endswith(".bias"):
            params[key] = rng.uniform(-0.1, 0.1, params[key].shape)
    x = rng.uniform(0, 1, g.input_shape)
    target = int(rng.integers(num_classes))

    def loss_fn(v):
        trace = run(g, v, x)
        return np.array(-L.log_softmax(trace.logits)[target])

    def grad_fn(v, proj):
        _, _, grads = loss_and_grads(g, v, x, target)
        return {k: grads[k] * float(proj) for k in v}

    return L.gradient_check(loss_fn, grad_fn, params, tolerance=tolerance, eps=eps, seed=seed,
                            max_coords=max_coords, signature=lambda v: kink_signature(g, v, x))


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, g: NetworkGraph, params: dict[str, Tensor], meta: dict | None = None) -> None:
    """Write ``DXPR | u32 version | u32 len + JSON header | tensor records | u32 CRC32``."""
    expected = param_shapes(g)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"missing parameter tensors: {missing}")
    header = json.dumps({"graph": g.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    for name in expected:
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        write_tensor(buf, params[name])
    body = buf.getvalue()
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, num_classes: int | None = None):
    """Read a checkpoint; returns ``(graph, params, meta)``.

    ``num_classes``, when given, must match the stored classifier.
    """
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or truncated)")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt or truncated")
    version, hlen = struct.unpack_from("<II", body, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12 + hlen
    header = json.loads(body[12:off].decode())
    g = NetworkGraph.from_dict(header["graph"])
    params = {}
    try:
        while off < len(body):
            (nlen,) = struct.unpack_from("<I", body, off)
            name = body[off + 4: off + 4 + nlen].decode()
            params[name], off = read_tensor(body, off + 4 + nlen)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed tensor record ({exc})") from None
    expected = param_shapes(g)
    missing = sorted(set(expected) - set(params))
    if missing:
        raise CheckpointError(f"{path}: missing tensors {missing}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {params[name].shape}, expected {shape}")
    if num_classes is not None and num_classes != g.num_classes:
        raise ClassCountError(
            f"checkpoint classifies {g.num_classes} classes but {num_classes} were requested"
        )
    return g, params, header["meta"]
