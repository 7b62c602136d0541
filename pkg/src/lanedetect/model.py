"""The lane segmentation network: graph assembly, forward/backward, checkpoints.

Architecture (for the standard 118x328 input):

    (3,118,328) -> pad rows (1,1) -> (3,120,328)
    encoder: 7 convs 3x3 stride 1 pad 1 with ReLU,
             channels 32,64,64,128,128,256,256,
             maxpool 2x2 after convs 2/4/6, dropout 0.2 after convs 3/5/7
    bottleneck (256,15,41)
    decoder: deconvs 256->256 (3x3 s1 p1), 256->128 (2x2 s2),
             128->128 (3x3 s1 p1), 128->64 (2x2 s2), 64->32 (2x2 s2),
             32->1 (3x3 s1 p1), ReLU between, then
    crop rows (1,1) -> sigmoid -> (1,118,328)

Input height+pad must reach a multiple of 8 (three 2x2 pools); width
must already be one.  The pad split is computed from the height, so
reduced inputs such as 16x32 build the same graph with a (0,0) pad.
"""

import io
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import layers
from .errors import CheckpointError, ShapeError
from .optim import AdamState, he_init
from .rng import STREAM_INIT, derive_rng
from .tensor import Tensor

ENCODER_CHANNELS = (32, 64, 64, 128, 128, 256, 256)
POOL_AFTER = (2, 4, 6)      # 1-based encoder conv indices
DROPOUT_AFTER = (3, 5, 7)
DROPOUT_RATE = 0.2
# decoder: (out_ch, kernel, stride, padding)
DECODER_SPECS = ((256, 3, 1, 1), (128, 2, 2, 0), (128, 3, 1, 1),
                 (64, 2, 2, 0), (32, 2, 2, 0), (1, 3, 1, 1))

CKPT_MAGIC = b"LDFCN001"
ADAM_MAGIC = b"ADAM"
_DTYPE_CODES = {0: np.dtype(np.float32)}


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str                 # conv | deconv | pool | dropout | pad | crop | relu | sigmoid
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    rate: float = 0.0
    rows: Tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class ModelGraph:
    layers: Tuple[LayerSpec, ...]
    input_shape: Tuple[int, int, int]    # (C, H, W)
    output_shape: Tuple[int, int, int]
    shape_chain: Tuple[Tuple[int, int, int], ...]   # shape after each layer


def _plan_layers(input_hw: Tuple[int, int]) -> List[LayerSpec]:
    H, W = input_hw
    if W % 8:
        raise ShapeError(f"input width must be a multiple of 8, got {W}")
    pad_total = (8 - H % 8) % 8
    rows = (pad_total // 2, pad_total - pad_total // 2)
    specs = [LayerSpec("pad_in", "pad", rows=rows)]
    for i, ch in enumerate(ENCODER_CHANNELS, start=1):
        specs.append(LayerSpec(f"conv{i}", "conv", out_ch=ch, kernel=3, stride=1, padding=1))
        specs.append(LayerSpec(f"relu_conv{i}", "relu"))
        if i in POOL_AFTER:
            specs.append(LayerSpec(f"pool{POOL_AFTER.index(i) + 1}", "pool"))
        if i in DROPOUT_AFTER:
            specs.append(LayerSpec(f"drop{DROPOUT_AFTER.index(i) + 1}", "dropout",
                                   rate=DROPOUT_RATE))
    for i, (ch, k, s, p) in enumerate(DECODER_SPECS, start=1):
        specs.append(LayerSpec(f"deconv{i}", "deconv", out_ch=ch, kernel=k, stride=s, padding=p))
        if i < len(DECODER_SPECS):
            specs.append(LayerSpec(f"relu_deconv{i}", "relu"))
    specs.append(LayerSpec("crop_out", "crop", rows=rows))
    specs.append(LayerSpec("sigmoid_out", "sigmoid"))
    return specs


def _chain_shapes(specs, input_shape):
    c, h, w = input_shape
    chain = []
    for spec in specs:
        if spec.kind == "pad":
            h = h + spec.rows[0] + spec.rows[1]
        elif spec.kind == "crop":
            h = h - spec.rows[0] - spec.rows[1]
        elif spec.kind == "conv":
            if (h + 2 * spec.padding - spec.kernel) % spec.stride or \
               (w + 2 * spec.padding - spec.kernel) % spec.stride:
                raise ShapeError(f"{spec.name}: geometry does not chain at {(c, h, w)}")
            h = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
            w = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
            c = spec.out_ch
        elif spec.kind == "deconv":
            h = (h - 1) * spec.stride - 2 * spec.padding + spec.kernel
            w = (w - 1) * spec.stride - 2 * spec.padding + spec.kernel
            c = spec.out_ch
        elif spec.kind == "pool":
            if h % 2 or w % 2:
                raise ShapeError(f"{spec.name}: odd dims {(h, w)}")
            h, w = h // 2, w // 2
        if min(c, h, w) < 1:
            raise ShapeError(f"{spec.name}: degenerate shape {(c, h, w)}")
        chain.append((c, h, w))
    return tuple(chain)


def build_model(seed: int, input_hw: Tuple[int, int] = (118, 328),
                in_channels: int = 3) -> Tuple[ModelGraph, Dict[str, np.ndarray]]:
    """Assemble the graph and He-initialize its parameters from the seed."""
    specs = _plan_layers(input_hw)
    input_shape = (in_channels, input_hw[0], input_hw[1])
    chain = _chain_shapes(specs, input_shape)
    graph = ModelGraph(tuple(specs), input_shape, chain[-1], chain)

    rng = derive_rng(seed, STREAM_INIT)
    params: Dict[str, np.ndarray] = {}
    in_ch = in_channels
    for spec in specs:
        if spec.kind in ("conv", "deconv"):
            w = he_init((spec.out_ch, in_ch, spec.kernel, spec.kernel), rng)
            b = np.zeros(spec.out_ch, np.float32)
            b.flags.writeable = False
            params[f"{spec.name}.weight"] = w.data
            params[f"{spec.name}.bias"] = b
            in_ch = spec.out_ch
    return graph, params


def _conv_params(params, spec: LayerSpec, dtype) -> layers.ConvParams:
    w = params[f"{spec.name}.weight"]
    b = params[f"{spec.name}.bias"]
    if w.dtype != dtype:
        w = w.astype(dtype)
        b = b.astype(dtype)
    return layers.ConvParams(Tensor(w, copy=False, check=False), b,
                             stride=spec.stride, padding=spec.padding)


@dataclass
class Tape:
    """Forward activations and masks, consumed by backward."""

    graph: ModelGraph
    entries: List[tuple]
    output: Tensor


def forward(graph: ModelGraph, params: Dict[str, np.ndarray], x: Tensor,
            training: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tuple[Tensor, Tape]:
    B, C, H, W = x.data.shape
    if (C, H, W) != graph.input_shape:
        raise ShapeError(f"input shape {(C, H, W)} != model input {graph.input_shape}")
    dtype = x.data.dtype
    entries = []
    cur = x
    for spec in graph.layers:
        kind = spec.kind
        if kind == "pad":
            out = layers.zeropad_rows(cur, *spec.rows)
            entries.append((spec, None))
        elif kind == "crop":
            out = layers.crop_rows(cur, *spec.rows)
            entries.append((spec, None))
        elif kind == "conv":
            p = _conv_params(params, spec, dtype)
            out = layers.conv2d_forward(cur, p)
            entries.append((spec, (cur, p)))
        elif kind == "deconv":
            p = _conv_params(params, spec, dtype)
            out = layers.convtranspose2d_forward(cur, p)
            entries.append((spec, (cur, p)))
        elif kind == "pool":
            out, mask = layers.maxpool2x2_forward(cur)
            entries.append((spec, mask))
        elif kind == "dropout":
            out, keep = layers.dropout(cur, spec.rate, rng, training)
            entries.append((spec, keep))
        elif kind == "relu":
            out = layers.relu_forward(cur)
            entries.append((spec, cur))
        elif kind == "sigmoid":
            out = layers.sigmoid_forward(cur)
            entries.append((spec, out))
        else:
            raise ShapeError(f"unknown layer kind {kind!r}")
        cur = out
    return cur, Tape(graph, entries, cur)


def backward(graph: ModelGraph, tape: Tape, d_y: Tensor):
    """Chain the layer backward passes; returns (param grads, d_input)."""
    if tape.graph is not graph and tape.graph != graph:
        raise ShapeError("tape was recorded on a different graph")
    if d_y.data.shape != tape.output.data.shape:
        raise ShapeError(f"d_y shape {tuple(d_y.data.shape)} != "
                         f"output shape {tuple(tape.output.data.shape)}")
    grads: Dict[str, np.ndarray] = {}
    d = d_y
    for spec, saved in reversed(tape.entries):
        kind = spec.kind
        if kind == "pad":
            d = layers.crop_rows(d, *spec.rows)
        elif kind == "crop":
            d = layers.zeropad_rows(d, *spec.rows)
        elif kind == "conv":
            x_in, p = saved
            lg = layers.conv2d_backward(x_in, p, layers.flush_negligible(d))
            grads[f"{spec.name}.weight"] = lg.d_weights.data
            grads[f"{spec.name}.bias"] = lg.d_bias
            d = lg.d_input
        elif kind == "deconv":
            x_in, p = saved
            lg = layers.convtranspose2d_backward(x_in, p,
                                                 layers.flush_negligible(d))
            grads[f"{spec.name}.weight"] = lg.d_weights.data
            grads[f"{spec.name}.bias"] = lg.d_bias
            d = lg.d_input
        elif kind == "pool":
            d = layers.maxpool2x2_backward(saved, d)
        elif kind == "dropout":
            d = layers.dropout_backward(d, saved, spec.rate)
        elif kind == "relu":
            d = layers.relu_backward(saved, d)
        elif kind == "sigmoid":
            d = layers.sigmoid_backward(saved, d)
    return grads, d


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    adam: Optional[AdamState]
    epoch: int
    seed: int


def _write_tensor(out, name: str, arr: np.ndarray):
    nb = name.encode("utf-8")
    arr32 = np.ascontiguousarray(arr, np.float32)
    out.write(struct.pack("<H", len(nb)))
    out.write(nb)
    out.write(struct.pack("<BB", 0, arr32.ndim))
    out.write(struct.pack(f"<{arr32.ndim}I", *arr32.shape))
    out.write(arr32.astype("<f4", copy=False).tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_tensor(f):
    (name_len,) = struct.unpack("<H", _read_exact(f, 2))
    name = _read_exact(f, name_len).decode("utf-8")
    code, rank = struct.unpack("<BB", _read_exact(f, 2))
    if code not in _DTYPE_CODES:
        raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    n = 1
    for d in dims:
        n *= d
    raw = _read_exact(f, n * 4)
    arr = np.frombuffer(raw, "<f4").reshape(dims).astype(np.float32, copy=True)
    arr.flags.writeable = False
    return name, arr


def save_checkpoint(path, ckpt: Checkpoint):
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        _write_tensor(buf, name, arr)
    if ckpt.adam is not None:
        st = ckpt.adam
        buf.write(ADAM_MAGIC)
        buf.write(struct.pack("<I", st.t))
        buf.write(struct.pack("<d", st.lr))
        buf.write(struct.pack("<I", 2 * len(st.m)))
        for name in st.m:
            _write_tensor(buf, f"m:{name}", st.m[name])
            _write_tensor(buf, f"v:{name}", st.v[name])
    buf.write(struct.pack("<I", ckpt.epoch))
    buf.write(struct.pack("<Q", ckpt.seed))
    data = buf.getvalue()
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        params: Dict[str, np.ndarray] = {}
        for _ in range(count):
            name, arr = _read_tensor(f)
            if name in params:
                raise CheckpointError(f"duplicate parameter {name!r}")
            params[name] = arr
        adam = None
        marker = _read_exact(f, 4)
        if marker == ADAM_MAGIC:
            (t,) = struct.unpack("<I", _read_exact(f, 4))
            (lr,) = struct.unpack("<d", _read_exact(f, 8))
            (n_entries,) = struct.unpack("<I", _read_exact(f, 4))
            m: Dict[str, np.ndarray] = {}
            v: Dict[str, np.ndarray] = {}
            for _ in range(n_entries):
                name, arr = _read_tensor(f)
                if name.startswith("m:"):
                    m[name[2:]] = arr
                elif name.startswith("v:"):
                    v[name[2:]] = arr
                else:
                    raise CheckpointError(f"unexpected moment tensor name {name!r}")
            if set(m) != set(params) or set(v) != set(params):
                raise CheckpointError("Adam moments do not cover the parameters")
            adam = AdamState(m=m, v=v, t=t, lr=lr)
            marker = _read_exact(f, 4)
        (epoch,) = struct.unpack("<I", marker)
        (seed,) = struct.unpack("<Q", _read_exact(f, 8))
        if f.read(1):
            raise CheckpointError("trailing bytes after checkpoint footer")
    return Checkpoint(params=params, adam=adam, epoch=epoch, seed=seed)


def check_params_match(graph: ModelGraph, params: Dict[str, np.ndarray]):
    """Verify a parameter dict covers the graph exactly (names and shapes)."""
    expected = {}
    in_ch = graph.input_shape[0]
    for spec in graph.layers:
        if spec.kind in ("conv", "deconv"):
            expected[f"{spec.name}.weight"] = (spec.out_ch, in_ch, spec.kernel, spec.kernel)
            expected[f"{spec.name}.bias"] = (spec.out_ch,)
            in_ch = spec.out_ch
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {shape}")


def parameter_count(params: Dict[str, np.ndarray]) -> int:
    return sum(int(p.size) for p in params.values())
