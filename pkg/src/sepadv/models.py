"""Differentiable toy separation models with hand-written backward passes.

Two architectures are provided:

``mask_freq``
    Frequency-domain, mask-based. For every STFT frame the log-power bins go
    through a dense tanh layer (64 units) and a dense sigmoid layer that emits
    one mask per source. Each mask multiplies the complex mixture STFT and the
    result is inverted with ``istft``.
``conv_time``
    Time-domain, direct estimation. Three same-padded 1-D convolutions
    (16 ch / tanh, 16 ch / tanh, ``num_sources`` ch / linear), kernel 15.

Channels of a multichannel input are processed independently with shared
weights. Weights are stored as float32 values (so the on-disk format is
lossless) and all arithmetic is done in float64.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import dsp, rng
from .audio_io import AudioClip, atomic_write_bytes
from .errors import FormatError, NumericError, ParameterError

ARCHITECTURES = ("mask_freq", "conv_time")
MAGIC = b"SEPADV1\x00"

MASK_HIDDEN = 64
FEATURE_FLOOR = 1.0
DEFAULT_LR = {"mask_freq": 40.0, "conv_time": 0.3}
CONV_CHANNELS = 16
CONV_KERNEL = 15


def weight_shapes(arch, num_sources, stft_cfg=None):
    """Ordered ``{name: shape}`` for an architecture."""
    if arch == "mask_freq":
        bins = (stft_cfg or dsp.StftConfig()).bins
        return {
            "dense1.weight": (MASK_HIDDEN, bins),
            "dense1.bias": (MASK_HIDDEN,),
            "dense2.weight": (num_sources * bins, MASK_HIDDEN),
            "dense2.bias": (num_sources * bins,),
        }
    if arch == "conv_time":
        k, c = CONV_KERNEL, CONV_CHANNELS
        return {
            "conv1.weight": (c, 1, k),
            "conv1.bias": (c,),
            "conv2.weight": (c, c, k),
            "conv2.bias": (c,),
            "conv3.weight": (num_sources, c, k),
            "conv3.bias": (num_sources,),
        }
    raise ParameterError(f"unknown architecture {arch!r}; expected one of {ARCHITECTURES}")


@dataclass(frozen=True, eq=False)
class SeparationModel:
    architecture: str
    weights: dict
    num_sources: int
    source_names: tuple
    stft_cfg: dsp.StftConfig = None
    seed: int = None
    sample_rate: int = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        shapes = weight_shapes(self.architecture, self.num_sources, self.stft_cfg)
        if self.architecture == "mask_freq" and self.stft_cfg is None:
            object.__setattr__(self, "stft_cfg", dsp.StftConfig())
        if len(self.source_names) != self.num_sources:
            raise ParameterError("one source name per source is required")
        frozen = {}
        for name, shape in shapes.items():
            if name not in self.weights:
                raise ParameterError(f"missing weight tensor {name!r}")
            w = np.array(self.weights[name], dtype=np.float32)
            if w.shape != shape:
                raise ParameterError(f"tensor {name!r} has shape {w.shape}, expected {shape}")
            if not np.all(np.isfinite(w)):
                raise NumericError(f"tensor {name!r} is not finite")
            w.setflags(write=False)
            frozen[name] = w
        extra = set(self.weights) - set(shapes)
        if extra:
            raise ParameterError(f"unexpected weight tensors {sorted(extra)}")
        object.__setattr__(self, "weights", frozen)
        object.__setattr__(self, "source_names", tuple(self.source_names))

    def w(self, name):
        return self.weights[name].astype(np.float64)

    def with_weights(self, weights, **changes):
        kwargs = dict(
            architecture=self.architecture, weights=weights, num_sources=self.num_sources,
            source_names=self.source_names, stft_cfg=self.stft_cfg, seed=self.seed,
            sample_rate=self.sample_rate, meta=dict(self.meta),
        )
        kwargs.update(changes)
        return SeparationModel(**kwargs)

    def source_index(self, key):
        if isinstance(key, str):
            if key not in self.source_names:
                raise ParameterError(f"unknown source {key!r}; model has {self.source_names}")
            return self.source_names.index(key)
        if not 0 <= key < self.num_sources:
            raise ParameterError(f"source index {key} out of range")
        return int(key)


def init_model(arch, num_sources, seed, source_names=None, stft_cfg=None, sample_rate=None):
    """Deterministic uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization."""
    if num_sources < 1:
        raise ParameterError("num_sources must be at least 1")
    shapes = weight_shapes(arch, num_sources, stft_cfg)
    weights = {}
    for name, shape in shapes.items():
        layer = name.split(".")[0]
        fan_in = int(np.prod(shapes[f"{layer}.weight"][1:]))
        bound = 1.0 / np.sqrt(fan_in)
        gen = rng.stream(seed, f"init:{arch}:{name}")
        weights[name] = gen.uniform(-bound, bound, shape).astype(np.float32)
    if source_names is None:
        source_names = tuple(f"source{i}" for i in range(num_sources))
    return SeparationModel(
        arch, weights, num_sources, tuple(source_names),
        stft_cfg=stft_cfg if arch == "mask_freq" else None,
        seed=seed, sample_rate=sample_rate,
    )


# --------------------------------------------------------------------------
# Convolution primitives
# --------------------------------------------------------------------------


def conv1d_same(x, weight, bias=None):
    """Same-padded cross-correlation. ``x`` (B, Cin, N), ``weight`` (Cout, Cin, K)."""
    k = weight.shape[-1]
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, k - 1 - pad)))
    patches = sliding_window_view(xp, k, axis=-1)  # (B, Cin, N, K)
    out = np.tensordot(patches, weight, axes=([1, 3], [1, 2]))  # (B, N, Cout)
    out = out.transpose(0, 2, 1)
    if bias is not None:
        out = out + bias[None, :, None]
    return out


def conv1d_same_vjp(x, weight, grad_out):
    """Gradients of :func:`conv1d_same` w.r.t. input, weight and bias."""
    k = weight.shape[-1]
    pad = k // 2
    flipped = weight[:, :, ::-1].transpose(1, 0, 2)
    # input gradient is a same-padded correlation with the flipped, transposed kernel
    gp = np.pad(grad_out, ((0, 0), (0, 0), (k - 1 - pad, pad)))
    g_patches = sliding_window_view(gp, k, axis=-1)
    grad_x = np.tensordot(g_patches, flipped, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, k - 1 - pad)))
    patches = sliding_window_view(xp, k, axis=-1)
    grad_w = np.tensordot(grad_out, patches, axes=([0, 2], [0, 2]))
    grad_b = grad_out.sum(axis=(0, 2))
    return grad_x, grad_w, grad_b


# --------------------------------------------------------------------------
# Forward / backward
# --------------------------------------------------------------------------


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _check_input(model, x):
    if not isinstance(x, AudioClip):
        raise ParameterError("model input must be an AudioClip")
    if model.sample_rate is not None and x.sample_rate != model.sample_rate:
        raise ParameterError(
            f"model expects {model.sample_rate} Hz input, got {x.sample_rate} Hz"
        )
    if model.architecture == "mask_freq":
        model.stft_cfg.num_frames(x.num_samples)


def _forward_mask(model, samples):
    cfg = model.stft_cfg
    length = samples.shape[-1]
    z = dsp.stft_array(samples, cfg)  # (C, T, K)
    power = z.real ** 2 + z.imag ** 2
    feat = np.log1p(power / FEATURE_FLOOR)
    h = np.tanh(feat @ model.w("dense1.weight").T + model.w("dense1.bias"))
    logits = h @ model.w("dense2.weight").T + model.w("dense2.bias")
    masks = _sigmoid(logits).reshape(z.shape[:2] + (model.num_sources, cfg.bins))
    est = masks * z[:, :, None, :]  # (C, T, S, K)
    out = dsp.istft_array(est.transpose(2, 0, 1, 3), cfg, length)  # (S, C, N)
    cache = {"z": z, "power": power, "feat": feat, "h": h, "masks": masks}
    return out, cache


def _backward_mask(model, cache, cot, length):
    cfg = model.stft_cfg
    z, power, feat, h, masks = (cache[k] for k in ("z", "power", "feat", "h", "masks"))
    g = dsp.istft_adjoint_array(cot, cfg, length).transpose(1, 2, 0, 3)  # (C, T, S, K)
    grad_masks = g.real * z.real[:, :, None, :] + g.imag * z.imag[:, :, None, :]
    grad_z = np.sum(masks * g, axis=2)
    grad_logits = (grad_masks * masks * (1.0 - masks)).reshape(h.shape[:2] + (-1,))
    w1, w2 = model.w("dense1.weight"), model.w("dense2.weight")
    grads = {
        "dense2.weight": np.einsum("cto,cth->oh", grad_logits, h),
        "dense2.bias": grad_logits.sum(axis=(0, 1)),
    }
    grad_a = (grad_logits @ w2) * (1.0 - h ** 2)
    grads["dense1.weight"] = np.einsum("cth,ctk->hk", grad_a, feat)
    grads["dense1.bias"] = grad_a.sum(axis=(0, 1))
    grad_power = (grad_a @ w1) / (FEATURE_FLOOR + power)
    grad_z = grad_z + 2.0 * z * grad_power
    grad_x = dsp.stft_adjoint_array(grad_z, cfg, length)
    return grad_x, grads


def _forward_conv(model, samples):
    x0 = samples[:, None, :]  # channels act as the batch axis
    a1 = conv1d_same(x0, model.w("conv1.weight"), model.w("conv1.bias"))
    h1 = np.tanh(a1)
    a2 = conv1d_same(h1, model.w("conv2.weight"), model.w("conv2.bias"))
    h2 = np.tanh(a2)
    out = conv1d_same(h2, model.w("conv3.weight"), model.w("conv3.bias"))  # (C, S, N)
    return out.transpose(1, 0, 2), {"x0": x0, "h1": h1, "h2": h2}


def _backward_conv(model, cache, cot, length):
    x0, h1, h2 = cache["x0"], cache["h1"], cache["h2"]
    g3 = cot.transpose(1, 0, 2)
    grads = {}
    g, grads["conv3.weight"], grads["conv3.bias"] = conv1d_same_vjp(h2, model.w("conv3.weight"), g3)
    g = g * (1.0 - h2 ** 2)
    g, grads["conv2.weight"], grads["conv2.bias"] = conv1d_same_vjp(h1, model.w("conv2.weight"), g)
    g = g * (1.0 - h1 ** 2)
    g, grads["conv1.weight"], grads["conv1.bias"] = conv1d_same_vjp(x0, model.w("conv1.weight"), g)
    return g[:, 0, :], grads


_FORWARD = {"mask_freq": _forward_mask, "conv_time": _forward_conv}
_BACKWARD = {"mask_freq": _backward_mask, "conv_time": _backward_conv}


def forward_array(model, samples):
    """Forward pass on a raw ``(channels, N)`` array; returns ``(S, C, N)``."""
    out, _ = _FORWARD[model.architecture](model, np.asarray(samples, dtype=np.float64))
    return out


def forward(model, x):
    """Separate ``x`` into one clip per source."""
    _check_input(model, x)
    out = forward_array(model, x.samples)
    if not np.all(np.isfinite(out)):
        raise NumericError("forward pass produced non-finite output")
    return [AudioClip(o, x.sample_rate) for o in out]


def vjp_array(model, samples, cotangent, weight_grads=False):
    """Vector-Jacobian product of the forward map at ``samples``.

    ``cotangent`` has the output shape ``(S, C, N)``. Returns the input
    gradient, plus a dict of weight gradients when ``weight_grads`` is set.
    """
    samples = np.asarray(samples, dtype=np.float64)
    out, cache = _FORWARD[model.architecture](model, samples)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != out.shape:
        raise ParameterError(f"cotangent shape {cot.shape} != output shape {out.shape}")
    grad_x, grads = _BACKWARD[model.architecture](model, cache, cot, samples.shape[-1])
    if not np.all(np.isfinite(grad_x)):
        bad = [k for k, v in grads.items() if not np.all(np.isfinite(v))]
        raise NumericError(f"non-finite input gradient (non-finite weight grads: {bad})")
    return (grad_x, grads) if weight_grads else grad_x


@dataclass(frozen=True, eq=False)
class GradientRequest:
    """Input clip, cotangent on the target source's output, target index."""

    input: AudioClip
    cotangent: np.ndarray
    target_source: int = 0

    def __post_init__(self):
        cot = np.asarray(self.cotangent, dtype=np.float64)
        if cot.shape != self.input.shape:
            raise ParameterError(
                f"cotangent shape {cot.shape} must match input shape {self.input.shape}"
            )
        object.__setattr__(self, "cotangent", cot)


def input_gradient(model, req):
    """``J^T v`` for the target source's output with respect to the input."""
    _check_input(model, req.input)
    target = model.source_index(req.target_source)
    full = np.zeros((model.num_sources,) + req.input.shape)
    full[target] = req.cotangent
    grad = vjp_array(model, req.input.samples, full)
    return AudioClip(grad, req.input.sample_rate)


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------


def _header(model):
    shapes = weight_shapes(model.architecture, model.num_sources, model.stft_cfg)
    return {
        "architecture": model.architecture,
        "num_sources": model.num_sources,
        "source_names": list(model.source_names),
        "stft": model.stft_cfg.to_dict() if model.stft_cfg else None,
        "seed": model.seed,
        "sample_rate": model.sample_rate,
        "meta": model.meta,
        "tensors": [
            {"name": n, "shape": list(s), "dtype": "float32"} for n, s in shapes.items()
        ],
    }


def dump_weights(model):
    header = json.dumps(_header(model), sort_keys=True).encode("utf-8")
    payload = b"".join(
        np.ascontiguousarray(model.weights[t["name"]], dtype="<f4").tobytes()
        for t in _header(model)["tensors"]
    )
    return MAGIC + struct.pack("<Q", len(header)) + header + payload


def save_weights(model, path):
    atomic_write_bytes(path, dump_weights(model))


def parse_weights(data, source="<bytes>"):
    if data[:8] != MAGIC:
        raise FormatError(f"{source}: bad magic bytes")
    if len(data) < 16:
        raise FormatError(f"{source}: truncated header length")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if 16 + hlen > len(data):
        raise FormatError(f"{source}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
        arch = header["architecture"]
        num_sources = int(header["num_sources"])
        tensors = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: malformed header ({exc})") from exc
    stft_cfg = dsp.StftConfig(**header["stft"]) if header.get("stft") else None
    try:
        expected = weight_shapes(arch, num_sources, stft_cfg)
    except ParameterError as exc:
        raise FormatError(f"{source}: {exc}") from exc
    names = [t.get("name") for t in tensors]
    if names != list(expected):
        raise FormatError(f"{source}: tensor manifest {names} != expected {list(expected)}")
    payload = data[16 + hlen:]
    weights = {}
    offset = 0
    for t in tensors:
        shape = tuple(t["shape"])
        if shape != expected[t["name"]]:
            raise FormatError(
                f"{source}: tensor {t['name']!r} has manifest shape {shape}, "
                f"architecture requires {expected[t['name']]}"
            )
        if t.get("dtype", "float32") != "float32":
            raise FormatError(f"{source}: tensor {t['name']!r} has unsupported dtype {t['dtype']}")
        nbytes = int(np.prod(shape)) * 4
        chunk = payload[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{source}: payload truncated in tensor {t['name']!r}")
        weights[t["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape)
        offset += nbytes
    if offset != len(payload):
        raise FormatError(f"{source}: {len(payload) - offset} trailing payload bytes")
    return SeparationModel(
        arch, weights, num_sources, tuple(header["source_names"]),
        stft_cfg=stft_cfg, seed=header.get("seed"),
        sample_rate=header.get("sample_rate"), meta=header.get("meta") or {},
    )


def load_weights(path):
    with open(path, "rb") as fh:
        return parse_weights(fh.read(), source=str(path))


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def dataset_mse(model, data):
    """Mean squared error of ``forward(mixture)`` against the true sources."""
    errs = [
        np.mean((forward_array(model, s.mixture.samples) - s.stacked()) ** 2) for s in data
    ]
    return float(np.mean(errs))


def fit_toy(model, data, epochs, lr, seed, source_names=None):
    """Train ``model`` with plain SGD on per-clip MSE.

    Each epoch visits every clip once in a seed-determined order and takes one
    step per clip. Weights are rounded to float32 after every step.

    Returns
    -------
    model : SeparationModel
    trace : list of float
        Mean per-clip MSE per epoch, measured before each step.
    """
    data = list(data)
    if not data:
        raise ParameterError("training data is empty")
    for s in data:
        if len(s) != model.num_sources:
            raise ParameterError(
                f"source set has {len(s)} sources, model expects {model.num_sources}"
            )
        if s.mixture.shape != data[0].mixture.shape:
            raise ParameterError("all training clips must share one shape")
    if epochs < 0 or lr <= 0:
        raise ParameterError("epochs must be >= 0 and lr > 0")
    if epochs == 0:
        return model, []

    weights = {k: v.astype(np.float64) for k, v in model.weights.items()}
    current = model
    trace = []
    for epoch in range(epochs):
        order = rng.stream(seed, f"fit:epoch:{epoch}").permutation(len(data))
        losses = []
        for i in order:
            mix = data[i].mixture.samples
            target = data[i].stacked()
            out, cache = _FORWARD[current.architecture](current, mix)
            resid = out - target
            loss = float(np.mean(resid ** 2))
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at epoch {epoch}", iteration=epoch)
            losses.append(loss)
            _, grads = _BACKWARD[current.architecture](
                current, cache, 2.0 * resid / resid.size, mix.shape[-1]
            )
            with np.errstate(over="ignore", invalid="ignore"):
                for k in weights:
                    weights[k] = (weights[k] - lr * grads[k]).astype(np.float32).astype(np.float64)
            if not all(np.all(np.isfinite(v)) for v in weights.values()):
                raise NumericError(f"training diverged at epoch {epoch}", iteration=epoch)
            current = current.with_weights(weights)
        trace.append(float(np.mean(losses)))
    meta = dict(model.meta, trained_epochs=epochs, lr=lr, fit_seed=seed)
    return current.with_weights(current.weights, meta=meta), trace
