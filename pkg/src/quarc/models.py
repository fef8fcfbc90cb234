"""Small MLP / CNN classifiers with fake-quant hooks and named taps.

A tap is the pre-activation output of an intermediate layer, flattened to
``[B, D]``. The logits layer can never be a tap.
"""
from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError, FormatError
from .quantization import ACTIVATION, WEIGHT, QuantSpec, fake_quant, make_spec
from .tensor import Tensor

CHECKPOINT_VERSION = 1


@dataclass
class ModelDef:
    arch: str  # "mlp" | "cnn"
    input_shape: tuple
    widths: list  # hidden widths (mlp) or per-block channels (cnn)
    num_classes: int
    taps: Optional[list] = None  # None -> penultimate block
    strides: Optional[list] = None  # cnn only; default 2 per block
    quantize_first_last: bool = False

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.widths = [int(w) for w in self.widths]
        if self.arch not in ("mlp", "cnn"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.arch == "cnn":
            if len(self.input_shape) != 3:
                raise ConfigError("cnn input_shape must be (C, H, W)")
            if not 1 <= len(self.widths) <= 4:
                raise ConfigError("cnn supports 1 to 4 conv blocks")
            if self.strides is None:
                self.strides = [2] * len(self.widths)
            if len(self.strides) != len(self.widths):
                raise ConfigError("one stride per conv block")
        elif len(self.input_shape) != 1:
            raise ConfigError("mlp input_shape must be (D,)")
        hidden = self.layer_names[:-1]
        if self.taps is None:
            self.taps = hidden[-1:]
        self.taps = list(self.taps)
        for t in self.taps:
            if t == self.layer_names[-1]:
                raise ConfigError("the logits layer cannot be a tap")
            if t not in hidden:
                raise ConfigError(f"tap {t!r} does not name a hidden layer")

    @property
    def layer_names(self) -> list:
        if self.arch == "mlp":
            return [f"fc{i + 1}" for i in range(len(self.widths) + 1)]
        return [f"conv{i + 1}" for i in range(len(self.widths))] + ["fc"]

    def weight_shapes(self) -> dict:
        """layer -> (weight shape, bias shape)."""
        shapes = {}
        if self.arch == "mlp":
            dims = [self.input_shape[0], *self.widths, self.num_classes]
            for name, (a, b) in zip(self.layer_names, zip(dims[:-1], dims[1:])):
                shapes[name] = ((a, b), (b,))
        else:
            cin = self.input_shape[0]
            for i, cout in enumerate(self.widths):
                shapes[f"conv{i + 1}"] = ((9 * cin, cout), (cout,))
                cin = cout
            shapes["fc"] = ((cin, self.num_classes), (self.num_classes,))
        return shapes

    def param_count(self) -> int:
        return sum(math.prod(w) + math.prod(b) for w, b in self.weight_shapes().values())

    def quantized_layers(self) -> list:
        names = self.layer_names
        return list(names) if self.quantize_first_last else names[1:-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelDef":
        return cls(**d)


@dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor
    taps: dict = field(default_factory=dict)  # ordered tap-name -> Tensor[B, D]


class Model:
    """A parameterised instance of a :class:`ModelDef`.

    ``quant`` maps layer name to a ``(weight_spec, activation_spec)`` pair;
    an empty map means full precision.
    """

    def __init__(self, mdef: ModelDef, params: dict, quant: Optional[dict] = None):
        self.mdef = mdef
        self.params = params
        self.quant = quant or {}
        self.bypass_quant = False
        self.forward_calls = 0

    @classmethod
    def init(cls, mdef: ModelDef, seed: int = 0, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(seed)
        params = {}
        for name, (ws, bs) in mdef.weight_shapes().items():
            std = math.sqrt(2.0 / ws[0])
            params[f"{name}.weight"] = Tensor(rng.normal(0.0, std, ws).astype(dtype), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(bs, dtype=dtype), requires_grad=True)
        return cls(mdef, params)

    @property
    def precision(self) -> str:
        return "quantized" if self.quant else "full"

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self) -> dict:
        """Trainable tensors, including learnable quantization scales."""
        out = dict(self.params)
        for layer, (ws, as_) in self.quant.items():
            if ws is not None and ws.learnable:
                out[f"{layer}.w_scale"] = ws.scale
            if as_ is not None and as_.learnable:
                out[f"{layer}.a_scale"] = as_.scale
        return out

    def quant_specs(self) -> list:
        return [s for pair in self.quant.values() for s in pair if s is not None]

    def copy(self) -> "Model":
        m = Model(self.mdef, {}, {})
        m.params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        m.quant = {k: tuple(copy.deepcopy(s) for s in pair) for k, pair in self.quant.items()}
        m.bypass_quant = self.bypass_quant
        return m

    def freeze(self) -> None:
        for p in self.parameters().values():
            p.requires_grad = False

    # -- forward -----------------------------------------------------------

    def _layer_inputs(self, name: str, h: Tensor, first: bool) -> tuple:
        w = self.params[f"{name}.weight"]
        if self.bypass_quant or name not in self.quant:
            return h, w
        ws, as_ = self.quant[name]
        if as_ is not None and not first:
            h = fake_quant(h, as_)
        if ws is not None:
            w = fake_quant(w, ws)
        return h, w

    def forward(self, batch, record_inputs: Optional[dict] = None) -> ForwardResult:
        x = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        if tuple(x.shape[1:]) != self.mdef.input_shape:
            raise DimensionError(f"batch shape {x.shape} does not match input {self.mdef.input_shape}")
        x = Tensor(x.astype(self.dtype, copy=False))
        self.forward_calls += 1
        taps = {}
        names = self.mdef.layer_names
        B = x.shape[0]
        if self.mdef.arch == "mlp":
            h = x
            for i, name in enumerate(names):
                if record_inputs is not None:
                    record_inputs[name] = h.data
                hin, w = self._layer_inputs(name, h, i == 0)
                z = T.add_bias(T.matmul(hin, w), self.params[f"{name}.bias"])
                if name in self.mdef.taps:
                    taps[name] = z
                h = z if i == len(names) - 1 else T.relu(z)
            logits = h
        else:
            h = T.transpose(x, (0, 2, 3, 1))
            for i, name in enumerate(names[:-1]):
                if record_inputs is not None:
                    record_inputs[name] = h.data
                hin, w = self._layer_inputs(name, h, i == 0)
                cols = T.im2col(hin, 3, self.mdef.strides[i], 1)
                z = T.add_bias(T.matmul(cols, w), self.params[f"{name}.bias"])
                Ho = (h.shape[1] - 1) // self.mdef.strides[i] + 1
                Wo = (h.shape[2] - 1) // self.mdef.strides[i] + 1
                z = T.reshape(z, (B, Ho, Wo, w.shape[1]))
                if name in self.mdef.taps:
                    taps[name] = T.reshape(z, (B, -1))
                h = T.relu(z)
            pooled = T.mean(T.reshape(h, (B, -1, h.shape[3])), axis=1)
            if record_inputs is not None:
                record_inputs["fc"] = pooled.data
            hin, w = self._layer_inputs("fc", pooled, False)
            logits = T.add_bias(T.matmul(hin, w), self.params["fc.bias"])
        ordered = {t: taps[t] for t in self.mdef.taps}
        return ForwardResult(logits=logits, probs=T.softmax(logits), taps=ordered)

    __call__ = forward


def clone_as_quantized(fp: Model, bits_w: int, bits_a: Optional[int] = None, calib=None,
                       learnable_scale: bool = True) -> Model:
    """Deep-copy ``fp`` and attach calibrated fake-quant specs.

    Activation specs need ``calib``, one input batch run through ``fp``.
    """
    if fp.quant:
        raise ContractError("clone_as_quantized expects a full-precision model")
    if bits_w < 2 or (bits_a is not None and bits_a < 2):
        raise ConfigError("bitwidths must be >= 2")
    q = fp.copy()
    inputs = {}
    if bits_a is not None:
        if calib is None:
            raise ConfigError("activation quantization needs a calibration batch")
        with T.no_grad():
            fp.forward(calib, record_inputs=inputs)
        fp.forward_calls -= 1
    dtype = fp.dtype
    for i, name in enumerate(fp.mdef.quantized_layers()):
        w = q.params[f"{name}.weight"]
        ws = make_spec(w.data, bits_w, WEIGHT, learnable_scale, dtype)
        as_ = None
        if bits_a is not None and name != fp.mdef.layer_names[0]:
            acts = inputs[name]
            as_ = make_spec(acts, bits_a, ACTIVATION, learnable_scale, dtype,
                            n_elements=int(np.prod(acts.shape[1:])))
        q.quant[name] = (ws, as_)
    return q


def effective_weights(model: Model) -> dict:
    """Weights as the forward pass sees them (quantized where applicable)."""
    from .quantization import quantize_forward

    out = {}
    for name in model.mdef.layer_names:
        w = model.params[f"{name}.weight"].data
        ws = model.quant.get(name, (None, None))[0]
        out[name] = quantize_forward(w, ws) if ws is not None and not model.bypass_quant else w
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path) -> Path:
    """Write an ``.npz`` archive: ``param/<name>`` arrays plus a ``meta`` JSON blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format": "quarc-checkpoint",
        "version": CHECKPOINT_VERSION,
        "model_def": model.mdef.to_dict(),
        "dtype": str(model.dtype),
        "quant": {
            layer: [s.to_dict() if s is not None else None for s in pair]
            for layer, pair in model.quant.items()
        },
    }
    arrays = {f"param/{k}": v.data for k, v in model.params.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> Model:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"checkpoint not found: {path}")
    try:
        with np.load(path) as z:
            meta = json.loads(bytes(z["meta"]).decode())
            arrays = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from None
    if meta.get("format") != "quarc-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint format/version")
    mdef = ModelDef.from_dict(meta["model_def"])
    dtype = np.dtype(meta["dtype"])
    params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in arrays.items()}
    quant = {
        layer: tuple(QuantSpec.from_dict(s, dtype) if s is not None else None for s in pair)
        for layer, pair in meta["quant"].items()
    }
    return Model(mdef, params, quant)
