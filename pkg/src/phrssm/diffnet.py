"""Small differentiable networks on top of torch autograd (float64 throughout).

Every learned component in the package is built from :class:`MLP` or
:class:`ScalarField`.  Gradients, Hessian-vector products and parameter
gradients are thin wrappers around ``torch.autograd`` with explicit dimension
checks, plus a flat :class:`ParamVector` view and a JSON checkpoint container
whose round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import torch
from torch import nn

from .errors import DimensionError, VersionError

DTYPE = torch.float64
CHECKPOINT_FORMAT = "phrssm-checkpoint"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = {
    "tanh": nn.Tanh,
    "softplus": nn.Softplus,
    "silu": nn.SiLU,
}


def derive_seed(seed: int, tag: str) -> int:
    """Stable 63-bit seed for a named stream, independent of creation order."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def make_generator(seed: int, tag: str) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, tag))
    return gen


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=dtype)


class MLP(nn.Module):
    """Feed-forward net with smooth activations and seeded orthogonal init.

    ``widths`` lists the hidden layer sizes; an empty list gives a single
    affine map.  ``out_scale`` multiplies the initial output-layer weights,
    which keeps freshly built heads close to their bias.
    """

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        widths: Sequence[int] = (64, 64),
        activation: str = "tanh",
        generator: torch.Generator | None = None,
        out_scale: float = 1.0,
    ):
        super().__init__()
        if activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.widths = [int(w) for w in widths]
        self.activation = activation
        dims = [self.in_dim, *self.widths, self.out_dim]
        layers: list[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1], dtype=DTYPE))
            if i < len(dims) - 2:
                layers.append(_ACTIVATIONS[activation]())
        self.net = nn.Sequential(*layers)
        self.reset_parameters(generator, out_scale)

    def reset_parameters(self, generator=None, out_scale=1.0):
        linears = [m for m in self.net if isinstance(m, nn.Linear)]
        with torch.no_grad():
            for i, lin in enumerate(linears):
                gain = out_scale if i == len(linears) - 1 else 1.0
                w = torch.empty_like(lin.weight)
                nn.init.orthogonal_(w, gain=gain, generator=generator)
                lin.weight.copy_(w)
                lin.bias.zero_()

    def arch(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "widths": list(self.widths),
            "activation": self.activation,
        }

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        return self.net(x)


class ScalarField(MLP):
    """An MLP with a single output, returned without the trailing axis."""

    def __init__(self, in_dim: int, widths=(64, 64), activation="tanh", generator=None, out_scale=1.0):
        super().__init__(in_dim, 1, widths, activation, generator, out_scale)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x).squeeze(-1)


def _check_input(field: MLP, x: torch.Tensor):
    if x.shape[-1] != field.in_dim:
        raise DimensionError(f"field expects dim {field.in_dim}, got {tuple(x.shape)}")


def eval_scalar(field: ScalarField, x) -> float:
    x = as_tensor(x)
    _check_input(field, x)
    with torch.no_grad():
        return float(field(x))


def grad_scalar(field: ScalarField, x, create_graph: bool = False) -> torch.Tensor:
    """Exact input gradient of a scalar field (batched inputs are summed over)."""
    x = as_tensor(x)
    _check_input(field, x)
    if not create_graph:
        x = x.detach()
    if not x.requires_grad:
        x = x.requires_grad_(True)
    with torch.enable_grad():
        out = field(x).sum()
        (g,) = torch.autograd.grad(out, x, create_graph=create_graph)
    return g


def hvp_scalar(field: ScalarField, x, direction, create_graph: bool = False) -> torch.Tensor:
    """Hessian-vector product by reverse-over-reverse differentiation."""
    x = as_tensor(x)
    v = as_tensor(direction)
    _check_input(field, x)
    if v.shape != x.shape:
        raise DimensionError(f"direction shape {tuple(v.shape)} != input shape {tuple(x.shape)}")
    if not create_graph:
        x = x.detach()
    if not x.requires_grad:
        x = x.requires_grad_(True)
    with torch.enable_grad():
        (g,) = torch.autograd.grad(field(x).sum(), x, create_graph=True)
        gv = (g * v).sum()
        if not gv.requires_grad:  # gradient independent of x (affine field)
            return torch.zeros_like(x)
        (hv,) = torch.autograd.grad(gv, x, create_graph=create_graph, allow_unused=True)
    return torch.zeros_like(x) if hv is None else hv


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


@dataclass
class ParamVector:
    """Flat float64 copy of a module's parameters with a name -> slice layout."""

    values: np.ndarray
    layout: dict[str, tuple[int, tuple[int, ...]]] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter values must be finite")
        covered = 0
        for name, (offset, shape) in sorted(self.layout.items(), key=lambda kv: kv[1][0]):
            if offset != covered:
                raise ValueError(f"layout gap or overlap at {name!r}")
            covered += int(np.prod(shape, dtype=np.int64))
        if covered != self.values.size:
            raise ValueError("layout does not cover the value array")

    def __getitem__(self, name: str) -> np.ndarray:
        offset, shape = self.layout[name]
        size = int(np.prod(shape, dtype=np.int64))
        return self.values[offset : offset + size].reshape(shape)

    @classmethod
    def from_tensors(cls, named: Iterable[tuple[str, torch.Tensor]]) -> "ParamVector":
        layout, chunks, offset = {}, [], 0
        for name, t in named:
            arr = t.detach().cpu().numpy().astype(np.float64).ravel()
            layout[name] = (offset, tuple(t.shape))
            chunks.append(arr)
            offset += arr.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, layout)

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamVector":
        return cls.from_tensors(module.named_parameters())

    def load_into(self, module: nn.Module):
        params = dict(module.named_parameters())
        if set(params) != set(self.layout):
            raise DimensionError("parameter layout does not match module")
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(torch.as_tensor(self[name], dtype=p.dtype))


def grad_params(module: nn.Module, loss: torch.Tensor) -> ParamVector:
    """Exact gradient of ``loss`` w.r.t. every parameter of ``module``.

    Parameters the loss does not reach (for instance because the path went
    through :func:`stop_gradient`) get an exact zero.
    """
    if loss.dim() != 0:
        raise DimensionError("loss must be a scalar")
    named = list(module.named_parameters())
    grads = torch.autograd.grad(
        loss, [p for _, p in named], retain_graph=True, allow_unused=True
    )
    return ParamVector.from_tensors(
        (n, torch.zeros_like(p) if g is None else g) for (n, p), g in zip(named, grads)
    )


def make_optimizer(params, lr: float, **kw) -> torch.optim.Adam:
    return torch.optim.Adam(list(params), lr=lr, **kw)


# ---------------------------------------------------------------- checkpoints


def _encode(obj: Any) -> Any:
    if isinstance(obj, torch.Tensor):
        t = obj.detach().cpu()
        return {
            "__tensor__": str(t.dtype).replace("torch.", ""),
            "shape": list(t.shape),
            "data": t.reshape(-1).tolist(),
        }
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": str(obj.dtype), "shape": list(obj.shape), "data": obj.ravel().tolist()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return {"__float__": repr(obj)}
    if isinstance(obj, dict):
        return {"__dict__": [[_encode(k), _encode(v)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return {"__seq__": type(obj).__name__, "items": [_encode(v) for v in obj]}
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def _decode(obj: Any) -> Any:
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            dtype = getattr(torch, obj["__tensor__"])
            return torch.tensor(obj["data"], dtype=dtype).reshape(obj["shape"])
        if "__ndarray__" in obj:
            return np.asarray(obj["data"], dtype=obj["__ndarray__"]).reshape(obj["shape"])
        if "__float__" in obj:
            return float(obj["__float__"])
        if "__dict__" in obj:
            return {_decode(k): _decode(v) for k, v in obj["__dict__"]}
        if "__seq__" in obj:
            items = [_decode(v) for v in obj["items"]]
            return tuple(items) if obj["__seq__"] == "tuple" else items
    return obj


def save_checkpoint(path, payload: dict, meta: dict | None = None) -> Path:
    """Write ``payload`` (nested dicts of tensors / arrays / scalars) as JSON.

    Floats are written with ``repr`` so loading returns bit-identical values.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "payload": _encode(payload),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc))
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[dict, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise VersionError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: checkpoint version {doc.get('version')} unsupported")
    return _decode(doc["payload"]), doc.get("meta", {})


def module_state(module: nn.Module) -> dict:
    return {"arch": getattr(module, "arch", lambda: {})(), "state": dict(module.state_dict())}


def load_module_state(module: nn.Module, state: dict):
    module.load_state_dict(state["state"])
