"""Shared-weight ensembles with rank-p Hadamard member factors.

Each member ``m`` of an :class:`EnsembleNet` uses, for every layer, the
effective weight ``W * sum_t outer(r[m, t], s[m, t])`` plus its own bias.  The
forward pass never materialises those weights: the input is scaled by ``r``,
pushed through the shared ``W`` and scaled by ``s`` (one path per rank
column).  :func:`materialize_member` builds the explicit weights for checking.

Also here: the plain :class:`BaselineNet` the ensemble is initialised from, and
checkpoint I/O for both.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .numerics import RngStream

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Architecture:
    """Layer layout. Dense profile sets ``in_dim``; image profile sets ``image_shape``."""

    n_classes: int = 2
    in_dim: int | None = 2
    hidden: tuple[int, ...] = (64, 64)
    image_shape: tuple[int, int, int] | None = None
    conv_channels: tuple[int, ...] = ()
    kernel_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        if (self.in_dim is None) == (self.image_shape is None):
            raise ValueError("set exactly one of in_dim and image_shape")
        if self.conv_channels and self.image_shape is None:
            raise ValueError("conv layers need an image_shape")
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def is_image(self) -> bool:
        return self.image_shape is not None

    def layer_specs(self) -> list[tuple[str, int, int]]:
        """(kind, fan_in, fan_out) per layer, conv layers first."""
        specs = []
        if self.is_image:
            c, h, w = self.image_shape
            for out_c in self.conv_channels:
                specs.append(("conv", c, out_c))
                c = out_c
            width = c * h * w
        else:
            width = self.in_dim
        for hdim in self.hidden:
            specs.append(("dense", width, hdim))
            width = hdim
        specs.append(("dense", width, self.n_classes))
        return specs

    def weight_shape(self, kind: str, fan_in: int, fan_out: int) -> tuple[int, ...]:
        if kind == "conv":
            return (fan_out, fan_in, self.kernel_size, self.kernel_size)
        return (fan_in, fan_out)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        d = dict(d)
        for key in ("hidden", "conv_channels", "image_shape"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


def _check_input(arch: Architecture, x: Tensor) -> None:
    want = arch.image_shape if arch.is_image else (arch.in_dim,)
    if x.ndim != len(want) + 1 or tuple(x.shape[1:]) != tuple(want):
        raise ShapeError(f"input shape {x.shape} does not match architecture input {want}")
    if x.shape[0] == 0:
        raise ShapeError("empty batch")


class BaselineNet:
    """Plain deterministic network trained with softmax cross-entropy."""

    evidential = False

    def __init__(self, arch: Architecture, weights: list[Tensor], biases: list[Tensor]):
        self.arch = arch
        self.weights = weights
        self.biases = biases

    @classmethod
    def init(cls, arch: Architecture, rng: RngStream) -> "BaselineNet":
        weights, biases = [], []
        for kind, fin, fout in arch.layer_specs():
            shape = arch.weight_shape(kind, fin, fout)
            fan_in = fin * (arch.kernel_size ** 2 if kind == "conv" else 1)
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            weights.append(Tensor(w, requires_grad=True))
            biases.append(Tensor(np.zeros(fout), requires_grad=True))
        return cls(arch, weights, biases)

    @property
    def n_members(self) -> int:
        return 1

    def parameters(self) -> list[Tensor]:
        return [*self.weights, *self.biases]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"layer.{i}.W"] = w
            out[f"layer.{i}.b"] = b
        return out

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        _check_input(self.arch, x)
        h = x
        specs = self.arch.layer_specs()
        pad = self.arch.kernel_size // 2
        for i, ((kind, _, _), w, b) in enumerate(zip(specs, self.weights, self.biases)):
            if kind == "conv":
                h = ad.conv2d(h, w, padding=pad) + b.reshape(1, -1, 1, 1)
            else:
                if h.ndim > 2:
                    h = h.reshape(h.shape[0], -1)
                h = h @ w + b
            if i < len(specs) - 1:
                h = ad.relu(h)
        return h

    __call__ = forward

    def member_logits(self, x) -> Tensor:
        z = self.forward(x)
        return z.reshape((1,) + z.shape)

    def member_probs(self, x) -> Tensor:
        return ad.exp(ad.log_softmax(self.member_logits(x), axis=-1))

    def weights_numpy(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(w.data.copy(), b.data.copy()) for w, b in zip(self.weights, self.biases)]


@dataclass
class SharedLayer:
    W: Tensor
    kind: str = "dense"


@dataclass
class MemberFactors:
    r: np.ndarray  # (p, fan_in)
    s: np.ndarray  # (p, fan_out)
    bias: np.ndarray  # (fan_out,)


class EnsembleNet:
    """``M`` members sharing one weight per layer, each with rank-``p`` factors.

    Factor tensors are stacked over members: ``r[l]`` is (M, p, fan_in),
    ``s[l]`` is (M, p, fan_out) and ``bias[l]`` is (M, fan_out).
    """

    evidential = True

    def __init__(self, arch: Architecture, shared: list[SharedLayer],
                 r: list[Tensor], s: list[Tensor], bias: list[Tensor]):
        specs = arch.layer_specs()
        if not (len(shared) == len(r) == len(s) == len(bias) == len(specs)):
            raise ShapeError("members must be aligned with layers")
        m, p = r[0].shape[0], r[0].shape[1]
        for (kind, fin, fout), layer, rl, sl, bl in zip(specs, shared, r, s, bias):
            if layer.W.shape != arch.weight_shape(kind, fin, fout):
                raise ShapeError(f"shared weight {layer.W.shape} vs architecture {arch.weight_shape(kind, fin, fout)}")
            if rl.shape != (m, p, fin) or sl.shape != (m, p, fout) or bl.shape != (m, fout):
                raise ShapeError("member factor shapes inconsistent with layer")
        self.arch = arch
        self.shared = shared
        self.r = r
        self.s = s
        self.bias = bias

    @property
    def n_members(self) -> int:
        return self.r[0].shape[0]

    @property
    def rank(self) -> int:
        return self.r[0].shape[1]

    @property
    def n_classes(self) -> int:
        return self.arch.n_classes

    def shared_parameters(self) -> list[Tensor]:
        return [layer.W for layer in self.shared]

    def factor_parameters(self) -> list[Tensor]:
        return [*self.r, *self.s, *self.bias]

    def parameters(self) -> list[Tensor]:
        return self.shared_parameters() + self.factor_parameters()

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.shared):
            out[f"shared.{i}.W"] = layer.W
        for i in range(len(self.shared)):
            out[f"member.{i}.r"] = self.r[i]
            out[f"member.{i}.s"] = self.s[i]
            out[f"member.{i}.bias"] = self.bias[i]
        return out

    def member_factors(self, m: int, layer: int) -> MemberFactors:
        self._check_member(m)
        return MemberFactors(self.r[layer].data[m].copy(), self.s[layer].data[m].copy(),
                             self.bias[layer].data[m].copy())

    def _check_member(self, m: int) -> None:
        if not 0 <= m < self.n_members:
            raise IndexError(f"member index {m} out of range for M={self.n_members}")

    def _run(self, x, members: slice) -> Tensor:
        x = ad.as_tensor(x)
        _check_input(self.arch, x)
        specs = self.arch.layer_specs()
        pad = self.arch.kernel_size // 2
        batch = x.shape[0]
        h = x
        shared_input = True
        for i, (kind, fin, fout) in enumerate(specs):
            r = self.r[i][members]
            s = self.s[i][members]
            b = self.bias[i][members]
            g, p = r.shape[0], r.shape[1]
            W = self.shared[i].W
            if kind == "conv":
                hh, ww = h.shape[-2], h.shape[-1]
                h6 = h.reshape((1, 1) + h.shape) if shared_input else h.reshape((g, 1) + h.shape[1:])
                hr = h6 * r.reshape(g, p, 1, fin, 1, 1)
                y = ad.conv2d(hr.reshape(g, p * batch, fin, hh, ww), W, padding=pad)
                y = y.reshape(g, p, batch, fout, hh, ww) * s.reshape(g, p, 1, fout, 1, 1)
                h = y.sum(axis=1) + b.reshape(g, 1, fout, 1, 1)
            else:
                if shared_input:
                    h4 = h.reshape(1, 1, batch, -1)
                else:
                    h4 = h.reshape(g, 1, batch, -1)
                hr = h4 * r.reshape(g, p, 1, fin)
                y = ad.matmul(hr, W) * s.reshape(g, p, 1, fout)
                h = y.sum(axis=1) + b.reshape(g, 1, fout)
            shared_input = False
            if i < len(specs) - 1:
                h = ad.relu(h)
        return h

    def member_forward(self, m: int, x) -> Tensor:
        """Logits (B, N) of member ``m``."""
        self._check_member(m)
        z = self._run(x, slice(m, m + 1))
        return z.reshape(z.shape[1:])

    def grouped_forward(self, x) -> Tensor:
        """Logits (M, B, N) for all members in one pass."""
        return self._run(x, slice(None))

    member_logits = grouped_forward

    def member_alpha(self, x) -> Tensor:
        from .evidential import alpha_from_logits
        return alpha_from_logits(self.grouped_forward(x))

    def member_probs(self, x) -> Tensor:
        alpha = self.member_alpha(x)
        return alpha / alpha.sum(axis=-1, keepdims=True)

    def copy(self) -> "EnsembleNet":
        clone = lambda t: Tensor(t.data.copy(), requires_grad=t.requires_grad)
        return EnsembleNet(self.arch, [SharedLayer(clone(l.W), l.kind) for l in self.shared],
                           [clone(t) for t in self.r], [clone(t) for t in self.s],
                           [clone(t) for t in self.bias])


def materialize_member(net: EnsembleNet, m: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Explicit (weight, bias) per layer for member ``m``."""
    net._check_member(m)
    out = []
    for layer, r, s, b in zip(net.shared, net.r, net.s, net.bias):
        rm, sm = r.data[m], s.data[m]
        mask = sum(np.outer(rm[t], sm[t]) for t in range(rm.shape[0]))  # (fan_in, fan_out)
        if layer.kind == "conv":
            weight = layer.W.data * mask.T[:, :, None, None]
        else:
            weight = layer.W.data * mask
        out.append((weight, b.data[m].copy()))
    return out


def plain_forward(arch: Architecture, weights: list[tuple[np.ndarray, np.ndarray]], x) -> np.ndarray:
    """Numpy forward pass through explicit per-layer weights."""
    x = ad.as_tensor(x)
    _check_input(arch, x)
    with ad.no_grad():
        net = BaselineNet(arch, [Tensor(w) for w, _ in weights], [Tensor(b) for _, b in weights])
        return net.forward(x).data


def parameter_count(arch: Architecture, n_members: int, rank: int) -> int:
    total = 0
    for kind, fin, fout in arch.layer_specs():
        total += int(np.prod(arch.weight_shape(kind, fin, fout)))
        total += n_members * rank * (fin + fout) + n_members * fout
    return total


def init_from_pretrained(baseline: BaselineNet | list, n_members: int, rank: int,
                         rng: RngStream, init_scale: float = 0.1,
                         arch: Architecture | None = None) -> EnsembleNet:
    """Build an ensemble around a trained baseline.

    Factors start at ``(1 + init_scale * noise) / sqrt(rank)`` so the rank
    paths sum to the all-ones mask when ``init_scale == 0``; member biases are
    copies of the baseline bias.
    """
    if isinstance(baseline, BaselineNet):
        arch = baseline.arch
        weights = baseline.weights_numpy()
    else:
        if arch is None:
            raise ValueError("arch is required with raw baseline weights")
        weights = [(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)) for w, b in baseline]
    specs = arch.layer_specs()
    if len(weights) != len(specs):
        raise ShapeError(f"baseline has {len(weights)} layers, architecture needs {len(specs)}")
    if n_members < 1 or rank < 1:
        raise ValueError("need n_members >= 1 and rank >= 1")
    scale = 1.0 / np.sqrt(rank)
    shared, rs, ss, bs = [], [], [], []
    for (kind, fin, fout), (w, b) in zip(specs, weights):
        if w.shape != arch.weight_shape(kind, fin, fout) or b.shape != (fout,):
            raise ShapeError(f"baseline layer {w.shape}/{b.shape} does not match {kind} {fin}->{fout}")
        shared.append(SharedLayer(Tensor(w.copy(), requires_grad=True), kind))
        r = scale * (1.0 + init_scale * rng.normal(size=(n_members, rank, fin)))
        s = scale * (1.0 + init_scale * rng.normal(size=(n_members, rank, fout)))
        rs.append(Tensor(r, requires_grad=True))
        ss.append(Tensor(s, requires_grad=True))
        bs.append(Tensor(np.tile(b, (n_members, 1)), requires_grad=True))
    return EnsembleNet(arch, shared, rs, ss, bs)


def parameter_checksum(model) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, t in sorted(model.named_parameters().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def save_checkpoint(path, model: EnsembleNet | BaselineNet, seed: int | None = None, **meta) -> Path:
    """Write ``model`` as an ``.npz`` container with a JSON header."""
    path = Path(path)
    kind = "ensemble" if isinstance(model, EnsembleNet) else "baseline"
    header = {"version": CHECKPOINT_VERSION, "kind": kind, "architecture": model.arch.to_dict(),
              "seed": seed, "meta": meta}
    arrays = {name: t.data for name, t in model.named_parameters().items()}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> tuple[EnsembleNet | BaselineNet, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arch = Architecture.from_dict(header["architecture"])
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    n_layers = len(arch.layer_specs())
    t = lambda a: Tensor(a, requires_grad=True)
    if header["kind"] == "ensemble":
        specs = arch.layer_specs()
        shared = [SharedLayer(t(arrays[f"shared.{i}.W"]), specs[i][0]) for i in range(n_layers)]
        model = EnsembleNet(arch, shared,
                            [t(arrays[f"member.{i}.r"]) for i in range(n_layers)],
                            [t(arrays[f"member.{i}.s"]) for i in range(n_layers)],
                            [t(arrays[f"member.{i}.bias"]) for i in range(n_layers)])
    elif header["kind"] == "baseline":
        model = BaselineNet(arch, [t(arrays[f"layer.{i}.W"]) for i in range(n_layers)],
                            [t(arrays[f"layer.{i}.b"]) for i in range(n_layers)])
    else:
        raise ValueError(f"unknown checkpoint kind {header['kind']!r}")
    return model, header
