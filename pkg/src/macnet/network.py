"""The material attribute-category network: trunk, pooling-tap heads, losses.

Every pooling stage of the VGG-style trunk feeds a fully-connected attribute
head whose clamped output is one per-layer attribute vector. A combination
head mixes the per-layer vectors into the final attribute vector. The
classifier reads only the last pooling stage, so the attribute branch never
feeds back into the category prediction.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .percept import BetaParams, check_grid, default_grid, kde_eval, kde_vjp, beta_pdf
from .tensor import Parameter, Tensor

MAGIC = b"MACCNN01"
INPUT_OFFSET = 0.5
INPUT_SCALE = 4.0
# attribute heads start centred in the clamp interval so few units begin saturated
ATTRIBUTE_BIAS = 0.5
ATTRIBUTE_GAIN = 0.1


@dataclass
class NetworkConfig:
    patch_size: int = 32
    channels: tuple = (16, 32, 64, 64)
    convs_per_block: int = 2
    n_categories: int = 8
    n_attributes: int = 12
    hidden: int = 128
    lambda_attr: float = 1.0
    lambda_dist: float = 0.1
    beta: BetaParams = field(default_factory=BetaParams)
    grid_points: int = 32
    kde_mode: str = "pooled"  # or "per-attribute"
    bandwidth: object = "auto"
    aux_heads: bool = True

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if isinstance(self.beta, dict):
            self.beta = BetaParams(**self.beta)
        if not self.channels:
            raise ValueError("trunk needs at least one block")
        if self.patch_size % (2 ** len(self.channels)):
            raise ValueError(
                f"patch_size {self.patch_size} not divisible by 2^{len(self.channels)} pooling stages")
        if self.n_categories < 2:
            raise ValueError(f"need at least 2 categories, got {self.n_categories}")
        if self.n_attributes < 1:
            raise ValueError(f"need at least 1 attribute, got {self.n_attributes}")
        if self.kde_mode not in ("pooled", "per-attribute"):
            raise ValueError(f"kde_mode must be 'pooled' or 'per-attribute', got {self.kde_mode!r}")

    @property
    def pool_sizes(self) -> list:
        return [self.patch_size // 2 ** (i + 1) for i in range(len(self.channels))]

    @property
    def grid(self) -> np.ndarray:
        return default_grid(self.grid_points)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


@dataclass
class ForwardOutputs:
    layer_attributes: list  # per pool stage, Tensor (n, M)
    attributes: Optional[Tensor]  # final (n, M)
    logits: Tensor

    @property
    def probabilities(self) -> np.ndarray:
        return T.softmax(self.logits)


@dataclass
class LossBreakdown:
    cross_entropy: Tensor
    u: list  # per-layer terms, final-layer term last
    d: Optional[Tensor]
    total: Tensor

    def as_floats(self) -> dict:
        return {
            "cross_entropy": float(self.cross_entropy.data),
            "u": [float(t.data) for t in self.u],
            "d": None if self.d is None else float(self.d.data),
            "total": float(self.total.data),
        }


def _init_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class MacNetwork:
    """Parameters and forward pass; build with :func:`build`."""

    def __init__(self, cfg: NetworkConfig, params: dict):
        self.cfg = cfg
        self.params: dict = params

    # parameter groups
    def trunk_params(self) -> list:
        return [p for n, p in self.params.items() if n.startswith("trunk.")]

    def attribute_params(self) -> list:
        return [p for n, p in self.params.items() if n.startswith(("aux.", "combine."))]

    def classifier_params(self) -> list:
        return [p for n, p in self.params.items() if n.startswith("classifier.")]

    def category_path_params(self) -> list:
        return self.trunk_params() + self.classifier_params()

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state(self) -> dict:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state(self, state: dict) -> None:
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ValueError(f"{n}: checkpoint shape {state[n].shape} != {p.shape}")
            p.data = np.array(state[n], dtype=np.float64)

    def forward(self, x) -> ForwardOutputs:
        return forward(self, x)

    __call__ = forward

    def save(self, path, extra: Optional[dict] = None, meta: Optional[dict] = None) -> None:
        tensors = {n: p.data for n, p in self.params.items()}
        tensors.update(extra or {})
        header = {"config": self.cfg.to_dict()}
        header.update(meta or {})
        save_checkpoint(path, tensors, header)

    @classmethod
    def load(cls, path) -> "MacNetwork":
        tensors, header = load_checkpoint(path)
        cfg = NetworkConfig.from_dict(header["config"])
        net = build(cfg, seed=0)
        net.load_state(tensors)
        return net


def build(cfg: NetworkConfig, seed: int = 0) -> MacNetwork:
    """Deterministically initialised network; each tensor draws from its own stream."""
    params: dict = {}
    in_ch = 3
    for b, out_ch in enumerate(cfg.channels):
        for c in range(cfg.convs_per_block):
            name = f"trunk.{b}.{c}"
            fan_in = in_ch * 9
            params[f"{name}.weight"] = Parameter(
                T.he_uniform((out_ch, in_ch, 3, 3), fan_in, _init_rng(seed, f"{name}.weight")), f"{name}.weight")
            params[f"{name}.bias"] = Parameter(np.zeros(out_ch), f"{name}.bias")
            in_ch = out_ch

    def dense(name, n_in, n_out, bias=0.0, gain=1.0):
        params[f"{name}.weight"] = Parameter(
            gain * T.xavier_uniform((n_in, n_out), n_in, n_out, _init_rng(seed, f"{name}.weight")), f"{name}.weight")
        params[f"{name}.bias"] = Parameter(np.full(n_out, bias), f"{name}.bias")

    m = cfg.n_attributes
    if cfg.aux_heads:
        for i, (size, ch) in enumerate(zip(cfg.pool_sizes, cfg.channels)):
            dense(f"aux.{i}", size * size * ch, m, ATTRIBUTE_BIAS, ATTRIBUTE_GAIN)
        dense("combine", len(cfg.channels) * m, m, ATTRIBUTE_BIAS, ATTRIBUTE_GAIN)
    last = cfg.pool_sizes[-1] ** 2 * cfg.channels[-1]
    dense("classifier.0", last, cfg.hidden)
    dense("classifier.1", cfg.hidden, cfg.n_categories)
    return MacNetwork(cfg, params)


def _check_batch(net: MacNetwork, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    p = net.cfg.patch_size
    if x.ndim != 4 or x.shape[1:] != (3, p, p):
        raise ValueError(f"expected patches shaped (n, 3, {p}, {p}), got {x.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    return x


def forward(net: MacNetwork, x) -> ForwardOutputs:
    x = _check_batch(net, x)
    cfg, P = net.cfg, net.params
    h = T.mul(T.add(x, -INPUT_OFFSET), INPUT_SCALE)
    taps = []
    for b in range(len(cfg.channels)):
        for c in range(cfg.convs_per_block):
            name = f"trunk.{b}.{c}"
            h = T.relu(T.conv2d(h, P[f"{name}.weight"], P[f"{name}.bias"], stride=1, pad=1))
        h = T.maxpool2x2(h)
        taps.append(h)

    layer_attrs = []
    final = None
    if cfg.aux_heads:
        for i, tap in enumerate(taps):
            layer_attrs.append(T.clamp01(T.linear(T.flatten(tap), P[f"aux.{i}.weight"], P[f"aux.{i}.bias"])))
        final = T.clamp01(T.linear(T.concat(layer_attrs, axis=1), P["combine.weight"], P["combine.bias"]))

    z = T.relu(T.linear(T.flatten(taps[-1]), P["classifier.0.weight"], P["classifier.0.bias"]))
    logits = T.linear(z, P["classifier.1.weight"], P["classifier.1.bias"])
    return ForwardOutputs(layer_attrs, final, logits)


# losses ------------------------------------------------------------------------

def category_mean_l1(phi: Tensor, labels, A) -> Tensor:
    """(1/K') * sum over present categories of ||a_k - mean_{j: c_j = k} phi_j||_1."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    A = np.asarray(A, dtype=np.float64)
    present = np.unique(labels)
    avg = (labels[None, :] == present[:, None]).astype(np.float64)
    avg /= avg.sum(axis=1, keepdims=True)
    means = T.matmul(Tensor(avg), phi)
    return T.l1_loss(means, Tensor(A[present])) / len(present)


def kde_kl(phi: Tensor, grid, beta: BetaParams, bandwidth="auto", mode: str = "pooled") -> Tensor:
    """Discrete KL between the Beta prior and a KDE of the attribute values.

    ``pooled`` estimates one density from every value in ``phi``;
    ``per-attribute`` estimates one per column and averages the divergences.
    """
    grid = check_grid(grid)
    b = beta_pdf(grid, beta)
    samples = phi.data.reshape(-1, 1) if mode == "pooled" else phi.data
    q = kde_eval(samples, grid, bandwidth)  # (cols, P)
    cols = q.shape[0]
    kl = float((b * (np.log(b) - np.log(q))).sum() / cols)

    def bw(g):
        gs = kde_vjp(samples, grid, bandwidth, (-float(g) / cols) * b[None, :] / q)
        return (gs.reshape(phi.shape),)

    return T._make(np.array(kl), (phi,), bw)


def compute_loss(outputs: ForwardOutputs, labels, A, cfg: NetworkConfig) -> LossBreakdown:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    if labels.max() >= cfg.n_categories or labels.min() < 0:
        raise ValueError(f"labels must lie in [0, {cfg.n_categories})")
    ce = T.softmax_cross_entropy(outputs.logits, labels)
    if outputs.attributes is None:
        return LossBreakdown(ce, [], None, ce)
    A = np.asarray(A, dtype=np.float64)
    if A.shape != (cfg.n_categories, cfg.n_attributes):
        raise ValueError(f"attribute matrix shape {A.shape} != ({cfg.n_categories}, {cfg.n_attributes})")
    u = [category_mean_l1(phi, labels, A) for phi in outputs.layer_attributes]
    u.append(category_mean_l1(outputs.attributes, labels, A))
    d = kde_kl(outputs.attributes, cfg.grid, cfg.beta, cfg.bandwidth, cfg.kde_mode)
    total = ce
    if cfg.lambda_attr != 0:
        u_sum = u[0]
        for term in u[1:]:
            u_sum = u_sum + term
        total = total + cfg.lambda_attr * u_sum
    if cfg.lambda_dist != 0:
        total = total + cfg.lambda_dist * d
    return LossBreakdown(ce, u, d, total)


# inference ---------------------------------------------------------------------

def predict(net: MacNetwork, X, chunk: int = 256) -> dict:
    """Batched no-grad inference: category probabilities and attribute vectors."""
    X = np.asarray(X, dtype=np.float64)
    probs, attrs, layers = [], [], []
    with T.no_grad():
        for start in range(0, len(X), chunk):
            out = forward(net, X[start:start + chunk])
            probs.append(out.probabilities)
            if out.attributes is not None:
                attrs.append(out.attributes.data)
                layers.append(np.stack([t.data for t in out.layer_attributes]))
    return {
        "probabilities": np.concatenate(probs),
        "attributes": np.concatenate(attrs) if attrs else None,
        "layer_attributes": np.concatenate(layers, axis=1) if layers else None,
    }


def window_centers(extent: int, patch: int, stride: int) -> np.ndarray:
    return np.arange(0, extent - patch + 1, stride) + patch // 2


def covered_span(extent: int, patch: int, stride: int) -> slice:
    """Pixels from the first to the last window centre; beyond them maps only replicate edges."""
    c = window_centers(extent, patch, stride)
    return slice(int(c[0]), int(c[-1]) + 1)


def predict_map(net: MacNetwork, image, stride: int, target: str = "attributes",
                chunk: int = 256) -> np.ndarray:
    """Sliding-window prediction assigned to window centres, nearest-filled elsewhere.

    Returns (M, H, W) for ``target="attributes"`` or (K, H, W) for ``"materials"``.
    """
    image = np.asarray(image, dtype=np.float64)
    p = net.cfg.patch_size
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {image.shape}")
    _, H, W = image.shape
    if H < p or W < p:
        raise ValueError(f"image {H}x{W} smaller than one {p}x{p} window")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if target not in ("attributes", "materials"):
        raise ValueError(f"target must be 'attributes' or 'materials', got {target!r}")
    if target == "attributes" and not net.cfg.aux_heads:
        raise ValueError("network has no attribute heads")

    cy, cx = window_centers(H, p, stride), window_centers(W, p, stride)
    views = sliding_window_view(image, (p, p), axis=(1, 2))[:, ::stride, ::stride]
    views = views.transpose(1, 2, 0, 3, 4).reshape(-1, 3, p, p)
    vals = []
    for start in range(0, len(views), chunk):
        out = predict(net, np.ascontiguousarray(views[start:start + chunk]), chunk)
        vals.append(out["attributes"] if target == "attributes" else out["probabilities"])
    grid = np.concatenate(vals).reshape(len(cy), len(cx), -1).transpose(2, 0, 1)
    iy = np.abs(np.arange(H)[:, None] - cy[None, :]).argmin(axis=1)
    ix = np.abs(np.arange(W)[:, None] - cx[None, :]).argmin(axis=1)
    return grid[:, iy][:, :, ix]


# checkpoint io -----------------------------------------------------------------

def save_checkpoint(path, tensors: dict, header: Optional[dict] = None) -> None:
    """MACCNN01 | u32 header length | JSON header | little-endian float64 payloads."""
    entries, payloads, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    head = dict(header or {})
    head["tensors"] = entries
    blob = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in payloads:
            f.write(p)


def load_checkpoint(path) -> tuple:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a MACCNN01 checkpoint")
    (n,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + n].decode("utf-8"))
    base = 12 + n
    tensors = {}
    for e in header.pop("tensors"):
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(e["shape"]).astype(np.float64)
    return tensors, header
