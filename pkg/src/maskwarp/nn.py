"""Small parameter stack: parameter tensors, a patch discriminator, Adam, checkpoints."""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, DomainError

CHECKPOINT_MAGIC = b"MASKWARP-CKPT-v1\n"


@dataclass(eq=False)
class ParamTensor:
    values: np.ndarray
    grads: np.ndarray = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=np.float64)
        if self.grads is None:
            self.grads = np.zeros_like(self.values)

    @property
    def shape(self):
        return self.values.shape

    def zero_grad(self):
        self.grads[...] = 0.0


def sigmoid(x):
    out = np.empty_like(np.asarray(x, dtype=np.float64))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


# -- patches -------------------------------------------------------------------


def extract_patches(image, size=8):
    """Split an (H, W, C) image into non-overlapping ``size x size`` patches.

    Returns an ``(N, size*size*C)`` array; trailing rows/columns that do not
    fill a whole patch are dropped.
    """
    h, w, c = image.shape
    ph, pw = h // size, w // size
    if ph == 0 or pw == 0:
        raise DimensionError(f"image {image.shape[:2]} is smaller than one {size}x{size} patch")
    x = image[: ph * size, : pw * size]
    x = x.reshape(ph, size, pw, size, c).transpose(0, 2, 1, 3, 4)
    return x.reshape(ph * pw, size * size * c)


def patches_adjoint(grad_patches, image_shape, size=8):
    h, w, c = image_shape
    ph, pw = h // size, w // size
    g = grad_patches.reshape(ph, pw, size, size, c).transpose(0, 2, 1, 3, 4)
    out = np.zeros(image_shape)
    out[: ph * size, : pw * size] = g.reshape(ph * size, pw * size, c)
    return out


# -- discriminator ----------------------------------------------------------------


class Discriminator:
    """Fully connected patch discriminator with leaky-ReLU hidden layers and sigmoid output."""

    def __init__(self, layer_sizes=(8 * 8 * 3, 64, 32, 1), slope=0.2, seed=0, init_std=0.05):
        if len(layer_sizes) < 2 or layer_sizes[-1] != 1:
            raise ValueError("layer_sizes must end with a single output unit")
        self.layer_sizes = tuple(int(s) for s in layer_sizes)
        self.slope = slope
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            self.weights.append(ParamTensor(rng.normal(0.0, init_std, (n_in, n_out))))
            self.biases.append(ParamTensor(np.zeros(n_out)))

    @property
    def input_size(self):
        return self.layer_sizes[0]

    def parameters(self):
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"disc/w{i}"] = w
            named[f"disc/b{i}"] = b
        return named

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def forward(self, x):
        """Return ``(probabilities (N,), cache)`` for inputs of shape ``(N, input_size)``."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.input_size:
            raise DimensionError(f"discriminator expects inputs of size {self.input_size}, got {x.shape[1]}")
        acts = [x]
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.values + b.values
            pre.append(z)
            h = z if i == last else np.where(z > 0, z, self.slope * z)
            acts.append(h)
        prob = sigmoid(h[:, 0])
        return prob, (acts, pre, prob)

    def backward(self, cache, upstream):
        """Accumulate parameter gradients for ``sum(upstream * prob)``; return the input gradient."""
        acts, pre, prob = cache
        upstream = np.asarray(upstream, dtype=np.float64).reshape(-1)
        g = (upstream * prob * (1 - prob))[:, None]
        for i in range(len(self.weights) - 1, -1, -1):
            if i != len(self.weights) - 1:
                g = g * np.where(pre[i] > 0, 1.0, self.slope)
            self.weights[i].grads += acts[i].T @ g
            self.biases[i].grads += g.sum(axis=0)
            g = g @ self.weights[i].values.T
        return g

    def state_dict(self):
        return {k: p.values.copy() for k, p in self.parameters().items()}

    def load_state_dict(self, state):
        for k, p in self.parameters().items():
            if state[k].shape != p.values.shape:
                raise DimensionError(f"{k}: expected shape {p.values.shape}, got {state[k].shape}")
            p.values[...] = state[k]


def disc_forward(d, patch):
    return d.forward(patch)


def disc_backward(d, cached, upstream_grad):
    """Return ``(param_grads, input_grad)`` for one backward pass, starting from zeroed gradients."""
    d.zero_grad()
    g_in = d.backward(cached, upstream_grad)
    return {k: p.grads.copy() for k, p in d.parameters().items()}, g_in


# -- Adam ---------------------------------------------------------------------------


@dataclass(eq=False)
class AdamState:
    lr: float = 0.0002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def to_header(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step}


def adam_step(state, params, lr=None):
    """One bias-corrected Adam update of ``params`` (name -> ParamTensor) in place.

    ``lr`` overrides ``state.lr`` for this step only (learning-rate schedules).
    Returns the applied updates keyed by name.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    updates = {}
    for name, p in params.items():
        g = p.grads
        if not np.all(np.isfinite(g)):
            raise DomainError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.values)
            state.v[name] = np.zeros_like(p.values)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        delta = -lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        p.values += delta
        updates[name] = delta
    return updates


# -- generator parameters --------------------------------------------------------------


class GeneratorParams:
    """Directly optimized per-frame inverse depth, per-pair pose and mask logits.

    Inverse depth is ``softplus(raw)``; depth is its reciprocal clamped to
    ``[d_min, d_max]``. Masks are ``sigmoid(logits)``.
    """

    def __init__(self, depth_raw, poses, mask_logits, d_min=0.1, d_max=100.0):
        self.depth_raw = {k: ParamTensor(v) for k, v in depth_raw.items()}
        self.poses = {k: ParamTensor(v) for k, v in poses.items()}
        self.mask_logits = {k: ParamTensor(v) for k, v in mask_logits.items()}
        self.d_min = d_min
        self.d_max = d_max

    @classmethod
    def initialize(cls, frames, pairs, shape, init_depth=5.0, init_mask_logit=4.0, pose_noise=0.0,
                   depth_noise=0.0, seed=0, d_min=0.1, d_max=100.0):
        rng = np.random.default_rng(seed)
        depth_raw = {}
        for f in frames:
            inv = np.full(shape, 1.0 / init_depth)
            if depth_noise > 0:
                inv = inv * np.exp(rng.normal(0.0, depth_noise, shape))
            depth_raw[f] = softplus_inverse(inv)
        poses = {p: rng.normal(0.0, pose_noise, 6) if pose_noise > 0 else np.zeros(6) for p in pairs}
        masks = {p: np.full(shape, float(init_mask_logit)) for p in pairs}
        return cls(depth_raw, poses, masks, d_min, d_max)

    def named(self):
        named = {}
        for k, p in self.depth_raw.items():
            named[f"depth/{k}"] = p
        for k, p in self.poses.items():
            named[f"pose/{k[0]}/{k[1]}"] = p
        for k, p in self.mask_logits.items():
            named[f"mask/{k[0]}/{k[1]}"] = p
        return named

    def zero_grad(self):
        for p in self.named().values():
            p.zero_grad()

    def depth(self, frame):
        """Return ``(depth, d_depth/d_raw)``."""
        raw = self.depth_raw[frame].values
        inv = softplus(raw)
        d = 1.0 / inv
        inside = (d > self.d_min) & (d < self.d_max)
        return np.clip(d, self.d_min, self.d_max), np.where(inside, -sigmoid(raw) / (inv * inv), 0.0)

    def mask(self, pair):
        """Return ``(mask, d_mask/d_logit)``."""
        s = sigmoid(self.mask_logits[pair].values)
        return s, s * (1 - s)

    def state_dict(self):
        return {k: p.values.copy() for k, p in self.named().items()}

    def load_state_dict(self, state):
        for k, p in self.named().items():
            if state[k].shape != p.values.shape:
                raise DimensionError(f"{k}: expected shape {p.values.shape}, got {state[k].shape}")
            p.values[...] = state[k]


# -- checkpoints ------------------------------------------------------------------------


def save_checkpoint(path, arrays, optimizers=None, meta=None):
    """Write named float64 arrays plus Adam state behind a JSON header.

    Layout: magic line, 8-byte little-endian header length, UTF-8 JSON
    header, then the raw little-endian float64 payload of every array in
    header order.
    """
    optimizers = optimizers or {}
    entries = []
    blobs = []
    offset = 0

    def add(name, arr):
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": data.nbytes})
        blobs.append(data.tobytes())
        offset += data.nbytes

    for name in arrays:
        add(name, arrays[name])
    adam_header = {}
    for opt_name, state in optimizers.items():
        adam_header[opt_name] = state.to_header()
        for pname in state.m:
            add(f"adam/{opt_name}/m/{pname}", state.m[pname])
            add(f"adam/{opt_name}/v/{pname}", state.v[pname])
    header = json.dumps(
        {"format": "maskwarp-checkpoint", "version": 1, "dtype": "<f8", "arrays": entries,
         "adam": adam_header, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return ``(arrays, optimizers, meta)`` from :func:`save_checkpoint` output."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a maskwarp checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    moments = {}
    for e in header["arrays"]:
        arr = np.frombuffer(payload, dtype="<f8", count=int(np.prod(e["shape"], dtype=np.int64)),
                            offset=e["offset"]).reshape(e["shape"]).astype(np.float64)
        if e["name"].startswith("adam/"):
            _, opt_name, kind, pname = e["name"].split("/", 3)
            moments.setdefault(opt_name, {"m": {}, "v": {}})[kind][pname] = arr
        else:
            arrays[e["name"]] = arr
    optimizers = {}
    for opt_name, h in header["adam"].items():
        mv = moments.get(opt_name, {"m": {}, "v": {}})
        optimizers[opt_name] = AdamState(h["lr"], h["beta1"], h["beta2"], h["eps"], h["step"], mv["m"], mv["v"])
    return arrays, optimizers, header["meta"]
