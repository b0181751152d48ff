"""Conditional velocity predictor, low-rank adapters, merging and checkpoints.

The network is a patchwise residual conv net. Images are split into
``patch x patch`` tokens (space-to-depth), concatenated channelwise with the
tokenised upsampled LR condition, a learned prompt embedding and sinusoidal
time features, then passed through 3x3 convolutions on the token grid:

    h0 = silu(conv_in(tokens))
    h_{i+1} = h_i + silu(block_i(h_i))
    v = depth_to_space(conv_out(h_depth)) + skip(x_t, t, lr)

``skip`` is the closed-form velocity for a per-pixel Gaussian centred on the
upsampled LR with small variance ``skip_var``; it carries no parameters, so
an untrained network already samples near the cubic upsample.

Options on :class:`Architecture`:

* ``input="posterior"`` (default) tokenises the skip's posterior mean
  E[x | x_t] instead of x_t. It equals the upsample at t = 1, so pure noise
  never reaches the net, and tends to x_t as t -> 0; the map is affine and
  invertible for t < 1.
* ``film=True`` (default) adds a time-dependent scale and shift to each
  hidden pre-activation.

Conv weights are stored as 2-D matrices ``(d_out, 9 * d_in)`` with taps
ordered ``(dy, dx, c_in)``; a low-rank adapter on such a layer is a pair
``A: (rank, 9 * d_in)``, ``B: (d_out, rank)`` with effective delta
``(alpha / rank) * B @ A``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from flowsr._kernels import col2im3x3, im2col3x3

FORMAT_VERSION = 1
STAGE_LABELS = ("base", "SFT", "FR-RL", "NR-RL", "merged")


class RejectedInput(ValueError):
    """Input violates an operation's shape or range precondition."""


class MergeError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# images and conditions
# ---------------------------------------------------------------------------

def as_image(x, dtype=None) -> np.ndarray:
    """Validate an H x W x C image array (C in {1, 3}) with finite entries."""
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 3 or x.shape[2] not in (1, 3):
        raise RejectedInput(f"expected an H x W x C image with C in (1, 3), got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise RejectedInput("image contains non-finite values")
    return x


def decode(x: np.ndarray) -> np.ndarray:
    """Export boundary: clamp intensities to [0, 1]."""
    return np.clip(x, 0.0, 1.0)


@dataclass(frozen=True)
class ConditionTag:
    lr_image: np.ndarray  # upsampled to the output resolution
    prompt_id: int = 0


# ---------------------------------------------------------------------------
# architecture and parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Architecture:
    channels: int = 1
    patch: int = 4
    width: int = 64
    depth: int = 4
    time_dim: int = 16
    prompt_dim: int = 8
    n_prompts: int = 4
    skip_var: float = 1e-3  # 0 disables the Gaussian skip
    input: str = "posterior"  # or "raw": tokenise x_t itself
    film: bool = True  # time-dependent scale/shift on every hidden pre-activation

    @property
    def token_channels(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def in_features(self) -> int:
        return 2 * self.token_channels + self.prompt_dim + self.time_dim

    def layer_names(self) -> list[str]:
        return ["conv_in"] + [f"block{i}" for i in range(self.depth)] + ["conv_out"]

    def layer_io(self, name: str) -> tuple[int, int]:
        if name == "conv_in":
            return self.width, self.in_features
        if name == "conv_out":
            return self.token_channels, self.width
        return self.width, self.width

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**d)


def skip_gain(t: np.ndarray, var: float) -> np.ndarray:
    """Gain k(t) of the Gaussian-posterior velocity around the LR condition."""
    t = np.asarray(t, dtype=np.float64)
    return (t - (1.0 - t) * var) / ((1.0 - t) ** 2 * var + t * t)


def skip_velocity(x_t, t, cond_lr, var: float):
    """E[eps - x | x_t] when x ~ N(cond_lr, var) per pixel; parameter-free.

    The network only predicts the residual on top of this baseline.
    """
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1, 1)
    k = skip_gain(t, var)
    return (k * (x_t - (1.0 - t) * cond_lr) - cond_lr).astype(x_t.dtype)


def skip_posterior_mean(x_t, t, cond_lr, var: float):
    """E[x | x_t] under the same per-pixel Gaussian prior; equals cond_lr at t = 1."""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1, 1, 1)
    g = var * (1.0 - t) / ((1.0 - t) ** 2 * var + t * t)
    return (cond_lr + g * (x_t - (1.0 - t) * cond_lr)).astype(x_t.dtype)


def time_features(t: np.ndarray, dim: int) -> np.ndarray:
    """Fixed-frequency sinusoidal features of t in [0, 1]; shape (N, dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.pi * np.geomspace(0.5, 64.0, half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class VelocityModel:
    arch: Architecture
    params: dict[str, np.ndarray]

    @classmethod
    def init(cls, arch: Architecture, rng: np.random.Generator, dtype=np.float32) -> "VelocityModel":
        p: dict[str, np.ndarray] = {}
        p["prompt_embed"] = rng.normal(0.0, 0.5, (arch.n_prompts, arch.prompt_dim))
        for name in arch.layer_names():
            d_out, d_in = arch.layer_io(name)
            std = np.sqrt(1.0 / (9 * d_in))
            if name.startswith("block"):
                std *= 0.5
            p[f"{name}.weight"] = rng.normal(0.0, std, (d_out, 9 * d_in))
            p[f"{name}.bias"] = np.zeros(d_out)
            if arch.film and name != "conv_out":
                p[f"{name}.film"] = np.zeros((2 * d_out, arch.time_dim))
                p[f"{name}.film_bias"] = np.zeros(2 * d_out)
        return cls(arch, {k: v.astype(dtype) for k, v in p.items()})

    @property
    def dtype(self):
        return self.params["conv_in.weight"].dtype

    def copy(self) -> "VelocityModel":
        return VelocityModel(self.arch, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "VelocityModel":
        return VelocityModel(self.arch, {k: v.astype(dtype) for k, v in self.params.items()})

    def __call__(self, x_t, t, cond_lr, prompt_ids, adapter=None):
        return forward(self, x_t, t, cond_lr, prompt_ids, adapter)


@dataclass
class LowRankAdapter:
    rank: int
    alpha: float
    A: dict[str, np.ndarray] = field(default_factory=dict)
    B: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def layers(self) -> list[str]:
        return list(self.A)

    @classmethod
    def init(cls, model: VelocityModel, rank: int, alpha: float, rng: np.random.Generator,
             layers: list[str] | None = None) -> "LowRankAdapter":
        """Fresh adapter (B = 0) on every conv layer where ``rank < min(d_out, d_in)``.

        ``d_in`` counts the flattened 3x3 taps. Layers too narrow for the
        requested rank are skipped; an error is raised if none qualify.
        """
        if rank < 1 or alpha < 0:
            raise RejectedInput("rank must be >= 1 and alpha >= 0")
        arch = model.arch
        names = layers if layers is not None else arch.layer_names()
        A, B = {}, {}
        for name in names:
            d_out, d_in = arch.layer_io(name)
            fan_in = 9 * d_in
            if rank >= min(d_out, fan_in):
                if layers is not None:
                    raise RejectedInput(f"rank {rank} too large for layer {name} ({d_out}x{fan_in})")
                continue
            A[name] = rng.normal(0.0, 1.0 / np.sqrt(fan_in), (rank, fan_in)).astype(model.dtype)
            B[name] = np.zeros((d_out, rank), dtype=model.dtype)
        if not A:
            raise RejectedInput(f"no layer of the model admits rank {rank}")
        return cls(rank, float(alpha), A, B)

    def copy(self) -> "LowRankAdapter":
        return LowRankAdapter(self.rank, self.alpha,
                              {k: v.copy() for k, v in self.A.items()},
                              {k: v.copy() for k, v in self.B.items()})

    def negated(self) -> "LowRankAdapter":
        return LowRankAdapter(self.rank, self.alpha,
                              {k: v.copy() for k, v in self.A.items()},
                              {k: -v for k, v in self.B.items()})

    def delta(self, name: str) -> np.ndarray:
        return self.scale * (self.B[name] @ self.A[name])

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(self.delta(n).astype(np.float64) ** 2) for n in self.A)))

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.A:
            out[f"{n}.A"] = self.A[n]
            out[f"{n}.B"] = self.B[n]
        return out


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def space_to_depth(x: np.ndarray, p: int) -> np.ndarray:
    n, h, w, c = x.shape
    if h % p or w % p:
        raise RejectedInput(f"image size {h}x{w} not divisible by patch {p}")
    x = x.reshape(n, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h // p, w // p, p * p * c)


def depth_to_space(x: np.ndarray, p: int) -> np.ndarray:
    n, h, w, pc = x.shape
    c = pc // (p * p)
    x = x.reshape(n, h, w, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h * p, w * p, c)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _batch_inputs(model, x_t, t, cond_lr, prompt_ids):
    x_t = np.asarray(x_t)
    single = x_t.ndim == 3
    if single:
        x_t = x_t[None]
        cond_lr = np.asarray(cond_lr)[None]
    cond_lr = np.asarray(cond_lr)
    if cond_lr.shape != x_t.shape:
        raise RejectedInput(f"condition shape {cond_lr.shape} != x_t shape {x_t.shape}")
    if x_t.shape[-1] != model.arch.channels:
        raise RejectedInput(f"expected {model.arch.channels} channels, got {x_t.shape[-1]}")
    n = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
    if np.any(t < 0) or np.any(t > 1):
        raise RejectedInput("t must lie in [0, 1]")
    ids = np.broadcast_to(np.asarray(prompt_ids, dtype=np.int64), (n,))
    return x_t.astype(model.dtype, copy=False), t, cond_lr.astype(model.dtype, copy=False), ids, single


def _conv(h, name, params, adapter):
    n, gh, gw, c = h.shape
    cols = im2col3x3(h).reshape(n * gh * gw, 9 * c)
    W = params[f"{name}.weight"]
    y = cols @ W.T + params[f"{name}.bias"]
    low = None
    if adapter is not None and name in adapter.A:
        low = cols @ adapter.A[name].T
        y = y + adapter.scale * (low @ adapter.B[name].T)
    return y.reshape(n, gh, gw, W.shape[0]), cols, low


def forward(model: VelocityModel, x_t, t, cond_lr, prompt_ids, adapter: LowRankAdapter | None = None,
            return_cache: bool = False):
    """Predict the velocity for a batch (N, H, W, C) or a single image (H, W, C).

    With an adapter, each adapted layer computes ``x W^T + s (x A^T) B^T``,
    i.e. the low-rank path is applied on the fly without forming ``W + s B A``.
    """
    arch, P = model.arch, model.params
    x_t, t, cond_lr, ids, single = _batch_inputs(model, x_t, t, cond_lr, prompt_ids)
    n = x_t.shape[0]
    x_in = skip_posterior_mean(x_t, t, cond_lr, arch.skip_var) if arch.input == "posterior" else x_t
    xs = space_to_depth(x_in, arch.patch)
    ls = space_to_depth(cond_lr, arch.patch)
    gh, gw = xs.shape[1:3]
    pe = P["prompt_embed"][ids]
    te = time_features(t, arch.time_dim).astype(model.dtype)
    h0 = np.concatenate([
        xs, ls,
        np.broadcast_to(pe[:, None, None, :], (n, gh, gw, arch.prompt_dim)),
        np.broadcast_to(te[:, None, None, :], (n, gh, gw, arch.time_dim)),
    ], axis=-1)
    cache = {"ids": ids, "shape": x_t.shape, "layers": []}
    cache["film"] = {}

    def modulate(name, z):
        if not arch.film:
            return z
        gb = te @ P[f"{name}.film"].T + P[f"{name}.film_bias"]
        gamma, beta = gb[:, :arch.width], gb[:, arch.width:]
        cache["film"][name] = (z, gamma, te)
        return z * (1.0 + gamma[:, None, None, :]) + beta[:, None, None, :]

    z, cols, low = _conv(h0, "conv_in", P, adapter)
    z = modulate("conv_in", z)
    s = _sigmoid(z)
    h = z * s
    cache["layers"].append(("conv_in", cols, low, z, s))
    for i in range(arch.depth):
        name = f"block{i}"
        z, cols, low = _conv(h, name, P, adapter)
        z = modulate(name, z)
        s = _sigmoid(z)
        h = h + z * s
        cache["layers"].append((name, cols, low, z, s))
    y, cols, low = _conv(h, "conv_out", P, adapter)
    cache["layers"].append(("conv_out", cols, low, None, None))
    v = depth_to_space(y, arch.patch)
    if arch.skip_var > 0:
        v = v + skip_velocity(x_t, t, cond_lr, arch.skip_var)
    if single:
        v = v[0]
    if return_cache:
        cache["single"] = single
        return v, cache
    return v


def backward(model: VelocityModel, cache: dict, dv: np.ndarray, adapter: LowRankAdapter | None = None,
             base_grads: bool = True) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. model parameters and adapter factors.

    ``dv`` is dL/dv with the same shape as the forward output. Returned keys
    are model parameter names and, for adapted layers, ``"<layer>.A"`` /
    ``"<layer>.B"``. ``base_grads=False`` skips the base weight gradients.
    """
    arch, P = model.arch, model.params
    if cache["single"]:
        dv = dv[None]
    grads: dict[str, np.ndarray] = {}
    n = dv.shape[0]
    dy = space_to_depth(np.asarray(dv, dtype=model.dtype), arch.patch)
    gh, gw = dy.shape[1:3]

    def conv_back(name, cols, low, dout):
        c_out = dout.shape[-1]
        g = dout.reshape(-1, c_out)
        W = P[f"{name}.weight"]
        if base_grads:
            grads[f"{name}.weight"] = g.T @ cols
            grads[f"{name}.bias"] = g.sum(axis=0)
        dcols = g @ W
        if adapter is not None and name in adapter.A:
            A, B, s = adapter.A[name], adapter.B[name], adapter.scale
            gB = g @ B  # (M, rank)
            grads[f"{name}.B"] = s * (g.T @ low)
            grads[f"{name}.A"] = s * (gB.T @ cols)
            dcols = dcols + s * (gB @ A)
        c_in = cols.shape[1] // 9
        return col2im3x3(dcols.reshape(n, gh, gw, 9 * c_in), c_in)

    def demodulate(name, dz):
        if name not in cache["film"]:
            return dz
        z, gamma, te = cache["film"][name]
        if base_grads:
            dgb = np.concatenate([(dz * z).sum(axis=(1, 2)), dz.sum(axis=(1, 2))], axis=1)
            grads[f"{name}.film"] = dgb.T @ te
            grads[f"{name}.film_bias"] = dgb.sum(axis=0)
        return dz * (1.0 + gamma[:, None, None, :])

    layers = cache["layers"]
    name, cols, low, _, _ = layers[-1]
    dh = conv_back(name, cols, low, dy)
    for name, cols, low, z, s in reversed(layers[1:-1]):
        dz = demodulate(name, dh * (s * (1.0 + z * (1.0 - s))))
        dh = dh + conv_back(name, cols, low, dz)
    name, cols, low, z, s = layers[0]
    dz = demodulate(name, dh * (s * (1.0 + z * (1.0 - s))))
    dh0 = conv_back(name, cols, low, dz)
    if base_grads:
        off = 2 * arch.token_channels
        dpe = dh0[..., off:off + arch.prompt_dim].sum(axis=(1, 2))
        g = np.zeros_like(P["prompt_embed"])
        np.add.at(g, cache["ids"], dpe)
        grads["prompt_embed"] = g
    return grads


def predict_velocity(model: VelocityModel, adapter: LowRankAdapter | None, x_t: np.ndarray, t: float,
                     cond: ConditionTag) -> np.ndarray:
    x_t = as_image(x_t)
    if not 0.0 <= t <= 1.0:
        raise RejectedInput("t must lie in [0, 1]")
    if np.shape(cond.lr_image) != x_t.shape:
        raise RejectedInput(f"condition shape {np.shape(cond.lr_image)} != x_t shape {x_t.shape}")
    return forward(model, x_t, t, cond.lr_image, cond.prompt_id, adapter)


# ---------------------------------------------------------------------------
# merging
# ---------------------------------------------------------------------------

def merge_adapter(base: VelocityModel, adapter: LowRankAdapter, scale: float = 1.0) -> VelocityModel:
    """Return new parameters with ``W + scale * (alpha/rank) * B @ A`` on adapted layers."""
    out = base.copy()
    for name in adapter.A:
        key = f"{name}.weight"
        if key not in base.params:
            raise MergeError(f"adapter layer {name!r} not in model")
        W = base.params[key]
        A, B = adapter.A[name], adapter.B[name]
        if B.shape[0] != W.shape[0] or A.shape[1] != W.shape[1] or A.shape[0] != B.shape[1]:
            raise MergeError(f"shape mismatch on {name}: W{W.shape} B{B.shape} A{A.shape}")
        out.params[key] = (W + (scale * adapter.scale) * (B @ A)).astype(W.dtype)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _array_entries(model: VelocityModel | None, adapter: LowRankAdapter | None,
                   extra: dict[str, np.ndarray] | None):
    entries = []
    if model is not None:
        entries += [(f"model/{k}", v) for k, v in model.params.items()]
    if adapter is not None:
        for k in adapter.A:
            entries.append((f"adapter/{k}.A", adapter.A[k]))
            entries.append((f"adapter/{k}.B", adapter.B[k]))
    if extra:
        entries += [(f"extra/{k}", np.asarray(v)) for k, v in extra.items()]
    return entries


def save_checkpoint(path, model: VelocityModel | None, adapter: LowRankAdapter | None = None, *,
                    stage: str, arch: Architecture | None = None, seed_lineage: list | None = None,
                    parents: dict | None = None, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> dict:
    """Write ``<path>/params.bin`` (concatenated little-endian arrays) and ``<path>/manifest.json``.

    Returns the manifest, which includes the sha256 of ``params.bin``.
    """
    if stage not in STAGE_LABELS:
        raise CheckpointError(f"unknown stage label {stage!r}")
    if model is None and adapter is None:
        raise CheckpointError("nothing to save")
    arch = arch or (model.arch if model is not None else None)
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays, offset, blobs = [], 0, []
    for name, a in _array_entries(model, adapter, extra):
        dt = a.dtype.newbyteorder("<")
        buf = np.ascontiguousarray(a, dtype=dt).tobytes()
        arrays.append({"name": name, "dtype": dt.str, "shape": list(a.shape), "offset": offset,
                       "nbytes": len(buf)})
        offset += len(buf)
        blobs.append(buf)
    data = b"".join(blobs)
    (path / "params.bin").write_bytes(data)
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": stage,
        "architecture": arch.to_dict() if arch is not None else None,
        "adapter": None if adapter is None else {"rank": adapter.rank, "alpha": adapter.alpha,
                                                  "layers": adapter.layers},
        "seed_lineage": list(seed_lineage or []),
        "parents": dict(parents or {}),
        "arrays": arrays,
        "sha256": hashlib.sha256(data).hexdigest(),
    }
    if meta:
        manifest["meta"] = meta
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> dict:
    p = Path(path) / "manifest.json"
    if not p.exists():
        raise CheckpointError(f"no checkpoint manifest at {p}")
    return json.loads(p.read_text())


def load_checkpoint(path, expected_arch: Architecture | None = None):
    """Load ``(model, adapter, manifest, extra)``; either of model/adapter may be None."""
    path = Path(path)
    manifest = read_manifest(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')}")
    arch = Architecture.from_dict(manifest["architecture"]) if manifest["architecture"] else None
    if expected_arch is not None and arch != expected_arch:
        raise CheckpointError(f"architecture mismatch: checkpoint {arch}, expected {expected_arch}")
    data = (path / "params.bin").read_bytes()
    if hashlib.sha256(data).hexdigest() != manifest["sha256"]:
        raise CheckpointError("params.bin digest does not match manifest")
    params, A, B, extra = {}, {}, {}, {}
    for e in manifest["arrays"]:
        a = np.frombuffer(data, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"], dtype=np.int64)),
                          offset=e["offset"]).reshape(e["shape"]).copy()
        kind, name = e["name"].split("/", 1)
        if kind == "model":
            params[name] = a
        elif kind == "adapter":
            layer, which = name.rsplit(".", 1)
            (A if which == "A" else B)[layer] = a
        else:
            extra[name] = a
    model = None
    if params:
        model = VelocityModel(arch, params)
        ref = VelocityModel.init(arch, np.random.default_rng(0))
        for k, v in ref.params.items():
            if k not in params or params[k].shape != v.shape:
                raise CheckpointError(f"parameter {k} missing or misshapen for {arch}")
    adapter = None
    if manifest["adapter"] is not None:
        info = manifest["adapter"]
        adapter = LowRankAdapter(int(info["rank"]), float(info["alpha"]), A, B)
        if arch is not None:
            for layer in A:
                d_out, d_in = arch.layer_io(layer)
                if B[layer].shape != (d_out, adapter.rank) or A[layer].shape != (adapter.rank, 9 * d_in):
                    raise CheckpointError(f"adapter layer {layer} does not fit {arch}")
    return model, adapter, manifest, extra
