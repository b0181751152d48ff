"""Procedural HR content, the degradation pipeline, cubic upsampling and datasets.

Degradation is a fixed-order single pass:
Gaussian blur -> area downsample -> additive Gaussian noise ->
per-block mean flattening -> clamp to [0, 1].

Images written to disk are 8-bit PNG. Quantisation clamps to [0, 1] and
rounds ``255 * x`` half-to-even (``np.rint``).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from flowsr.model import RejectedInput

GENERATOR_KINDS = ("gradients", "textures", "shapes", "text-like")


@dataclass(frozen=True)
class DegradationSpec:
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    downscale_factor: int = 4
    block_artifact_strength: float = 0.0
    block_size: int = 4  # in LR pixels

    def validate(self) -> None:
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise RejectedInput("blur_sigma and noise_sigma must be >= 0")
        if int(self.downscale_factor) != self.downscale_factor or self.downscale_factor < 1:
            raise RejectedInput("downscale_factor must be a positive integer")
        if not 0.0 <= self.block_artifact_strength <= 1.0:
            raise RejectedInput("block_artifact_strength must lie in [0, 1]")
        if self.block_size < 1:
            raise RejectedInput("block_size must be >= 1")


@dataclass(frozen=True)
class SpecSampler:
    """Uniform sampling ranges for random degradation specs."""

    blur: tuple[float, float] = (0.8, 2.0)
    noise: tuple[float, float] = (0.0, 0.04)
    block: tuple[float, float] = (0.0, 0.4)
    factor: int = 4

    def __call__(self, rng: np.random.Generator) -> DegradationSpec:
        return DegradationSpec(
            blur_sigma=float(rng.uniform(*self.blur)),
            noise_sigma=float(rng.uniform(*self.noise)),
            downscale_factor=self.factor,
            block_artifact_strength=float(rng.uniform(*self.block)),
        )


@dataclass
class TrainingPair:
    x_HR: np.ndarray
    x_LR: np.ndarray
    spec: DegradationSpec
    seed: int
    prompt_id: int = 0


# ---------------------------------------------------------------------------
# HR content
# ---------------------------------------------------------------------------

def _grid(size):
    c = (np.arange(size) + 0.5) / size
    return np.meshgrid(c, c, indexing="ij")


def _gradients(size, rng):
    yy, xx = _grid(size)
    th = rng.uniform(0, 2 * np.pi)
    img = np.cos(th) * xx + np.sin(th) * yy
    cy, cx = rng.uniform(0.2, 0.8, 2)
    img = img + rng.uniform(-0.6, 0.6) * np.hypot(yy - cy, xx - cx)
    f = rng.uniform(0.5, 2.0)
    ph = rng.uniform(0, 2 * np.pi)
    img = img + rng.uniform(0.05, 0.25) * np.sin(2 * np.pi * f * (np.sin(th) * xx - np.cos(th) * yy) + ph)
    return img


def _textures(size, rng):
    yy, xx = _grid(size)
    img = np.zeros((size, size))
    for _ in range(rng.integers(3, 7)):
        th = rng.uniform(0, np.pi)
        f = rng.uniform(1.0, 4.0)
        img += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * (np.cos(th) * xx + np.sin(th) * yy)
                                             + rng.uniform(0, 2 * np.pi))
    if rng.random() < 0.5:
        img = np.sign(img) * np.abs(img) ** 0.5
    return img


def _shapes(size, rng):
    yy, xx = _grid(size)
    img = rng.uniform(0.0, 1.0) + rng.uniform(-0.3, 0.3) * (xx - 0.5)
    for _ in range(rng.integers(4, 10)):
        val = rng.uniform(0.0, 1.0)
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0.05, 0.95, 2)
        s = rng.uniform(0.08, 0.3)
        if kind == 0:
            h, w = s, rng.uniform(0.08, 0.3)
            m = (np.abs(yy - cy) < h / 2) & (np.abs(xx - cx) < w / 2)
        elif kind == 1:
            m = np.hypot(yy - cy, xx - cx) < s / 2
        else:
            m = (yy - cy + s / 2 > 0) & (np.abs(xx - cx) < (yy - cy + s / 2) * 0.6) & (yy < cy + s / 2)
        img = np.where(m, val, img)
    return img


def _text_like(size, rng):
    ink, paper = rng.uniform(0.0, 0.3), rng.uniform(0.7, 1.0)
    if rng.random() < 0.3:
        ink, paper = paper, ink
    img = np.full((size, size), paper)
    cell = int(rng.integers(4, 6))  # pixels per glyph dot, >= one LR pixel
    gh, gw = 5 * cell, 3 * cell
    y = int(rng.integers(1, 4))
    while y + gh < size:
        x = int(rng.integers(1, 4))
        while x + gw < size:
            if rng.random() < 0.85:
                glyph = rng.random((5, 3)) < 0.5
                img[y:y + gh, x:x + gw] = np.where(np.kron(glyph, np.ones((cell, cell))) > 0, ink,
                                                   img[y:y + gh, x:x + gw])
            x += gw + cell
        y += gh + 2 * cell
    return img


_GENERATORS = {"gradients": _gradients, "textures": _textures, "shapes": _shapes, "text-like": _text_like}


def generate_hr(kind: str, size: int, rng: np.random.Generator, channels: int = 1,
                downscale_factor: int = 4) -> np.ndarray:
    """Procedural HR image in [0, 1] of shape (size, size, channels)."""
    if kind not in _GENERATORS:
        raise RejectedInput(f"unknown generator kind {kind!r}")
    if size < 8 or size % downscale_factor:
        raise RejectedInput(f"size {size} must be >= 8 and divisible by {downscale_factor}")
    gen = _GENERATORS[kind]
    base = gen(size, rng)
    out = np.empty((size, size, channels))
    if channels == 1:
        out[..., 0] = _normalize(base, rng)
    else:
        tint = rng.uniform(0.6, 1.0, channels)
        detail = gen(size, rng)
        for c in range(channels):
            out[..., c] = _normalize(tint[c] * base + (1 - tint[c]) * detail, rng)
    return out


def _normalize(img, rng):
    lo = rng.uniform(0.0, 0.15)
    hi = rng.uniform(0.85, 1.0)
    a, b = img.min(), img.max()
    if b - a < 1e-12:
        return np.full_like(img, 0.5 * (lo + hi))
    return lo + (img - a) / (b - a) * (hi - lo)


# ---------------------------------------------------------------------------
# degradation and resampling
# ---------------------------------------------------------------------------

def area_downsample(x: np.ndarray, factor: int) -> np.ndarray:
    h, w, c = x.shape
    if h % factor or w % factor:
        raise RejectedInput(f"size {h}x{w} not divisible by {factor}")
    if factor == 1:
        return x.copy()
    return x.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def block_flatten(x: np.ndarray, block: int, strength: float) -> np.ndarray:
    """Blend each block x block tile toward its mean (edge tiles may be partial)."""
    if strength == 0.0:
        return x
    h, w, c = x.shape
    out = x.copy()
    for i in range(0, h, block):
        for j in range(0, w, block):
            tile = x[i:i + block, j:j + block]
            out[i:i + block, j:j + block] = (1 - strength) * tile + strength * tile.mean(axis=(0, 1))
    return out


def degrade(x_hr: np.ndarray, spec: DegradationSpec, rng: np.random.Generator) -> np.ndarray:
    spec.validate()
    x = np.asarray(x_hr, dtype=np.float64)
    f = int(spec.downscale_factor)
    if x.shape[0] % f or x.shape[1] % f:
        raise RejectedInput(f"HR size {x.shape[:2]} not divisible by {f}")
    if spec.blur_sigma > 0:
        x = gaussian_filter(x, sigma=(spec.blur_sigma, spec.blur_sigma, 0), mode="reflect")
    x = area_downsample(x, f)
    noise = rng.standard_normal(x.shape)
    if spec.noise_sigma > 0:
        x = x + spec.noise_sigma * noise
    x = block_flatten(x, spec.block_size, spec.block_artifact_strength)
    return np.clip(x, 0.0, 1.0)


def _cubic(s, a=-0.5):
    s = np.abs(s)
    return np.where(s <= 1, (a + 2) * s ** 3 - (a + 3) * s ** 2 + 1,
                    np.where(s < 2, a * s ** 3 - 5 * a * s ** 2 + 8 * a * s - 4 * a, 0.0))


def cubic_matrix(n_in: int, factor: int) -> np.ndarray:
    """(n_in*factor, n_in) separable cubic (Keys, a=-0.5) resampling matrix.

    Pixel centres are aligned (half-pixel convention), edges replicate, and
    each row is renormalised to sum to one so constants are preserved.
    """
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    base = np.floor(src).astype(int)
    M = np.zeros((n_out, n_in))
    for k in range(-1, 3):
        idx = base + k
        wgt = _cubic(src - idx)
        np.add.at(M, (np.arange(n_out), np.clip(idx, 0, n_in - 1)), wgt)
    return M / M.sum(axis=1, keepdims=True)


def upsample(x_lr: np.ndarray, factor: int) -> np.ndarray:
    if factor < 1:
        raise RejectedInput("factor must be >= 1")
    x = np.asarray(x_lr)
    if factor == 1:
        return x.copy()
    h, w, _ = x.shape
    Mh, Mw = cubic_matrix(h, factor), cubic_matrix(w, factor)
    return np.einsum("ih,hwc,jw->ijc", Mh, x, Mw)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def quantize8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def dequantize8(q: np.ndarray) -> np.ndarray:
    return q.astype(np.float64) / 255.0


def write_png(path, x: np.ndarray) -> None:
    q = quantize8(x)
    Image.fromarray(q[..., 0] if q.shape[2] == 1 else q).save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    a = np.asarray(Image.open(path))
    if a.ndim == 2:
        a = a[..., None]
    return dequantize8(a)


@dataclass
class Dataset:
    """In-memory dataset; ``hr`` is None for unpaired (LR-only) sets."""

    lr: np.ndarray  # (N, h, w, C)
    hr: np.ndarray | None  # (N, H, W, C)
    seeds: np.ndarray
    prompt_ids: np.ndarray
    specs: list[DegradationSpec] = field(default_factory=list)
    kinds: list[str] = field(default_factory=list)
    factor: int = 4

    def __len__(self) -> int:
        return len(self.seeds)

    @property
    def paired(self) -> bool:
        return self.hr is not None

    def lr_up(self, idx=None) -> np.ndarray:
        lr = self.lr if idx is None else self.lr[idx]
        if lr.ndim == 3:
            return upsample(lr, self.factor)
        return np.stack([upsample(x, self.factor) for x in lr])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        idx = np.flatnonzero(idx) if idx.dtype == bool else idx.astype(np.intp)
        return Dataset(self.lr[idx], None if self.hr is None else self.hr[idx], self.seeds[idx],
                       self.prompt_ids[idx], [self.specs[i] for i in idx], [self.kinds[i] for i in idx],
                       self.factor)

    def pairs(self):
        for i in range(len(self)):
            yield TrainingPair(self.hr[i] if self.hr is not None else None, self.lr[i], self.specs[i],
                               int(self.seeds[i]), int(self.prompt_ids[i]))


def _item(master_seed, item_seed, hr_size, channels, spec_sampler):
    rng = np.random.default_rng([master_seed, item_seed])
    kind_idx = int(rng.integers(0, len(GENERATOR_KINDS)))
    kind = GENERATOR_KINDS[kind_idx]
    spec = spec_sampler(rng)
    hr = generate_hr(kind, hr_size, rng, channels, spec.downscale_factor)
    lr = degrade(hr, spec, rng)
    return hr, lr, spec, kind, kind_idx


def check_disjoint(ranges: dict[str, tuple[int, int]]) -> None:
    items = sorted(ranges.items(), key=lambda kv: kv[1][0])
    for (na, (a0, a1)), (nb, (b0, b1)) in zip(items, items[1:]):
        if b0 < a1:
            raise RejectedInput(f"seed ranges {na}[{a0},{a1}) and {nb}[{b0},{b1}) intersect")


def build_dataset(n_pairs: int, hr_size: int = 64, spec_sampler: SpecSampler | None = None,
                  master_seed: int = 0, seed_start: int = 0, channels: int = 1,
                  quantize: bool = True) -> Dataset:
    """Paired dataset with item seeds ``seed_start .. seed_start + n_pairs - 1``.

    With ``quantize`` the images are rounded through the 8-bit PNG rule so the
    in-memory set equals what is read back from disk.
    """
    if n_pairs < 1:
        raise RejectedInput("n_pairs must be >= 1")
    spec_sampler = spec_sampler or SpecSampler()
    hrs, lrs, specs, kinds, ids = [], [], [], [], []
    for s in range(seed_start, seed_start + n_pairs):
        hr, lr, spec, kind, kid = _item(master_seed, s, hr_size, channels, spec_sampler)
        if quantize:
            hr, lr = dequantize8(quantize8(hr)), dequantize8(quantize8(lr))
        hrs.append(hr)
        lrs.append(lr)
        specs.append(spec)
        kinds.append(kind)
        ids.append(kid)
    return Dataset(np.stack(lrs), np.stack(hrs), np.arange(seed_start, seed_start + n_pairs),
                   np.array(ids), specs, kinds, spec_sampler.factor)


def build_unpaired_lq(n: int, hr_size: int = 64, spec_sampler: SpecSampler | None = None,
                      master_seed: int = 0, seed_start: int = 1_000_000, channels: int = 1,
                      paired_ranges: list[tuple[int, int]] = (), quantize: bool = True) -> Dataset:
    """LR-only dataset; the HR images are generated then withheld."""
    if n < 1:
        raise RejectedInput("n must be >= 1")
    ranges = {f"paired{i}": r for i, r in enumerate(paired_ranges)}
    ranges["unpaired"] = (seed_start, seed_start + n)
    check_disjoint(ranges)
    ds = build_dataset(n, hr_size, spec_sampler, master_seed, seed_start, channels, quantize)
    ds.hr = None
    return ds


def save_dataset(ds: Dataset, root, name: str) -> Path:
    """Write PNGs plus ``<name>.jsonl`` (one record per item)."""
    root = Path(root)
    img_dir = root / name
    img_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(len(ds)):
        rec = {"id": f"{name}-{i:05d}", "seed": int(ds.seeds[i]), "kind": ds.kinds[i],
               "prompt_id": int(ds.prompt_ids[i]), "spec": asdict(ds.specs[i])}
        lr_path = img_dir / f"{i:05d}_lr.png"
        write_png(lr_path, ds.lr[i])
        rec["lr_path"] = str(lr_path.relative_to(root))
        if ds.hr is not None:
            hr_path = img_dir / f"{i:05d}_hr.png"
            write_png(hr_path, ds.hr[i])
            rec["hr_path"] = str(hr_path.relative_to(root))
        lines.append(json.dumps(rec, sort_keys=True))
    manifest = root / f"{name}.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(root, name: str) -> Dataset:
    root = Path(root)
    manifest = root / f"{name}.jsonl"
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest {manifest} not found")
    recs = [json.loads(l) for l in manifest.read_text().splitlines() if l.strip()]
    lr = np.stack([read_png(root / r["lr_path"]) for r in recs])
    hr = np.stack([read_png(root / r["hr_path"]) for r in recs]) if "hr_path" in recs[0] else None
    specs = [DegradationSpec(**r["spec"]) for r in recs]
    return Dataset(lr, hr, np.array([r["seed"] for r in recs]), np.array([r["prompt_id"] for r in recs]),
                   specs, [r["kind"] for r in recs], specs[0].downscale_factor)
