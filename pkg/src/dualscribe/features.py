"""Per-image spatial feature grids from two frozen backbones, fused into one
region sequence for the encoder.

The two stub backbones stand in for differently pre-trained CNNs: each is a
small frozen conv stack whose weights (and nonlinearity mix) derive
deterministically from a seed, so the same (seed, image) always yields a
bitwise-identical grid.  A third backbone kind loads grids from a binary
feature file, so real extracted features can be dropped in without code
changes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError

STUB_GENERAL = "stub_general"
STUB_DOMAIN = "stub_domain"
PRECOMPUTED = "precomputed"

_STUB_KINDS = (STUB_GENERAL, STUB_DOMAIN)
_STUB_MID_CHANNELS = 8


@dataclass(frozen=True)
class SyntheticImage:
    """Grayscale image, pixel values in [0, 1], shape [H, W, 1]."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] != 1:
            raise ShapeError(f"image must be [H, W, 1], got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise DataError("image pixel values must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class FeatureGrid:
    """H x W x C grid of region feature vectors."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ShapeError(f"feature grid must be [H>=1, W>=1, C>=1], got {v.shape}")
        if not np.isfinite(v).all():
            raise DataError("feature grid contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class BackboneSpec:
    """Which grid producer to use and what grid it must emit."""

    kind: str
    grid_h: int
    grid_w: int
    out_channels: int
    seed: int = 0
    path: str | None = None

    def __post_init__(self):
        if self.kind not in (*_STUB_KINDS, PRECOMPUTED):
            raise DataError(f"unknown backbone kind {self.kind!r}")
        if min(self.grid_h, self.grid_w, self.out_channels) < 1:
            raise ShapeError("grid_h, grid_w, out_channels must all be >= 1")
        if self.kind == PRECOMPUTED and not self.path:
            raise DataError("precomputed backbone needs a feature file path")


@dataclass
class StubWeights:
    """Frozen conv-stack weights; all derived from the spec seed."""

    k1: np.ndarray  # [3, 3, 1, mid]
    b1: np.ndarray  # [mid]
    k2: np.ndarray  # [3, 3, mid, out]
    b2: np.ndarray  # [out]


def stub_weights(spec: BackboneSpec) -> StubWeights:
    """Derive the frozen stack weights from (kind, seed), deterministically."""
    kind_offset = _STUB_KINDS.index(spec.kind)
    rng = np.random.default_rng([spec.seed, kind_offset])
    mid = _STUB_MID_CHANNELS
    k1 = rng.normal(0.0, 1.0 / 3.0, size=(3, 3, 1, mid))
    b1 = rng.normal(0.0, 0.05, size=(mid,))
    k2 = rng.normal(0.0, 1.0 / math.sqrt(9 * mid), size=(3, 3, mid, spec.out_channels))
    b2 = rng.normal(0.0, 0.05, size=(spec.out_channels,))
    return StubWeights(k1, b1, k2, b2)


def _conv3x3_same(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Stride-1 'same' 3x3 convolution on an [H, W, Cin] array."""
    padded = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    windows = sliding_window_view(padded, (3, 3), axis=(0, 1))  # [H, W, Cin, 3, 3]
    return np.einsum("hwcij,ijco->hwo", windows, kernel, optimize=True) + bias


def _adaptive_avg_pool(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Average-pool [H, W, C] down to [out_h, out_w, C] with contiguous bins."""
    h, w, c = x.shape
    out = np.empty((out_h, out_w, c))
    for i in range(out_h):
        r0, r1 = (i * h) // out_h, -(-((i + 1) * h) // out_h)
        for j in range(out_w):
            c0, c1 = (j * w) // out_w, -(-((j + 1) * w) // out_w)
            out[i, j] = x[r0:r1, c0:c1].mean(axis=(0, 1))
    return out


def _relu(x):
    return np.maximum(x, 0.0)


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


# Per-kind nonlinearity mix: both map 0 -> 0, so a zero image with zero
# biases stays zero through the whole stack.
_STUB_ACTIVATIONS = {
    STUB_GENERAL: (_relu, np.tanh),
    STUB_DOMAIN: (_gelu, _relu),
}


def run_stub_stack(spec: BackboneSpec, weights: StubWeights, image: SyntheticImage) -> np.ndarray:
    """Apply the conv/pool stack; split out so tests can alter weights."""
    act1, act2 = _STUB_ACTIVATIONS[spec.kind]
    h = act1(_conv3x3_same(image.pixels, weights.k1, weights.b1))
    h = act2(_conv3x3_same(h, weights.k2, weights.b2))
    return _adaptive_avg_pool(h, spec.grid_h, spec.grid_w)


class FeatureStore:
    """In-memory index over a precomputed-feature file."""

    def __init__(self, path: str, grids: dict[str, np.ndarray]):
        self.path = path
        self._grids = grids

    def get(self, image_id: str) -> np.ndarray:
        grid = self._grids.get(image_id)
        if grid is None:
            raise DataError(f"no precomputed features for {image_id!r} in {self.path}")
        return grid

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._grids

    def __len__(self) -> int:
        return len(self._grids)


_DFGR_MAGIC = b"DFGR"
_DFGR_VERSION = 1


def write_feature_file(path: str, grids: dict[str, np.ndarray]) -> None:
    """Write image-id -> [H, W, C] grids in the binary feature format."""
    with open(path, "wb") as fh:
        fh.write(_DFGR_MAGIC)
        fh.write(struct.pack("<II", _DFGR_VERSION, len(grids)))
        for image_id, grid in grids.items():
            grid = np.asarray(grid, dtype=np.float64)
            if grid.ndim != 3:
                raise ShapeError(f"grid for {image_id!r} must be 3-d, got {grid.shape}")
            name = image_id.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            h, w, c = grid.shape
            fh.write(struct.pack("<III", h, w, c))
            fh.write(grid.astype("<f4").tobytes(order="C"))


def read_feature_file(path: str) -> FeatureStore:
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open feature file {path}: {exc}") from exc
    with fh:
        magic = fh.read(4)
        if magic != _DFGR_MAGIC:
            raise DataError(f"{path} is not a feature file (bad magic {magic!r})")
        version, count = struct.unpack("<II", fh.read(8))
        if version != _DFGR_VERSION:
            raise DataError(f"{path}: unsupported feature file version {version}")
        grids: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            image_id = fh.read(name_len).decode("utf-8")
            h, w, c = struct.unpack("<III", fh.read(12))
            payload = fh.read(h * w * c * 4)
            if len(payload) != h * w * c * 4:
                raise DataError(f"{path}: truncated entry for {image_id!r}")
            grid = np.frombuffer(payload, dtype="<f4").astype(np.float64)
            grids[image_id] = grid.reshape(h, w, c)
    return FeatureStore(path, grids)


class StubBackbone:
    """Deterministic frozen extractor for one stub spec."""

    def __init__(self, spec: BackboneSpec):
        if spec.kind not in _STUB_KINDS:
            raise DataError(f"StubBackbone cannot serve kind {spec.kind!r}")
        self.spec = spec
        self.weights = stub_weights(spec)

    def __call__(self, image: SyntheticImage) -> FeatureGrid:
        if image.height < self.spec.grid_h or image.width < self.spec.grid_w:
            raise DataError(
                f"image {image.height}x{image.width} smaller than grid "
                f"{self.spec.grid_h}x{self.spec.grid_w}"
            )
        return FeatureGrid(run_stub_stack(self.spec, self.weights, image))


def make_backbone(spec: BackboneSpec):
    """Build the extractor callable for a spec.

    Stub kinds take a SyntheticImage; the precomputed kind takes the
    image id under which its grid was stored.
    """
    if spec.kind in _STUB_KINDS:
        return StubBackbone(spec)
    store = read_feature_file(spec.path)

    def lookup(image_key) -> FeatureGrid:
        if not isinstance(image_key, str):
            raise DataError("precomputed backbone needs an image id, not pixels")
        grid = store.get(image_key)
        if grid.shape != (spec.grid_h, spec.grid_w, spec.out_channels):
            raise DataError(
                f"stored grid {grid.shape} for {image_key!r} does not match spec "
                f"({spec.grid_h}, {spec.grid_w}, {spec.out_channels})"
            )
        return FeatureGrid(grid)

    return lookup


def extract(spec: BackboneSpec, image) -> FeatureGrid:
    """One-shot extraction; builds the backbone each call (stubs are cheap)."""
    return make_backbone(spec)(image)


# ---------------------------------------------------------------------------
# fusion into the encoder's region sequence
# ---------------------------------------------------------------------------


def _pool_to(grid: FeatureGrid, h: int, w: int) -> FeatureGrid:
    """Reduce a grid to (h, w) by non-overlapping average pooling."""
    gh, gw = grid.height, grid.width
    if gh == h and gw == w:
        return grid
    if gh % h or gw % w:
        raise ShapeError(
            f"grid ({gh}, {gw}) not an integer multiple of target ({h}, {w}); "
            "cannot align by average pooling"
        )
    v = grid.values.reshape(h, gh // h, w, gw // w, grid.channels)
    return FeatureGrid(v.mean(axis=(1, 3)))


def align_grids(a: FeatureGrid, b: FeatureGrid) -> tuple[FeatureGrid, FeatureGrid]:
    """Pool the larger grid down so both share the smaller (H, W)."""
    h, w = min(a.height, b.height), min(a.width, b.width)
    return _pool_to(a, h, w), _pool_to(b, h, w)


@dataclass
class RegionEmbedder:
    """Learned projection + 2D positional table mapping grids to the model dim.

    ``in_channels`` is the channel count after per-cell concatenation (the
    sum for the dual path, the single grid's count otherwise).
    """

    grid_h: int
    grid_w: int
    in_channels: int
    d_model: int
    proj_w: Tensor = field(init=False)
    proj_b: Tensor = field(init=False)
    pos: Tensor = field(init=False)

    def __post_init__(self):
        self.proj_w = Tensor(np.zeros((self.in_channels, self.d_model)), requires_grad=True)
        self.proj_b = Tensor(np.zeros(self.d_model), requires_grad=True)
        self.pos = Tensor(np.zeros((self.grid_h * self.grid_w, self.d_model)), requires_grad=True)

    def init_params(self, rng: np.random.Generator) -> None:
        limit = math.sqrt(6.0 / (self.in_channels + self.d_model))
        self.proj_w = Tensor(
            rng.uniform(-limit, limit, size=(self.in_channels, self.d_model)),
            requires_grad=True,
        )
        self.proj_b = Tensor(np.zeros(self.d_model), requires_grad=True)
        self.pos = Tensor(
            rng.normal(0.0, 0.02, size=(self.grid_h * self.grid_w, self.d_model)),
            requires_grad=True,
        )

    def named_parameters(self, prefix: str = "embedder"):
        yield f"{prefix}.proj_w", self.proj_w
        yield f"{prefix}.proj_b", self.proj_b
        yield f"{prefix}.pos", self.pos


def _embed_cells(cells: Tensor, embedder: RegionEmbedder) -> Tensor:
    projected = ad.linear(cells, embedder.proj_w, embedder.proj_b)
    return ad.add(projected, embedder.pos)


def fuse_dual(a: FeatureGrid, b: FeatureGrid, embedder: RegionEmbedder) -> Tensor:
    """Concatenate two grids per cell, project, add positions.

    Returns the [H*W, d_model] region sequence (row-major cell order).
    """
    a, b = align_grids(a, b)
    if (a.height, a.width) != (embedder.grid_h, embedder.grid_w):
        raise ShapeError(
            f"aligned grids {(a.height, a.width)} do not match embedder grid "
            f"({embedder.grid_h}, {embedder.grid_w})"
        )
    if a.channels + b.channels != embedder.in_channels:
        raise ShapeError(
            f"channel sum {a.channels}+{b.channels} does not match embedder "
            f"in_channels {embedder.in_channels}"
        )
    stacked = np.concatenate([a.values, b.values], axis=2)
    cells = Tensor(stacked.reshape(-1, embedder.in_channels))
    return _embed_cells(cells, embedder)


def single_path(a: FeatureGrid, embedder: RegionEmbedder) -> Tensor:
    """Project one grid's cells into the region sequence [H*W, d_model]."""
    if (a.height, a.width) != (embedder.grid_h, embedder.grid_w):
        raise ShapeError(
            f"grid {(a.height, a.width)} does not match embedder grid "
            f"({embedder.grid_h}, {embedder.grid_w})"
        )
    if a.channels != embedder.in_channels:
        raise ShapeError(
            f"grid channels {a.channels} do not match embedder in_channels "
            f"{embedder.in_channels}"
        )
    cells = Tensor(a.values.reshape(-1, embedder.in_channels))
    return _embed_cells(cells, embedder)
