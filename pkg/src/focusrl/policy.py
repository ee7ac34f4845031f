"""Two-head categorical policy with exact log-probabilities and gradients.

Both heads are single-hidden-layer tanh networks over flat inputs, reading
their weights from one flat float64 parameter vector.  The box head maps
scene features concatenated with the query embedding to four independent
blocks of coordinate-token logits; the answer head maps the query embedding
concatenated with cropped scene features to vocabulary logits.  Gradients
are hand-derived reverse mode so they can be validated against finite
differences, and sampling consumes a caller-supplied generator so every
draw is reproducible.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidToken, MissingInput

BBOX_HEAD = "bbox"
RESPONSE_HEAD = "response"

_CHECKPOINT_FORMAT = "flat-float64-le"


@dataclass(frozen=True)
class PolicyDims:
    """Network sizing derived from world and token-grid settings."""

    grid_size: int
    n_shapes: int
    n_colors: int
    bins: int
    hidden: int

    def __post_init__(self):
        if self.bins < 4:
            raise ValueError("bins must be at least 4")
        if self.hidden < 1:
            raise ValueError("hidden must be positive")

    @property
    def cells(self) -> int:
        return self.grid_size * self.grid_size

    @property
    def feature_dim(self) -> int:
        return self.cells * (self.n_shapes + self.n_colors + 1)

    @property
    def query_dim(self) -> int:
        return 3 + self.n_shapes + self.n_colors + 2 * self.grid_size + 2

    @property
    def vocab_size(self) -> int:
        return self.n_shapes + self.n_colors

    @property
    def bbox_in(self) -> int:
        return self.feature_dim + self.query_dim

    @property
    def resp_in(self) -> int:
        return self.query_dim + self.feature_dim

    @property
    def bbox_out(self) -> int:
        return 4 * self.bins

    def tensor_shapes(self) -> list:
        """Ordered (name, shape) layout of the flat vector."""
        h = self.hidden
        return [
            ("bbox_w1", (h, self.bbox_in)),
            ("bbox_b1", (h,)),
            ("bbox_w2", (self.bbox_out, h)),
            ("bbox_b2", (self.bbox_out,)),
            ("resp_w1", (h, self.resp_in)),
            ("resp_b1", (h,)),
            ("resp_w2", (self.vocab_size, h)),
            ("resp_b2", (self.vocab_size,)),
        ]

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.tensor_shapes())

    @classmethod
    def from_world(cls, world_cfg, bins: int, hidden: int) -> "PolicyDims":
        return cls(world_cfg.grid_size, world_cfg.n_shapes, world_cfg.n_colors, bins, hidden)


def _bind_views(obj, dims: PolicyDims, flat: np.ndarray):
    offset = 0
    for name, shape in dims.tensor_shapes():
        size = int(np.prod(shape))
        setattr(obj, name, flat[offset : offset + size].reshape(shape))
        offset += size


class PolicyParams:
    """Flat float64 parameter vector plus named per-tensor views.

    Views share memory with ``flat``, so in-place updates to the flat vector
    are immediately visible through them and vice versa.
    """

    def __init__(self, dims: PolicyDims, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.ndim != 1 or flat.size != dims.n_params:
            raise ValueError(f"expected {dims.n_params} parameters, got shape {flat.shape}")
        self.dims = dims
        self.flat = flat
        _bind_views(self, dims, flat)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.dims, self.flat.copy())


class ReferenceSnapshot:
    """Immutable copy of policy parameters with a provenance tag."""

    def __init__(self, dims: PolicyDims, flat: np.ndarray, provenance: str):
        frozen = np.array(flat, dtype=np.float64, copy=True)
        frozen.setflags(write=False)
        self.dims = dims
        self.flat = frozen
        self.provenance = str(provenance)
        _bind_views(self, dims, frozen)


def snapshot(params, provenance: str) -> ReferenceSnapshot:
    """Freeze the current parameters under a provenance tag.  Snapshotting a
    snapshot preserves its values bitwise."""
    return ReferenceSnapshot(params.dims, params.flat, provenance)


def init_params(dims: PolicyDims, rng: np.random.Generator, scale: float = 0.05) -> PolicyParams:
    """Uniform initialization in [-scale, scale]."""
    if scale <= 0.0:
        raise ValueError("init scale must be positive")
    return PolicyParams(dims, rng.uniform(-scale, scale, dims.n_params))


def _forward(p, head: str, inputs) -> tuple:
    x = np.concatenate(inputs)
    if head == BBOX_HEAD:
        w1, b1, w2, b2 = p.bbox_w1, p.bbox_b1, p.bbox_w2, p.bbox_b2
    elif head == RESPONSE_HEAD:
        w1, b1, w2, b2 = p.resp_w1, p.resp_b1, p.resp_w2, p.resp_b2
    else:
        raise ValueError(f"unknown head: {head!r}")
    h = np.tanh(w1 @ x + b1)
    return x, h, w2 @ h + b2


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def _check_bbox_tokens(tokens, bins: int) -> tuple:
    toks = tuple(int(t) for t in tokens)
    if len(toks) != 4 or any(t < 0 or t >= bins for t in toks):
        raise InvalidToken(f"bbox tokens out of range [0, {bins - 1}]: {tokens!r}")
    return toks

def _check_answer_token(token, vocab_size: int) -> int:
    t = int(token)
    if t < 0 or t >= vocab_size:
        raise InvalidToken(f"answer token out of range [0, {vocab_size - 1}]: {token!r}")
    return t


def logprob(params, head: str, inputs, tokens) -> float:
    """Exact log-likelihood of ``tokens`` under one head.

    The box head scores four coordinate tokens as independent per-block
    softmaxes (their log-probabilities sum); the answer head scores a single
    vocabulary index.  ``inputs`` is the pair of vectors the head concatenates:
    (features, query) for the box head, (query, crop) for the answer head.
    """
    dims = params.dims
    _, _, logits = _forward(params, head, inputs)
    if head == BBOX_HEAD:
        toks = _check_bbox_tokens(tokens, dims.bins)
        total = 0.0
        for i, t in enumerate(toks):
            block = logits[i * dims.bins : (i + 1) * dims.bins]
            total += _log_softmax(block)[t]
        return float(total)
    t = _check_answer_token(tokens, dims.vocab_size)
    return float(_log_softmax(logits)[t])


def accumulate_grad_logprob(params, head: str, inputs, tokens, weight: float, out: np.ndarray) -> float:
    """Add ``weight`` times the gradient of the token log-likelihood to the
    flat buffer ``out``; returns the log-likelihood as a byproduct.

    Only the tensors of the selected head are touched; coordinates for the
    other head keep whatever ``out`` already holds.
    """
    dims = params.dims
    x, h, logits = _forward(params, head, inputs)
    if head == BBOX_HEAD:
        toks = _check_bbox_tokens(tokens, dims.bins)
        dlogits = np.empty_like(logits)
        logp = 0.0
        for i, t in enumerate(toks):
            block = logits[i * dims.bins : (i + 1) * dims.bins]
            ls = _log_softmax(block)
            logp += ls[t]
            dblock = -np.exp(ls)
            dblock[t] += 1.0
            dlogits[i * dims.bins : (i + 1) * dims.bins] = dblock
        w1, w2 = params.bbox_w1, params.bbox_w2
        gw1, gb1, gw2, gb2 = _grad_views(dims, out, BBOX_HEAD)
    else:
        t = _check_answer_token(tokens, dims.vocab_size)
        ls = _log_softmax(logits)
        logp = ls[t]
        dlogits = -np.exp(ls)
        dlogits[t] += 1.0
        w1, w2 = params.resp_w1, params.resp_w2
        gw1, gb1, gw2, gb2 = _grad_views(dims, out, RESPONSE_HEAD)
    dlogits *= weight
    gw2 += np.outer(dlogits, h)
    gb2 += dlogits
    dpre = (w2.T @ dlogits) * (1.0 - h * h)
    gw1 += np.outer(dpre, x)
    gb1 += dpre
    return float(logp)


def _grad_views(dims: PolicyDims, flat: np.ndarray, head: str) -> tuple:
    views = {}
    offset = 0
    prefix = "bbox_" if head == BBOX_HEAD else "resp_"
    for name, shape in dims.tensor_shapes():
        size = int(np.prod(shape))
        if name.startswith(prefix):
            views[name[len(prefix) :]] = flat[offset : offset + size].reshape(shape)
        offset += size
    return views["w1"], views["b1"], views["w2"], views["b2"]


def grad_logprob(params, head: str, inputs, tokens) -> np.ndarray:
    """Gradient of the token log-likelihood over the full flat vector.

    Entries for the untouched head are exactly zero.
    """
    out = np.zeros(params.dims.n_params)
    accumulate_grad_logprob(params, head, inputs, tokens, 1.0, out)
    return out


def _sample_block(logits: np.ndarray, rng: np.random.Generator, temperature: float) -> int:
    scaled = logits / temperature
    p = np.exp(scaled - scaled.max())
    cum = np.cumsum(p / p.sum())
    idx = int(np.searchsorted(cum, rng.random(), side="right"))
    return min(idx, logits.size - 1)


def sample_bbox(params, features, query_emb, rng: np.random.Generator, temperature: float = 1.0) -> tuple:
    """Draw four coordinate tokens, one per block, at the given temperature."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    dims = params.dims
    _, _, logits = _forward(params, BBOX_HEAD, (features, query_emb))
    return tuple(
        _sample_block(logits[i * dims.bins : (i + 1) * dims.bins], rng, temperature)
        for i in range(4)
    )


def sample_response(params, query_emb, crop_feats, rng: np.random.Generator, temperature: float = 1.0) -> int:
    """Draw one vocabulary index at the given temperature."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    _, _, logits = _forward(params, RESPONSE_HEAD, (query_emb, crop_feats))
    return _sample_block(logits, rng, temperature)


def greedy_bbox(params, features, query_emb) -> tuple:
    """Most likely coordinate token per block."""
    dims = params.dims
    _, _, logits = _forward(params, BBOX_HEAD, (features, query_emb))
    return tuple(
        int(np.argmax(logits[i * dims.bins : (i + 1) * dims.bins])) for i in range(4)
    )


def greedy_response(params, query_emb, crop_feats) -> int:
    """Most likely vocabulary index."""
    _, _, logits = _forward(params, RESPONSE_HEAD, (query_emb, crop_feats))
    return int(np.argmax(logits))


def save_checkpoint(params, prefix, provenance: str, config_hash: str, seed: int) -> tuple:
    """Write ``<prefix>.bin`` (little-endian float64) and ``<prefix>.meta.json``.

    The metadata names the tensor layout, provenance tag, config hash, and
    seed, so a load can validate sizes before touching the weights.
    """
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    bin_path = prefix.with_name(prefix.name + ".bin")
    meta_path = prefix.with_name(prefix.name + ".meta.json")
    dims = params.dims
    if provenance is None:
        provenance = getattr(params, "provenance", "unknown")
    meta = {
        "format": _CHECKPOINT_FORMAT,
        "n_params": dims.n_params,
        "dims": asdict(dims),
        "tensors": [
            {"name": name, "shape": list(shape)} for name, shape in dims.tensor_shapes()
        ],
        "provenance": str(provenance),
        "config_hash": config_hash,
        "seed": int(seed),
    }
    bin_path.write_bytes(np.ascontiguousarray(params.flat, dtype="<f8").tobytes())
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return bin_path, meta_path


def load_checkpoint(prefix) -> tuple:
    """Read a checkpoint pair back as (PolicyParams, metadata dict)."""
    prefix = Path(prefix)
    bin_path = prefix.with_name(prefix.name + ".bin")
    meta_path = prefix.with_name(prefix.name + ".meta.json")
    if not bin_path.exists() or not meta_path.exists():
        raise MissingInput(f"checkpoint not found: {prefix}")
    try:
        meta = json.loads(meta_path.read_text())
        if meta.get("format") != _CHECKPOINT_FORMAT:
            raise ValueError(f"unknown checkpoint format: {meta.get('format')!r}")
        dims = PolicyDims(**meta["dims"])
        flat = np.frombuffer(bin_path.read_bytes(), dtype="<f8").astype(np.float64)
        if flat.size != meta["n_params"] or flat.size != dims.n_params:
            raise ValueError(
                f"checkpoint holds {flat.size} values, expected {dims.n_params}"
            )
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise MissingInput(f"malformed checkpoint at {prefix}: {exc}") from exc
    return PolicyParams(dims, flat), meta
