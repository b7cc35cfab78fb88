"""Any-resolution vision transformer student.

The network patch-embeds an image, adds bilinearly resized learned position
embeddings, prepends one summary token, and runs pre-norm transformer blocks
whose attention scope follows a per-layer schedule: global attention or
disjoint square windows. Windowed layers keep the summary token in every
window's key/value set so summary information flows at every depth.

All math is float64 numpy with hand-written reverse-mode gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import FeatureGrid, PatchGrid
from . import ops

WINDOW_MIN = 6
WINDOW_MAX = 32


class DivisibilityError(ValueError):
    """Raised when a strict window does not tile the token grid."""


@dataclass(frozen=True)
class LayerScope:
    """Attention scope of one block.

    ``window is None`` means global attention. ``fallback`` marks an adaptive
    windowed layer that degrades to global attention when the window does not
    tile the grid; a strict layer raises instead.
    """

    window: int | None = None
    fallback: bool = False

    def __post_init__(self):
        if self.window is not None:
            if not (WINDOW_MIN <= self.window <= WINDOW_MAX):
                raise ValueError(
                    f"window {self.window} outside [{WINDOW_MIN}, {WINDOW_MAX}]"
                )
        elif self.fallback:
            raise ValueError("fallback only applies to windowed layers")

    @classmethod
    def parse(cls, text: str) -> "LayerScope":
        text = text.strip()
        if text in ("g", "global"):
            return cls(None)
        if text.endswith("?"):
            return cls(int(text[:-1]), fallback=True)
        return cls(int(text))

    def __str__(self) -> str:
        if self.window is None:
            return "global"
        return f"{self.window}?" if self.fallback else str(self.window)


def _default_schedule(depth: int) -> tuple[LayerScope, ...]:
    # alternate adaptive window-8 / global, ending global
    out = []
    for i in range(depth):
        out.append(LayerScope(None) if i % 2 else LayerScope(8, fallback=True))
    return tuple(out)


@dataclass(frozen=True)
class StudentConfig:
    dim: int = 128
    depth: int = 8
    heads: int = 4
    patch: int = 16
    mlp_ratio: float = 4.0
    pos_base: int = 16
    schedule: tuple[LayerScope, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1 or self.patch < 1 or self.pos_base < 1:
            raise ValueError("depth, patch and pos_base must be positive")
        sched = self.schedule
        if not sched:
            sched = _default_schedule(self.depth)
            object.__setattr__(self, "schedule", sched)
        if len(sched) != self.depth:
            raise ValueError(
                f"schedule has {len(sched)} entries for depth {self.depth}"
            )

    @property
    def hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    def validate_for_training(self) -> None:
        """Extra requirement for training configs: at least one global layer."""
        if all(s.window is not None for s in self.schedule):
            raise ValueError("schedule needs at least one global layer")

    def with_schedule(self, text: str) -> "StudentConfig":
        entries = tuple(LayerScope.parse(t) for t in text.split(","))
        return replace(self, schedule=entries)


def parse_schedule(text: str, depth: int) -> tuple[LayerScope, ...]:
    entries = tuple(LayerScope.parse(t) for t in text.split(","))
    if len(entries) != depth:
        raise ValueError(f"schedule has {len(entries)} entries for depth {depth}")
    return entries


def resolve_schedule(cfg: StudentConfig, grid: PatchGrid) -> list[int | None]:
    """Map the configured schedule onto a concrete grid.

    Returns one entry per layer: None for global attention or the window side.
    Strict windows that do not tile the grid raise DivisibilityError naming
    the layer and the offending image dimension.
    """
    out: list[int | None] = []
    for i, scope in enumerate(cfg.schedule):
        w = scope.window
        if w is None:
            out.append(None)
            continue
        bad = None
        if grid.rows % w:
            bad = ("height", grid.rows * cfg.patch)
        elif grid.cols % w:
            bad = ("width", grid.cols * cfg.patch)
        if bad is None:
            out.append(w)
        elif scope.fallback:
            out.append(None)
        else:
            raise DivisibilityError(
                f"layer {i + 1}: window {w} ({w * cfg.patch} px) does not divide "
                f"image {bad[0]} {bad[1]} px (grid {grid.rows}x{grid.cols})"
            )
    return out


def init_params(cfg: StudentConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fresh parameter dict; creation order is fixed so draws are reproducible."""
    std = 0.02
    params: dict[str, np.ndarray] = {}
    in_dim = cfg.patch * cfg.patch * 3
    params["embed.w"] = rng.normal(0.0, std, (in_dim, cfg.dim))
    params["embed.b"] = np.zeros(cfg.dim)
    params["pos"] = rng.normal(0.0, std, (cfg.pos_base, cfg.pos_base, cfg.dim))
    params["summary"] = rng.normal(0.0, std, cfg.dim)
    for i in range(cfg.depth):
        pre = f"blk{i}."
        params[pre + "ln1.g"] = np.ones(cfg.dim)
        params[pre + "ln1.b"] = np.zeros(cfg.dim)
        for nm in ("wq", "wk", "wv", "wo"):
            params[pre + "att." + nm] = rng.normal(0.0, std, (cfg.dim, cfg.dim))
        for nm in ("bq", "bk", "bv", "bo"):
            params[pre + "att." + nm] = np.zeros(cfg.dim)
        params[pre + "ln2.g"] = np.ones(cfg.dim)
        params[pre + "ln2.b"] = np.zeros(cfg.dim)
        params[pre + "mlp.w1"] = rng.normal(0.0, std, (cfg.dim, cfg.hidden))
        params[pre + "mlp.b1"] = np.zeros(cfg.hidden)
        params[pre + "mlp.w2"] = rng.normal(0.0, std, (cfg.hidden, cfg.dim))
        params[pre + "mlp.b2"] = np.zeros(cfg.dim)
    params["lnf.g"] = np.ones(cfg.dim)
    params["lnf.b"] = np.zeros(cfg.dim)
    return params


def interp_pos_embed(base: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Bilinearly resize a (P, P, dim) embedding grid to (rows, cols, dim).

    Corner-aligned; weights are convex so values stay within the range of the
    base grid along each axis. Exactly linear in ``base``.
    """
    p_rows, p_cols, _ = base.shape
    wr = ops.bilinear_weights(p_rows, rows)
    wc = ops.bilinear_weights(p_cols, cols)
    return np.einsum("rp,cq,pqd->rcd", wr, wc, base, optimize=True)


def _interp_pos_embed_bwd(g: np.ndarray, p_rows: int, p_cols: int) -> np.ndarray:
    rows, cols, _ = g.shape
    wr = ops.bilinear_weights(p_rows, rows)
    wc = ops.bilinear_weights(p_cols, cols)
    return np.einsum("rp,cq,rcd->pqd", wr, wc, g, optimize=True)


def patchify(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, 3) image -> (rows*cols, patch*patch*3) row-major patch vectors."""
    h, w, c = image.shape
    rows, cols = h // patch, w // patch
    x = image.reshape(rows, patch, cols, patch, c)
    x = x.transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(x).reshape(rows * cols, patch * patch * c)


def _layer_params(params, pre):
    return {k: params[pre + "att." + k]
            for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}


def forward(cfg: StudentConfig, params, image: np.ndarray, want_grad: bool = False):
    """Run the student on one image.

    image: (H, W, 3) float array; H and W must be multiples of cfg.patch.
    Returns (summary, FeatureGrid, cache); cache is None unless ``want_grad``.
    """
    h, w, c = image.shape
    if c != 3:
        raise ValueError(f"expected 3 channels, got {c}")
    if h % cfg.patch or w % cfg.patch:
        raise DivisibilityError(
            f"image {h}x{w} not divisible by patch {cfg.patch}"
        )
    grid = PatchGrid(h // cfg.patch, w // cfg.patch, cfg.patch)
    scopes = resolve_schedule(cfg, grid)

    patches = patchify(np.asarray(image, dtype=np.float64), cfg.patch)
    emb, emb_cache = ops.linear_fwd(patches, params["embed.w"], params["embed.b"])
    pos = interp_pos_embed(params["pos"], grid.rows, grid.cols)
    tokens = np.concatenate(
        [params["summary"][None, :], emb + pos.reshape(-1, cfg.dim)], axis=0
    )

    blocks = []
    for i, scope in enumerate(scopes):
        pre = f"blk{i}."
        a_in, ln1_cache = ops.layernorm_fwd(
            tokens, params[pre + "ln1.g"], params[pre + "ln1.b"]
        )
        a_out, att_cache = ops.attention_fwd(
            a_in, _layer_params(params, pre), cfg.heads,
            (grid.rows, grid.cols), scope, with_summary=True, want_grad=want_grad,
        )
        tokens = tokens + a_out
        m_in, ln2_cache = ops.layernorm_fwd(
            tokens, params[pre + "ln2.g"], params[pre + "ln2.b"]
        )
        h1, l1_cache = ops.linear_fwd(m_in, params[pre + "mlp.w1"], params[pre + "mlp.b1"])
        h2, gelu_cache = ops.gelu_fwd(h1)
        m_out, l2_cache = ops.linear_fwd(h2, params[pre + "mlp.w2"], params[pre + "mlp.b2"])
        tokens = tokens + m_out
        if want_grad:
            blocks.append((ln1_cache, att_cache, ln2_cache, l1_cache, gelu_cache, l2_cache))

    final, lnf_cache = ops.layernorm_fwd(tokens, params["lnf.g"], params["lnf.b"])
    summary = final[0]
    features = FeatureGrid(
        np.ascontiguousarray(final[1:].reshape(grid.rows, grid.cols, cfg.dim)),
        cfg.patch,
    )
    cache = None
    if want_grad:
        cache = {
            "cfg": cfg, "grid": grid, "emb": emb_cache, "blocks": blocks,
            "lnf": lnf_cache, "n_tokens": tokens.shape[0],
        }
    return summary, features, cache


def backward(cache, d_summary: np.ndarray, d_features: np.ndarray):
    """Gradients of a scalar loss w.r.t. every parameter.

    d_summary: (dim,); d_features: (rows, cols, dim) matching the forward grid.
    Returns a dict keyed like the parameter dict.
    """
    cfg: StudentConfig = cache["cfg"]
    grads: dict[str, np.ndarray] = {}
    g = np.concatenate(
        [np.asarray(d_summary)[None, :], np.asarray(d_features).reshape(-1, cfg.dim)],
        axis=0,
    )
    g, grads["lnf.g"], grads["lnf.b"] = ops.layernorm_bwd(cache["lnf"], g)

    for i in range(cfg.depth - 1, -1, -1):
        pre = f"blk{i}."
        ln1_cache, att_cache, ln2_cache, l1_cache, gelu_cache, l2_cache = cache["blocks"][i]
        dh2, grads[pre + "mlp.w2"], grads[pre + "mlp.b2"] = ops.linear_bwd(l2_cache, g)
        dh1 = ops.gelu_bwd(gelu_cache, dh2)
        dm_in, grads[pre + "mlp.w1"], grads[pre + "mlp.b1"] = ops.linear_bwd(l1_cache, dh1)
        dres, grads[pre + "ln2.g"], grads[pre + "ln2.b"] = ops.layernorm_bwd(ln2_cache, dm_in)
        g = g + dres
        da_in, att_grads = ops.attention_bwd(att_cache, g)
        for k, v in att_grads.items():
            grads[pre + "att." + k] = v
        dres, grads[pre + "ln1.g"], grads[pre + "ln1.b"] = ops.layernorm_bwd(ln1_cache, da_in)
        g = g + dres

    grads["summary"] = g[0].copy()
    grid = cache["grid"]
    dpos = g[1:].reshape(grid.rows, grid.cols, cfg.dim)
    grads["pos"] = _interp_pos_embed_bwd(dpos, cfg.pos_base, cfg.pos_base)
    _, grads["embed.w"], grads["embed.b"] = ops.linear_bwd(cache["emb"], g[1:])
    return grads


def windowed_attention(features: FeatureGrid, w: int, p: dict, heads: int) -> FeatureGrid:
    """Single windowed self-attention pass over a bare feature grid.

    No summary token, no residual, no norm: just the attention operator.
    ``w`` must divide both grid sides. w=1 degenerates to the value path
    (softmax over a single logit), which is what the equivalence tests use.
    """
    rows, cols, dim = features.data.shape
    if rows % w or cols % w:
        raise DivisibilityError(f"window {w} does not divide grid {rows}x{cols}")
    tokens = features.data.reshape(rows * cols, dim)
    out, _ = ops.attention_fwd(
        tokens, p, heads, (rows, cols), w, with_summary=False, want_grad=False
    )
    return FeatureGrid(out.reshape(rows, cols, dim), features.patch)


def global_attention(features: FeatureGrid, p: dict, heads: int) -> FeatureGrid:
    """Full self-attention counterpart of :func:`windowed_attention`."""
    rows, cols, dim = features.data.shape
    tokens = features.data.reshape(rows * cols, dim)
    out, _ = ops.attention_fwd(
        tokens, p, heads, (rows, cols), None, with_summary=False, want_grad=False
    )
    return FeatureGrid(out.reshape(rows, cols, dim), features.patch)


def attention_flops(cfg: StudentConfig, grid: PatchGrid) -> int:
    """Attention score+value FLOPs for one forward pass at this grid.

    Global layer: 2*T^2*dim. Windowed layer: 2*T*w^2*dim, T = rows*cols.
    The summary token and projections are excluded; this is the scaling model
    used to compare schedules, not a full cost account.
    """
    t = grid.tokens
    total = 0
    for scope in resolve_schedule(cfg, grid):
        if scope is None:
            total += 2 * t * t * cfg.dim
        else:
            total += 2 * t * scope * scope * cfg.dim
    return total


def damp_perturb(params, sigma: float, rng: np.random.Generator):
    """Multiplicative weight noise: each linear-weight entry scaled by N(1, sigma^2).

    Biases, norm parameters, position embeddings and the summary token are
    left alone. Returns (perturbed, clean); ``clean`` is the original dict,
    untouched, so restoring is just using it again. Gradients computed under
    the perturbed weights are applied to the clean ones.
    """
    perturbed = {}
    for k in sorted(params):
        v = params[k]
        if k.endswith((".w", ".w1", ".w2")) or ".att.w" in k:
            perturbed[k] = v * rng.normal(1.0, sigma, v.shape)
        else:
            perturbed[k] = v
    return perturbed, params


def damp_restore(clean):
    """Counterpart of :func:`damp_perturb`; the clean dict was never touched."""
    return clean


def ema_init(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def ema_update(shadow, params, decay: float) -> None:
    """In-place: shadow <- decay*shadow + (1-decay)*params."""
    if shadow.keys() != params.keys():
        raise ValueError("shadow/param key mismatch")
    for k, v in params.items():
        s = shadow[k]
        s *= decay
        s += (1.0 - decay) * v
