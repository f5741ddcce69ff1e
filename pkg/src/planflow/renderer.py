"""Flow-matching renderer over toy latents.

The toy VAE is an exactly invertible per-pixel affine map into C channels. The
renderer patchifies the noisy target latent plus any source latents into one
visual token stream (sources as extra segments with their own rotary segment
phases), runs self-attention + cross-attention blocks, and reads a velocity
field off the target tokens. Sampling is plain Euler from noise at t=0 to data
at t=1 on a shift-warped time grid, with the guidance module composing the
per-subset forwards at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .guidance import GuidanceSpec, compose
from .numerics import DimensionError, ContractError, Rng, Tensor, add, concat, embedding, matmul, mul, narrow, no_grad, sub, tmean
from .posenc import RopeConfig, spatial_angles
from .schedules import sample_timestep, shift_toward_noise
from .toydata import VOCAB


class DomainError(ValueError):
    pass


class LayoutError(ValueError):
    pass


# ---------------------------------------------------------------------------
# toy VAE: exactly invertible channel-wise affine map
# ---------------------------------------------------------------------------

class ToyVae:
    """latent[..., c] = scale[c] * x + offset[c]; decode is the exact pseudo-inverse."""

    def __init__(self, channels: int = 4):
        base_scale = np.array([1.0, -0.5, 0.25, 2.0])
        base_offset = np.array([0.1, -0.2, 0.3, 0.0])
        reps = int(np.ceil(channels / 4))
        self.scale = np.tile(base_scale, reps)[:channels]
        self.offset = np.tile(base_offset, reps)[:channels]
        self.channels = channels

    def encode(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        if frames.min() < -1e-9 or frames.max() > 1.0 + 1e-9:
            raise DomainError(
                f"frame values must lie in [0, 1], got [{frames.min():.3g}, {frames.max():.3g}]"
            )
        return frames[..., None] * self.scale + self.offset

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=np.float64)
        centered = latent - self.offset
        return (centered * self.scale).sum(axis=-1) / (self.scale * self.scale).sum()


# ---------------------------------------------------------------------------
# latent <-> token helpers
# ---------------------------------------------------------------------------

def patchify(latent: np.ndarray, patch: tuple[int, int, int]) -> tuple[tuple[int, int, int], np.ndarray]:
    t, h, w, c = latent.shape
    pt, ph, pw = patch
    if t % pt or h % ph or w % pw:
        raise DimensionError(f"latent grid {(t, h, w)} not divisible by patch {patch}")
    gt, gh, gw = t // pt, h // ph, w // pw
    tokens = (
        latent.reshape(gt, pt, gh, ph, gw, pw, c)
        .transpose(0, 2, 4, 1, 3, 5, 6)
        .reshape(gt * gh * gw, pt * ph * pw * c)
    )
    return (gt, gh, gw), tokens


def unpatchify(tokens: np.ndarray, grid: tuple[int, int, int], patch: tuple[int, int, int], channels: int) -> np.ndarray:
    gt, gh, gw = grid
    pt, ph, pw = patch
    return (
        tokens.reshape(gt, gh, gw, pt, ph, pw, channels)
        .transpose(0, 3, 1, 4, 2, 5, 6)
        .reshape(gt * pt, gh * ph, gw * pw, channels)
    )


# ---------------------------------------------------------------------------
# flow sample
# ---------------------------------------------------------------------------

@dataclass
class FlowSample:
    """Straight-line interpolant: x_t = t*data + (1-t)*noise, v = data - noise."""

    data: np.ndarray
    noise: np.ndarray
    t: float
    x_t: np.ndarray = field(init=False)
    v_target: np.ndarray = field(init=False)

    def __post_init__(self):
        self.x_t = self.t * self.data + (1.0 - self.t) * self.noise
        self.v_target = self.data - self.noise


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class RendererConfig:
    hidden_dim: int = 32
    blocks: int = 2
    heads: int = 2
    patch: tuple[int, int, int] = (1, 2, 2)
    channels: int = 4
    vocab_size: int = len(VOCAB)
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    segment_base: float = 10000.0
    segment_phases: bool = True   # segment-aware rotary phases on by default
    time_features: int = 16
    planner_dim: int = 32         # width of the planner states fed to the projector

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return int(np.prod(self.patch)) * self.channels

    def rope(self) -> RopeConfig:
        return RopeConfig(head_dim=self.head_dim, base=self.rope_base, segment_base=self.segment_base)


class RendererModel:
    def __init__(self, cfg: RendererConfig, rng: Rng):
        self.cfg = cfg
        d, pd = cfg.hidden_dim, cfg.patch_dim
        hidden = cfg.mlp_ratio * d
        p: dict[str, Tensor] = {}
        p["patch_proj"] = nets.weight(rng.child(1), pd, d)
        p["patch_bias"] = nets.zeros_param(1, d)
        p["time.w1"] = nets.weight(rng.child(2), cfg.time_features, d)
        p["time.b1"] = nets.zeros_param(1, d)
        p["time.w2"] = nets.weight(rng.child(3), d, d)
        p["time.b2"] = nets.zeros_param(1, d)
        p["text_embed"] = nets.normal_param(rng.child(4), (cfg.vocab_size, d), 0.5)
        p["null_cond"] = nets.normal_param(rng.child(5), (1, d), 0.5)
        # zero-initialized projector: planner states contribute nothing until trained
        p["cond_proj"] = nets.zeros_param(cfg.planner_dim, d)
        p["cond_bias"] = nets.zeros_param(1, d)
        for i in range(cfg.blocks):
            r = rng.child(10 + i)
            pre = f"block{i}."
            p[pre + "ln1.g"], p[pre + "ln1.b"] = nets.ones_param(1, d), nets.zeros_param(1, d)
            p[pre + "wq"] = nets.weight(r.child(0), d, d)
            p[pre + "wk"] = nets.weight(r.child(1), d, d)
            p[pre + "wv"] = nets.weight(r.child(2), d, d)
            p[pre + "wo"] = nets.weight(r.child(3), d, d, gain=0.5)
            p[pre + "lnc.g"], p[pre + "lnc.b"] = nets.ones_param(1, d), nets.zeros_param(1, d)
            p[pre + "cq"] = nets.weight(r.child(4), d, d)
            p[pre + "ck"] = nets.weight(r.child(5), d, d)
            p[pre + "cv"] = nets.weight(r.child(6), d, d)
            p[pre + "co"] = nets.weight(r.child(7), d, d, gain=0.5)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = nets.ones_param(1, d), nets.zeros_param(1, d)
            p[pre + "w1"] = nets.weight(r.child(8), d, hidden)
            p[pre + "b1"] = nets.zeros_param(1, hidden)
            p[pre + "w2"] = nets.weight(r.child(9), hidden, d, gain=0.5)
            p[pre + "b2"] = nets.zeros_param(1, d)
        p["ln_f.g"], p["ln_f.b"] = nets.ones_param(1, d), nets.zeros_param(1, d)
        p["out_proj"] = nets.weight(rng.child(90), d, pd, gain=0.5)
        p["out_bias"] = nets.zeros_param(1, pd)
        self.params = p


def build_cond_tokens(model: RendererModel, text_ids: np.ndarray | None, planner_states) -> Tensor:
    """Conditioning stream: learned null token, text features, projected planner states."""
    p = model.params
    parts: list[Tensor] = [p["null_cond"]]
    if text_ids is not None and len(text_ids):
        parts.append(embedding(p["text_embed"], np.asarray(text_ids, dtype=np.intp)))
    if planner_states is not None:
        states = planner_states if isinstance(planner_states, Tensor) else Tensor(planner_states)
        parts.append(add(matmul(states, p["cond_proj"]), p["cond_bias"]))
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def _token_stream(cfg: RendererConfig, x_t: np.ndarray, source_latents: list[np.ndarray],
                  source_segment_indices: list[int] | None):
    """Patchify target + sources; returns (rows, angles, target_slice)."""
    if source_segment_indices is None:
        source_segment_indices = list(range(1, len(source_latents) + 1))
    if len(source_segment_indices) != len(source_latents):
        raise LayoutError("one segment index per source latent required")
    if len(set(source_segment_indices)) != len(source_segment_indices) or 0 in source_segment_indices:
        raise LayoutError(f"segment index collision in {source_segment_indices} (0 is the target)")
    rope = cfg.rope()
    seg_freq = rope.segment_frequencies()
    rows, angles = [], []
    for latent, seg in zip(source_latents, source_segment_indices):
        grid, toks = patchify(np.asarray(latent, dtype=np.float64), cfg.patch)
        rows.append(toks)
        pos = _grid_pos(grid)
        ang = spatial_angles(rope, pos)
        if cfg.segment_phases:
            ang = ang + seg * seg_freq[None, :]
        angles.append(ang)
    tgt_grid, tgt_tokens = patchify(np.asarray(x_t, dtype=np.float64), cfg.patch)
    rows.append(tgt_tokens)
    angles.append(spatial_angles(rope, _grid_pos(tgt_grid)))  # segment 0: no extra phase
    n_src = sum(r.shape[0] for r in rows[:-1])
    return np.concatenate(rows, axis=0), np.concatenate(angles, axis=0), (n_src, n_src + tgt_tokens.shape[0]), tgt_grid


def _grid_pos(grid: tuple[int, int, int]) -> np.ndarray:
    tt, hh, ww = np.meshgrid(np.arange(grid[0]), np.arange(grid[1]), np.arange(grid[2]), indexing="ij")
    return np.stack([tt.ravel(), hh.ravel(), ww.ravel()], axis=1)


def renderer_forward(
    model: RendererModel,
    x_t: np.ndarray,
    t: float,
    cond: Tensor,
    source_latents: list[np.ndarray] | None = None,
    source_segment_indices: list[int] | None = None,
    attn_bias: np.ndarray | None = None,
) -> Tensor:
    """Velocity prediction on the target tokens, shape (n_target, patch_dim).

    `attn_bias` is an optional additive self-attention bias over the full
    visual token stream (sources first, target last), used to force-mask
    columns when checking code-path equivalences.
    """
    cfg = model.cfg
    p = model.params
    source_latents = source_latents or []
    raw, angles, (tgt_lo, tgt_hi), _ = _token_stream(cfg, x_t, source_latents, source_segment_indices)
    x = add(matmul(Tensor(raw), p["patch_proj"]), p["patch_bias"])
    temb = nets.time_embedding(p, "time.", float(t), cfg.time_features)
    # time conditioning applies to the noisy target tokens; sources are clean
    time_rows = np.zeros((raw.shape[0], 1))
    time_rows[tgt_lo:tgt_hi] = 1.0
    x = add(x, mul(Tensor(time_rows), temb))
    for i in range(cfg.blocks):
        pre = f"block{i}."
        x = add(x, nets.self_attention(p, pre, nets.ln(p, pre + "ln1.", x), cfg.heads, attn_bias, angles))
        x = add(x, nets.cross_attention(p, pre, nets.ln(p, pre + "lnc.", x), cond, cfg.heads))
        x = add(x, nets.mlp(p, pre, nets.ln(p, pre + "ln2.", x)))
    out = narrow(x, 0, tgt_lo, tgt_hi - tgt_lo)
    return add(matmul(nets.ln(p, "ln_f.", out), p["out_proj"]), p["out_bias"])


@dataclass
class RenderBatch:
    """One training example with its conditioning already assembled."""

    target_latent: np.ndarray
    cond: Tensor
    source_latents: list[np.ndarray] = field(default_factory=list)


def train_step_renderer(model: RendererModel, batch: RenderBatch, task, timestep_cfg, rng: Rng) -> tuple[Tensor, FlowSample]:
    """Velocity-MSE flow-matching loss at a task-weighted timestep."""
    t = float(np.asarray(sample_timestep(timestep_cfg, task, rng)))
    noise = rng.normal(batch.target_latent.shape)
    fs = FlowSample(batch.target_latent, noise, t)
    pred = renderer_forward(model, fs.x_t, t, batch.cond, batch.source_latents)
    _, v_tok = patchify(fs.v_target, model.cfg.patch)
    resid = sub(pred, Tensor(v_tok))
    return tmean(mul(resid, resid)), fs


def euler_integrate(velocity_fn, x0: np.ndarray, steps: int, shift: float = 1.0) -> np.ndarray:
    """Euler steps on the shift-warped grid, fine near the noise end, 0 -> 1."""
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    grid = [float(shift_toward_noise(i / steps, shift)) for i in range(steps + 1)]
    x = np.array(x0, dtype=np.float64, copy=True)
    for i in range(steps):
        dt = grid[i + 1] - grid[i]
        x = x + dt * np.asarray(velocity_fn(x, grid[i]))
    return x


@dataclass
class CondInputs:
    """Raw conditions available for one render; subsets are derived from these."""

    text_ids: np.ndarray | None = None
    planner_states: np.ndarray | None = None
    source_latents: list[np.ndarray] = field(default_factory=list)
    source_roles: list[str] = field(default_factory=list)  # "vid" | "img" per source

    def __post_init__(self):
        if len(self.source_latents) != len(self.source_roles):
            raise LayoutError("one role per source latent required")
        bad = [r for r in self.source_roles if r not in ("vid", "img")]
        if bad:
            raise LayoutError(f"unknown source roles {bad}")


def render(
    model: RendererModel,
    cond_inputs: CondInputs,
    steps: int,
    spec: GuidanceSpec,
    shift: float,
    rng: Rng,
    target_grid: tuple[int, int, int],
) -> np.ndarray:
    """Sample a target latent by guided Euler integration from pure noise.

    Every step evaluates one forward per condition subset in the spec's chain
    and composes them into the guided velocity.
    """
    cfg = model.cfg
    for b in spec.present:
        if b == "vid" and "vid" not in cond_inputs.source_roles:
            raise LayoutError("guidance spec includes a video branch but no video source is present")
        if b == "img" and "img" not in cond_inputs.source_roles:
            raise LayoutError("guidance spec includes an image branch but no image source is present")
        if b == "txt" and (cond_inputs.text_ids is None or not len(cond_inputs.text_ids)):
            raise LayoutError("guidance spec includes a text branch but no text ids are present")
        if b == "tgt" and cond_inputs.planner_states is None:
            raise LayoutError("guidance spec includes a target-semantics branch but no planner states")

    chain = spec.subset_chain()
    per_subset: dict[frozenset, tuple[Tensor, list[np.ndarray], list[int]]] = {}
    with no_grad():
        for subset in chain:
            text = cond_inputs.text_ids if "txt" in subset else None
            states = cond_inputs.planner_states if "tgt" in subset else None
            cond = build_cond_tokens(model, text, states)
            latents, seg_idx = [], []
            for i, (lat, role) in enumerate(zip(cond_inputs.source_latents, cond_inputs.source_roles)):
                if role in subset:
                    latents.append(lat)
                    seg_idx.append(i + 1)
            per_subset[subset] = (cond, latents, seg_idx)

        t_len, h, w = target_grid
        noise = rng.normal((t_len, h, w, cfg.channels))

        def velocity(x, t):
            forwards = {}
            for subset, (cond, latents, seg_idx) in per_subset.items():
                tok = renderer_forward(model, x, t, cond, latents, seg_idx or None)
                grid, _ = patchify(x, cfg.patch)
                forwards[subset] = unpatchify(tok.data, grid, cfg.patch, cfg.channels)
            return compose(spec, forwards)

        return euler_integrate(velocity, noise, steps, shift)
