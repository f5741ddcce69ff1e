"""Three-stage training pipeline, evaluation, and the runtime invariant suite.

Stage I trains the planner + embedding decoder (text NTP + masked-embedding
flow matching), stage II the renderer (+ its text embedder) with velocity MSE
and linearly decaying pair data, stage III co-trains everything with the
planner's hidden states wired into the renderer's conditioning. All randomness
flows through named counter-based streams whose states live in checkpoints, so
split-resume training is bit-identical to an uninterrupted run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import guidance as guidance_mod
from .checkpoint import Checkpoint
from .config import Config, ConfigError
from .numerics import Rng, Tensor, add, backward, matmul, narrow
from .numerics import embedding as gather_rows
from .planner import (
    EmbeddingDecoder,
    PlannerConfig,
    PlannerModel,
    ToyVit,
    cross_entropy_rows,
    losses_from_hidden,
    plan,
    planner_forward,
)
from .renderer import (
    CondInputs,
    RenderBatch,
    RendererConfig,
    RendererModel,
    ToyVae,
    build_cond_tokens,
    render,
    train_step_renderer,
)
from .schedules import (
    MaskRatioConfig,
    TaskKind,
    TimestepConfig,
    pair_decay_weight,
    sample_mask_ratio,
)
from .sequence import TEXT, VISUAL_TARGET, apply_target_mask, serialize
from .toydata import (
    PAIR_TASK,
    TEXT_TASK,
    Dataset,
    EditCase,
    Scene,
    encode,
    frames_to_ids,
    oracle_scores,
)


class StartupError(RuntimeError):
    pass


STAGES = ("I", "II", "III")

# guidance table row serving each task kind
GUIDANCE_KEY = {
    TaskKind.T2I: "t2v",
    TaskKind.T2V: "t2v",
    TaskKind.I2I: "v2v",
    TaskKind.I2V: "s2v",
    TaskKind.V2V: "v2v",
    TaskKind.IV2V: "rv2v",
}


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    config: Config
    mask_ratio: MaskRatioConfig
    timestep: TimestepConfig
    guidance_scales: dict[str, dict[str, float]]
    guidance_steps: dict[str, int]
    plan_steps: int
    decoder_steps: int
    g_text: float
    g_image: float
    flow_shift: float
    use_ema: bool
    reveal: str
    drop_text: float
    drop_target: float
    drop_source: float
    edit_threshold: float
    keep_threshold: float

    @classmethod
    def from_config(cls, cfg: Config) -> "RunConfig":
        mask = MaskRatioConfig({t: cfg.get_floats(f"schedules.mask_ratio.{t.value}") for t in TaskKind})
        ts_params = {}
        for t in TaskKind:
            parts = cfg.get_strs(f"schedules.timestep.{t.value}")
            kind = parts[0]
            args = tuple(float(x) for x in parts[1:-1])
            ts_params[t] = (kind, args, float(parts[-1]))
        timestep = TimestepConfig(
            ts_params,
            shift_in_training=cfg.get_bool("schedules.shift_in_training"),
            shift_in_inference=cfg.get_bool("schedules.shift_in_inference"),
        )
        scales = {key: cfg.get_weighted(f"guidance.{key}") for key in ("t2v", "s2v", "v2v", "rv2v")}
        steps = {key: cfg.get_int(f"guidance.steps.{key}") for key in ("t2v", "s2v", "v2v", "rv2v")}
        return cls(
            config=cfg,
            mask_ratio=mask,
            timestep=timestep,
            guidance_scales=scales,
            guidance_steps=steps,
            plan_steps=cfg.get_int("infer.plan_steps"),
            decoder_steps=cfg.get_int("infer.decoder_steps"),
            g_text=cfg.get_float("infer.g_text"),
            g_image=cfg.get_float("infer.g_image"),
            flow_shift=cfg.get_float("infer.flow_shift"),
            use_ema=cfg.get_bool("infer.use_ema"),
            reveal=cfg.get("planner.reveal"),
            drop_text=cfg.get_float("renderer.drop_text"),
            drop_target=cfg.get_float("renderer.drop_target"),
            drop_source=cfg.get_float("renderer.drop_source"),
            edit_threshold=cfg.get_float("eval.edit_threshold"),
            keep_threshold=cfg.get_float("eval.keep_threshold"),
        )


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------

class ModelBundle:
    def __init__(self, cfg: Config):
        self.config = cfg
        seed = cfg.get_int("run.seed")
        init = Rng(seed).child(0xBEEF)
        pcfg = PlannerConfig(
            hidden_dim=cfg.get_int("planner.hidden_dim"),
            blocks=cfg.get_int("planner.blocks"),
            heads=cfg.get_int("planner.heads"),
            embed_dim=cfg.get_int("vit.embed_dim"),
            rope_base=cfg.get_float("planner.rope_base"),
            segment_base=cfg.get_float("planner.segment_base"),
            segment_phases=cfg.get_bool("planner.segment_phases"),
            decoder_dim=cfg.get_int("planner.decoder_dim"),
            decoder_blocks=cfg.get_int("planner.decoder_blocks"),
            time_features=cfg.get_int("planner.time_features"),
        )
        rcfg = RendererConfig(
            hidden_dim=cfg.get_int("renderer.hidden_dim"),
            blocks=cfg.get_int("renderer.blocks"),
            heads=cfg.get_int("renderer.heads"),
            patch=cfg.get_ints("renderer.patch"),
            channels=cfg.get_int("renderer.channels"),
            rope_base=cfg.get_float("renderer.rope_base"),
            segment_base=cfg.get_float("renderer.segment_base"),
            segment_phases=cfg.get_bool("renderer.segment_phases"),
            time_features=cfg.get_int("renderer.time_features"),
            planner_dim=cfg.get_int("planner.hidden_dim"),
        )
        self.planner = PlannerModel(pcfg, init.child(1))
        self.decoder = EmbeddingDecoder(pcfg, init.child(2))
        self.renderer = RendererModel(rcfg, init.child(3))
        self.vit = ToyVit(
            patch=cfg.get_ints("vit.patch"),
            embed_dim=cfg.get_int("vit.embed_dim"),
            seed=cfg.get_int("vit.seed"),
        )
        self.vae = ToyVae(channels=rcfg.channels)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for prefix, model in (("planner", self.planner), ("decoder", self.decoder), ("renderer", self.renderer)):
            for name, p in model.params.items():
                out[f"{prefix}.{name}"] = p
        return out

    def trainable(self, stage: str) -> dict[str, Tensor]:
        named = self.named_params()
        if stage == "I":
            keep = ("planner.", "decoder.")
        elif stage == "II":
            keep = ("renderer.",)
        elif stage == "III":
            keep = ("planner.", "decoder.", "renderer.")
        else:
            raise ConfigError(f"unknown stage {stage!r}")
        return {k: v for k, v in named.items() if k.startswith(keep)}

    def load_param_values(self, values: dict[str, np.ndarray]) -> None:
        named = self.named_params()
        for name, arr in values.items():
            if name not in named:
                raise ConfigError(f"checkpoint parameter {name!r} does not match this config")
            if named[name].data.shape != arr.shape:
                raise ConfigError(f"shape mismatch for {name}: {named[name].data.shape} vs {arr.shape}")
            named[name].data = arr.copy()

    def param_values(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_params().items()}


# ---------------------------------------------------------------------------
# optimizers / EMA
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in sorted(params):
            p = params[name]
            if p.grad is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v = self.beta2 * v + (1.0 - self.beta2) * p.grad * p.grad
            self.m[name], self.v[name] = m, v
            p.data = p.data - self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)

    def meta(self) -> dict:
        return {"kind": "adam", "t": self.t, "lr": self.lr}


class SgdMomentum:
    def __init__(self, lr: float, momentum: float = 0.9):
        self.lr, self.momentum = lr, momentum
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}  # unused; kept for checkpoint symmetry
        self.t = 0

    def step(self, params: dict[str, Tensor]) -> None:
        self.t += 1
        for name in sorted(params):
            p = params[name]
            if p.grad is None:
                continue
            buf = self.m.get(name)
            buf = p.grad if buf is None else self.momentum * buf + p.grad
            self.m[name] = buf
            p.data = p.data - self.lr * buf

    def meta(self) -> dict:
        return {"kind": "sgd", "t": self.t, "lr": self.lr}


def make_optimizer(kind: str, lr: float):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return SgdMomentum(lr)
    raise ConfigError(f"unknown optimizer {kind!r}")


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, Tensor], decay: float) -> None:
    for name, p in params.items():
        s = shadow.get(name)
        shadow[name] = p.data.copy() if s is None else decay * s + (1.0 - decay) * p.data


class ema_weights:
    """Context manager: temporarily swap EMA values into the live parameters."""

    def __init__(self, bundle: ModelBundle, shadow: dict[str, np.ndarray], enabled: bool = True):
        self.bundle, self.shadow, self.enabled = bundle, shadow, enabled
        self._saved: dict[str, np.ndarray] = {}

    def __enter__(self):
        if not self.enabled:
            return self
        named = self.bundle.named_params()
        for name, arr in self.shadow.items():
            if name in named:
                self._saved[name] = named[name].data
                named[name].data = arr.copy()
        return self

    def __exit__(self, *exc):
        named = self.bundle.named_params()
        for name, arr in self._saved.items():
            named[name].data = arr
        self._saved.clear()
        return False


# ---------------------------------------------------------------------------
# stage configuration and the loss assembly
# ---------------------------------------------------------------------------

@dataclass
class StageConfig:
    name: str
    steps: int
    lr: float = 1e-5
    lr_final: float | None = None  # linear decay target; None keeps lr constant
    ema_decay: float = 0.999
    batch_size: int = 1
    optimizer: str = "adam"
    lambda_text: float = 0.0
    lambda_visual: float = 0.0
    lambda_dit: float = 0.0
    mixture: dict[str, float] = field(default_factory=dict)

    def lr_at(self, step: int) -> float:
        if self.lr_final is None or self.steps <= 1:
            return self.lr
        frac = min(1.0, step / max(1, self.steps - 1))
        return self.lr + (self.lr_final - self.lr) * frac

    def __post_init__(self):
        if self.name not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.name!r}")
        for lam in (self.lambda_text, self.lambda_visual, self.lambda_dit):
            if lam < 0:
                raise ConfigError(f"loss weights must be nonnegative, got {lam}")
        if self.name == "I" and self.lambda_dit != 0.0:
            raise ConfigError("stage I must have lambda_dit = 0")
        if self.name == "II" and (self.lambda_text != 0.0 or self.lambda_visual != 0.0):
            raise ConfigError("stage II must have lambda_text = lambda_visual = 0")
        if any(w < 0 for w in self.mixture.values()):
            raise ConfigError(f"mixture weights must be nonnegative: {self.mixture}")
        total = sum(self.mixture.values())
        if total <= 0:
            raise ConfigError("mixture weights must sum to a positive value")
        self.mixture = {k: w / total for k, w in self.mixture.items()}

    @classmethod
    def from_config(cls, cfg: Config, name: str) -> "StageConfig":
        raw_final = cfg.get(f"stage.{name}.lr_final").strip()
        return cls(
            name=name,
            steps=cfg.get_int(f"stage.{name}.steps"),
            lr=cfg.get_float(f"stage.{name}.lr"),
            lr_final=float(raw_final) if raw_final and raw_final != "none" else None,
            ema_decay=cfg.get_float(f"stage.{name}.ema"),
            batch_size=cfg.get_int(f"stage.{name}.batch"),
            optimizer=cfg.get(f"stage.{name}.optimizer"),
            lambda_text=cfg.get_float(f"stage.{name}.lambda_text"),
            lambda_visual=cfg.get_float(f"stage.{name}.lambda_visual"),
            lambda_dit=cfg.get_float(f"stage.{name}.lambda_dit"),
            mixture=cfg.get_weighted(f"stage.{name}.mixture"),
        )


def total_loss(l_ntp, l_visual, l_dit, lambdas: tuple[float, float, float]):
    """lambda_text * L_ntp + lambda_visual * L_visual + lambda_dit * L_dit."""
    lt, lv, ld = lambdas
    for lam in lambdas:
        if lam < 0:
            raise ConfigError(f"loss weights must be nonnegative, got {lam}")
    return lt * l_ntp + lv * l_visual + ld * l_dit


# ---------------------------------------------------------------------------
# case materialization
# ---------------------------------------------------------------------------

def planner_sequence(case: EditCase, vit: ToyVit):
    """Canonical sequence for a case with ground-truth embeddings attached.

    Returns (sequence, target_embeddings); the target rows also carry the
    ground truth (training masks overwrite flags, inference masks everything).
    """
    text_ids = np.asarray(case.instruction, dtype=np.intp)
    source_grids, source_embs = [], []
    for scene in (case.source, case.reference):
        if scene is None:
            continue
        grid, emb = vit.encode_scene(scene)
        source_grids.append(grid)
        source_embs.append(emb)
    tgt_grid, tgt_emb = vit.encode_scene(case.target)
    seq = serialize(len(text_ids), source_grids, tgt_grid)
    seq.text_ids = text_ids
    emb_dim = vit.embed_dim
    rows = np.zeros((len(seq), emb_dim))
    for desc, start, stop in seq.spans():
        if desc.kind == TEXT:
            continue
        if desc.kind == VISUAL_TARGET:
            rows[start:stop] = tgt_emb
        else:
            rows[start:stop] = source_embs[desc.segment_index - 1]
    seq.embeddings = rows
    return seq, tgt_emb


def renderer_sources(case: EditCase, vae: ToyVae) -> tuple[list[np.ndarray], list[str]]:
    latents, roles = [], []
    if case.source is not None:
        latents.append(vae.encode(case.source.normalized()))
        roles.append("vid" if case.source.grid[0] > 1 else "img")
    if case.reference is not None:
        latents.append(vae.encode(case.reference.normalized()))
        roles.append("img")
    return latents, roles


def text_sequence(instruction: list[int]):
    seq = serialize(len(instruction), [], None)
    seq.text_ids = np.asarray(instruction, dtype=np.intp)
    return seq


def pair_case(record: dict) -> EditCase:
    """Mined pair as an instruction-free editing sample."""
    return EditCase(
        task=TaskKind.V2V,
        family="pair",
        instruction=encode("<bos>", "<eos>"),
        target=Scene.from_dict(record["b"]),
        source=Scene.from_dict(record["a"]),
        edit={},
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    step: int
    opt: Adam | SgdMomentum
    ema: dict[str, np.ndarray]
    rngs: dict[str, Rng]
    stages_done: list[str]


_STREAMS = ("task", "case", "mask", "noise", "drop")
_STAGE_TAG = {"I": 101, "II": 102, "III": 103}


def _fresh_streams(seed: int, stage: str) -> dict[str, Rng]:
    base = Rng(seed).child(_STAGE_TAG[stage])
    return {name: base.child(i) for i, name in enumerate(_STREAMS)}


def _sample_mixture(weights: dict[str, float], rng: Rng) -> str:
    names = sorted(weights)
    total = sum(weights[n] for n in names)
    u = rng.uniform() * total
    acc = 0.0
    for n in names:
        acc += weights[n]
        if u <= acc:
            return n
    return names[-1]


def _effective_mixture(cfg: StageConfig, step: int) -> dict[str, float]:
    if PAIR_TASK not in cfg.mixture:
        return cfg.mixture
    w_pair = pair_decay_weight(step, cfg.steps, cfg.mixture[PAIR_TASK])
    rest = {k: v for k, v in cfg.mixture.items() if k != PAIR_TASK}
    rest_total = sum(rest.values())
    scale = (1.0 - w_pair) / rest_total if rest_total > 0 else 0.0
    out = {k: v * scale for k, v in rest.items()}
    if w_pair > 0:
        out[PAIR_TASK] = w_pair
    return out


def _planner_case_loss(bundle: ModelBundle, run: RunConfig, case: EditCase, rngs, lambdas,
                       want_renderer: bool, drop_rates=(0.0, 0.0, 0.0)):
    """Stage I (want_renderer=False) or stage III (True) loss for one case."""
    seq, tgt_emb = planner_sequence(case, bundle.vit)
    ratio = sample_mask_ratio(run.mask_ratio, case.task, rngs["mask"])
    seq = apply_target_mask(seq, ratio, rngs["mask"], bundle.planner.mask_embedding.data[0])
    z = planner_forward(bundle.planner, seq)
    losses = losses_from_hidden(bundle.planner, bundle.decoder, seq, z, tgt_emb, rngs["noise"])
    l_dit = Tensor(0.0)
    if want_renderer:
        drop_text, drop_target, drop_source = drop_rates
        keep_rows = np.where(
            (seq.kinds == TEXT)
            | ((seq.kinds != TEXT) & (seq.segment_indices != 0))
            | ((seq.segment_indices == 0) & ~seq.masked)
        )[0]
        states = None
        if rngs["drop"].uniform() >= drop_target and keep_rows.size:
            states = gather_rows(z, keep_rows.astype(np.intp))
        text = None if rngs["drop"].uniform() < drop_text else seq.text_ids
        latents, roles = renderer_sources(case, bundle.vae)
        kept_latents = [
            lat for lat, _ in zip(latents, roles) if rngs["drop"].uniform() >= drop_source
        ]
        cond = build_cond_tokens(bundle.renderer, text, states)
        batch = RenderBatch(bundle.vae.encode(case.target.normalized()), cond, kept_latents)
        l_dit, _ = train_step_renderer(bundle.renderer, batch, case.task, run.timestep, rngs["noise"])
    return total_loss(losses.ntp, losses.visual, l_dit, lambdas)


def _renderer_case_loss(bundle: ModelBundle, run: RunConfig, case: EditCase, rngs, lambdas):
    """Stage II loss: renderer conditioned on text features and source latents."""
    text = None if rngs["drop"].uniform() < run.drop_text else np.asarray(case.instruction, dtype=np.intp)
    latents, roles = renderer_sources(case, bundle.vae)
    kept = [lat for lat in latents if rngs["drop"].uniform() >= run.drop_source]
    cond = build_cond_tokens(bundle.renderer, text, None)
    batch = RenderBatch(bundle.vae.encode(case.target.normalized()), cond, kept)
    l_dit, _ = train_step_renderer(bundle.renderer, batch, case.task, run.timestep, rngs["noise"])
    return total_loss(Tensor(0.0), Tensor(0.0), l_dit, lambdas)


def run_stage(
    bundle: ModelBundle,
    stage_cfg: StageConfig,
    data: Dataset,
    run: RunConfig,
    seed: int,
    resume: Checkpoint | None = None,
    checkpoint_dir: str | Path | None = None,
    checkpoint_every: int = 0,
    log_every: int = 0,
) -> tuple[TrainState, Checkpoint]:
    """Train one stage to its step budget; returns the final state + checkpoint."""
    stage = stage_cfg.name
    stages_done: list[str] = []
    if resume is not None:
        bundle.load_param_values(resume.params)
        stages_done = list(resume.stages_done)
    if stage == "III" and not {"I", "II"}.issubset(stages_done):
        raise StartupError(
            f"stage III requires checkpoints through stages I and II, have {stages_done or 'none'}"
        )
    for task_name in stage_cfg.mixture:
        if task_name not in data.by_task:
            raise StartupError(f"mixture task {task_name!r} missing from dataset {data.root}")

    trainable = bundle.trainable(stage)
    mid_resume = (
        resume is not None
        and resume.stage == stage
        and stage not in resume.stages_done
        and resume.step > 0
    )
    if mid_resume:
        opt = make_optimizer(resume.opt_meta.get("kind", stage_cfg.optimizer), stage_cfg.lr)
        opt.t = int(resume.opt_meta.get("t", 0))
        opt.m = {k: v.copy() for k, v in resume.opt_m.items()}
        opt.v = {k: v.copy() for k, v in resume.opt_v.items()}
        ema = {k: v.copy() for k, v in resume.ema.items()}
        rngs = {k: Rng.from_state(s) for k, s in resume.rng_states.items()}
        state = TrainState(resume.step, opt, ema, rngs, stages_done)
    else:
        ema = {} if resume is None else {k: v.copy() for k, v in resume.ema.items()}
        for name, p in trainable.items():
            ema.setdefault(name, p.data.copy())
        state = TrainState(0, make_optimizer(stage_cfg.optimizer, stage_cfg.lr), ema,
                           _fresh_streams(seed, stage), stages_done)

    lambdas = (stage_cfg.lambda_text, stage_cfg.lambda_visual, stage_cfg.lambda_dit)
    named = bundle.named_params()
    last_loss = float("nan")
    while state.step < stage_cfg.steps:
        mixture = _effective_mixture(stage_cfg, state.step)
        batch_losses = []
        for _ in range(stage_cfg.batch_size):
            task_name = _sample_mixture(mixture, state.rngs["task"])
            indices = data.by_task[task_name]
            idx = indices[state.rngs["case"].integers(0, len(indices))]
            record = data.records[idx]
            if task_name == TEXT_TASK:
                # text-only records have no target segment: NTP only
                seq = text_sequence(record["instruction"])
                z = planner_forward(bundle.planner, seq)
                p = bundle.planner.params
                z_text = narrow(z, 0, 0, seq.text_len - 1)
                logits = add(matmul(z_text, p["text_head"]), p["text_head_b"])
                l_ntp = cross_entropy_rows(logits, seq.text_ids[1:])
                loss = total_loss(l_ntp, Tensor(0.0), Tensor(0.0), lambdas)
            elif task_name == PAIR_TASK:
                case = pair_case(record)
                loss = _renderer_case_loss(bundle, run, case, state.rngs, lambdas)
            else:
                case = EditCase.from_dict(record)
                if stage == "I":
                    loss = _planner_case_loss(bundle, run, case, state.rngs, lambdas, want_renderer=False)
                elif stage == "II":
                    loss = _renderer_case_loss(bundle, run, case, state.rngs, lambdas)
                else:
                    loss = _planner_case_loss(
                        bundle, run, case, state.rngs, lambdas, want_renderer=True,
                        drop_rates=(run.drop_text, run.drop_target, run.drop_source),
                    )
            batch_losses.append(loss)
        batch_loss = batch_losses[0]
        for extra in batch_losses[1:]:
            batch_loss = batch_loss + extra
        batch_loss = (1.0 / stage_cfg.batch_size) * batch_loss
        for p in trainable.values():
            p.grad = None
        if batch_loss.requires_grad:
            backward(batch_loss)
        state.opt.lr = stage_cfg.lr_at(state.step)
        state.opt.step(trainable)
        ema_update(state.ema, trainable, stage_cfg.ema_decay)
        state.step += 1
        last_loss = batch_loss.item()
        if log_every and state.step % log_every == 0:
            print(f"[stage {stage}] step {state.step}/{stage_cfg.steps} loss {last_loss:.5f}")
        if checkpoint_every and checkpoint_dir and state.step % checkpoint_every == 0 and state.step < stage_cfg.steps:
            ck = state_to_checkpoint(bundle, state, stage, run)
            ck.save(Path(checkpoint_dir) / f"stage_{stage}_step{state.step:06d}.ckpt")

    if stage not in state.stages_done:
        state.stages_done.append(stage)
    final = state_to_checkpoint(bundle, state, stage, run)
    if checkpoint_dir:
        final.save(Path(checkpoint_dir) / f"stage_{stage}_final.ckpt")
    return state, final


def state_to_checkpoint(bundle: ModelBundle, state: TrainState, stage: str, run: RunConfig) -> Checkpoint:
    return Checkpoint(
        stage=stage,
        step=state.step,
        stages_done=list(state.stages_done),
        params=bundle.param_values(),
        ema={k: v.copy() for k, v in state.ema.items()},
        opt_m={k: v.copy() for k, v in state.opt.m.items()},
        opt_v={k: v.copy() for k, v in state.opt.v.items()},
        opt_meta=state.opt.meta(),
        rng_states={k: r.state() for k, r in state.rngs.items()},
        config_snapshot=run.config.snapshot(),
    )


def dataset_counts(cfg: Config, stage: str) -> dict[str, int]:
    """Per-task record counts for one stage's dataset, proportional to its
    mixture with a floor so every sampled task has material."""
    n = cfg.get_int("data.cases_per_stage")
    mixture = cfg.get_weighted(f"stage.{stage}.mixture")
    total = sum(mixture.values())
    return {name: max(40, round(n * w / total)) for name, w in mixture.items()}


# ---------------------------------------------------------------------------
# inference pipeline and evaluation
# ---------------------------------------------------------------------------

def run_pipeline(bundle: ModelBundle, run: RunConfig, case: EditCase, rng: Rng) -> np.ndarray:
    """plan -> render -> decoded palette frames for one case."""
    seq, _ = planner_sequence(case, bundle.vit)
    t0, t1 = seq.span_of(VISUAL_TARGET)
    seq.embeddings[t0:t1] = 0.0
    seq.masked[t0:t1] = True
    result = plan(
        bundle.planner, bundle.decoder, seq,
        total_steps=run.plan_steps, decoder_steps=run.decoder_steps,
        g_text=run.g_text, g_image=run.g_image, rng=rng.child(1), reveal=run.reveal,
    )
    latents, roles = renderer_sources(case, bundle.vae)
    key = GUIDANCE_KEY[case.task]
    spec = guidance_mod.spec_for_conditions(
        run.guidance_scales[key],
        has_video="vid" in roles,
        has_image="img" in roles,
        has_text=len(case.instruction) > 0,
        has_target_semantics=True,
    )
    cond = CondInputs(
        text_ids=np.asarray(case.instruction, dtype=np.intp),
        planner_states=result.hidden,
        source_latents=latents,
        source_roles=roles,
    )
    latent = render(
        bundle.renderer, cond, steps=run.guidance_steps[key], spec=spec,
        shift=run.flow_shift if run.timestep.shift_in_inference else 1.0,
        rng=rng.child(2), target_grid=case.target.grid,
    )
    return frames_to_ids(bundle.vae.decode(latent))


@dataclass
class EvalReport:
    per_task_success: dict[str, float]
    per_task_count: dict[str, int]
    edited_accuracy: float
    untouched_exactness: float
    invariants_ok: bool | None = None
    runtime_seconds: float = field(default=0.0, compare=False)

    def to_text(self) -> str:
        lines = []
        for task in sorted(self.per_task_success):
            lines.append(f"success.{task} {self.per_task_success[task]:.4f}")
            lines.append(f"cases.{task} {self.per_task_count[task]}")
        lines.append(f"edited_accuracy {self.edited_accuracy:.4f}")
        lines.append(f"untouched_exactness {self.untouched_exactness:.4f}")
        if self.invariants_ok is not None:
            lines.append(f"invariants_pass {int(self.invariants_ok)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "per_task_success": self.per_task_success,
            "per_task_count": self.per_task_count,
            "edited_accuracy": self.edited_accuracy,
            "untouched_exactness": self.untouched_exactness,
            "invariants_ok": self.invariants_ok,
            "runtime_seconds": self.runtime_seconds,
        }


def evaluate(
    bundle: ModelBundle,
    data: Dataset,
    run: RunConfig,
    seed: int,
    ema: dict[str, np.ndarray] | None = None,
    random_baseline: bool = False,
    max_cases: int | None = None,
    with_invariants: bool = False,
) -> EvalReport:
    """Oracle-scored plan->render over every case record in the dataset.

    `random_baseline=True` replaces the model output with decoded noise, which
    is the chance-level reference for the same oracles.
    """
    t_start = time.monotonic()
    rng_root = Rng(seed).child(0xEA1)
    succ: dict[str, list[bool]] = {}
    edited: list[float] = []
    kept: list[float] = []
    n_done = 0
    use_ema = ema is not None and run.use_ema
    with ema_weights(bundle, ema or {}, enabled=use_ema):
        for i, record in enumerate(data.records):
            if record["kind"] != "case":
                continue
            if max_cases is not None and n_done >= max_cases:
                break
            case = EditCase.from_dict(record)
            rng = rng_root.child(i)
            if random_baseline:
                noise = rng.normal((*case.target.grid, bundle.renderer.cfg.channels))
                ids = frames_to_ids(bundle.vae.decode(noise))
            else:
                ids = run_pipeline(bundle, run, case, rng)
            e_acc, k_acc = oracle_scores(case, ids)
            ok = e_acc >= run.edit_threshold and k_acc >= run.keep_threshold
            succ.setdefault(case.task.value, []).append(ok)
            edited.append(e_acc)
            kept.append(k_acc)
            n_done += 1
    inv_ok = None
    if with_invariants:
        inv_ok = all(ok for _, ok, _ in invariant_suite(quick=True))
    return EvalReport(
        per_task_success={k: float(np.mean(v)) for k, v in succ.items()},
        per_task_count={k: len(v) for k, v in succ.items()},
        edited_accuracy=float(np.mean(edited)) if edited else 0.0,
        untouched_exactness=float(np.mean(kept)) if kept else 0.0,
        invariants_ok=inv_ok,
        runtime_seconds=time.monotonic() - t_start,
    )


def edit_case(bundle: ModelBundle, run: RunConfig, case: EditCase, seed: int,
              ema: dict[str, np.ndarray] | None = None) -> tuple[np.ndarray, dict]:
    """Single-case plan+render; returns (frames ids, deterministic report dict)."""
    use_ema = ema is not None and run.use_ema
    with ema_weights(bundle, ema or {}, enabled=use_ema):
        ids = run_pipeline(bundle, run, case, Rng(seed).child(0xED17))
    e_acc, k_acc = oracle_scores(case, ids)
    report = {
        "task": case.task.value,
        "family": case.family,
        "edited_accuracy": round(e_acc, 6),
        "untouched_agreement": round(k_acc, 6),
        "oracle_pass": bool(e_acc >= run.edit_threshold and k_acc >= run.keep_threshold),
        "seed": seed,
    }
    return ids, report


# ---------------------------------------------------------------------------
# invariant suite
# ---------------------------------------------------------------------------

def invariant_suite(quick: bool = False, seed: int = 0) -> list[tuple[str, bool, str]]:
    """Fast self-checks over the module invariants; (name, ok, detail) triples."""
    from . import checks

    return checks.run_all(quick=quick, seed=seed)
