"""Optimization loop: Adam with exponential learning-rate decay, the blurred
reconstruction loss plus the sparse-view regularizers, metrics logging,
checkpointing, kernel-free evaluation and the kernel motion report."""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import partial
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import autodiff as ad
from . import settings
from .blur import (
    KERNEL_KINDS, KernelConfig, RayBatch, RigidBlurKernel, build_kernel, compose_blur, pose_batch,
    rotate_directions, weight_entropy,
)
from .checkpoint import Checkpoint, checkpoint_path, load_checkpoint, save_checkpoint
from .errors import ManifestError, NumericError, TrainingAborted
from .features import FeatureExtractor
from .field import FieldConfig, RadianceField
from .geometry import Intrinsics, Pose, Ray, fixed_unseen_poses, pixel_directions, sample_unseen_pose
from .metrics import SSIM_WINDOW, psnr, ssim, summarize
from .regularize import (
    MGS_MODES, MGSConfig, apply_mgs, integrated_unobserved_patches, patch_batch, perceptual_loss,
    random_rect, reconstruction_loss, surface_smoothness_loss,
)
from .render import (
    RenderConfig, Renderer, final, patch_pixels, pixel_keys, render_image, render_patch, render_world_rays,
)
from .scene.domain_models import BlurTruth, Scene, SceneManifest

logger = logging.getLogger(__name__)

PRESET_ITERATIONS = {2: 20000, 4: 40000, 6: 60000}

# sampler-key view tags for regularizer patches, kept apart from training view indices
_SS_TAG = 1_000_000
_PD_TAG = 2_000_000


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_rays: int = 1024
    lr_start: float = 5e-4
    lr_end: float = 8e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # model
    n_coarse: int = 64
    n_fine: int = 64
    field_depth: int = 4
    field_width: int = 64
    pos_freqs: int = 10
    dir_freqs: int = 4
    color_width: int = 32
    normalize_depth: bool = False
    # blur kernel
    kernel: str = "rbk"
    kernel_n: int = 5
    kernel_embed_dim: int = 32
    kernel_depth: int = 3
    kernel_width: int = 64
    kernel_window: float = 10.0
    kernel_head_init: float = 1e-5
    # regularizers
    ss: bool = True
    mgs: bool = True
    pd: bool = True
    lambda_ss: float = 0.01
    lambda_pd: float = 0.01
    ss_patch: int = 8
    ss_on_coarse: bool = False
    pd_patch: int = 64
    mgs_mode: str = "modulated"
    mgs_rho: Optional[float] = None
    mgs_eta: Optional[float] = None
    unseen_poses: int = 4
    jitter_std: float = 0.125
    feature_dir: Optional[str] = None
    # run
    seed: int = 0
    metrics_every: int = 50
    checkpoint_every: int = 500
    chunk_rays: int = settings.CHUNK_RAYS
    threads: int = 1
    render_factor: int = 1

    def __post_init__(self):
        if self.kernel not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel '{self.kernel}', expected one of {KERNEL_KINDS}")
        if self.mgs_mode not in MGS_MODES:
            raise ValueError(f"unknown gradient scaling mode '{self.mgs_mode}'")
        if self.iterations < 1 or self.batch_rays < 1 or self.chunk_rays < 1:
            raise ValueError("iterations, batch_rays and chunk_rays must be positive")
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rates must be positive")

    @classmethod
    def for_views(cls, views: int, **overrides) -> "TrainConfig":
        """Real-scene protocol for the 2/4/6-view settings."""
        if views not in PRESET_ITERATIONS:
            raise ValueError(f"no preset for {views} views; choose from {sorted(PRESET_ITERATIONS)}")
        return cls(**{"iterations": PRESET_ITERATIONS[views], **overrides})

    @classmethod
    def synthetic(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset for 32x32 synthetic scenes."""
        base = dict(iterations=2000, batch_rays=128, n_coarse=32, n_fine=32, pos_freqs=8, pd_patch=16)
        return cls(**{**base, **overrides})

    def to_item(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_item(cls, item: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(item) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**item)

    def field_config(self) -> FieldConfig:
        return FieldConfig(self.field_depth, self.field_width, self.pos_freqs, self.dir_freqs, self.color_width)

    def render_config(self) -> RenderConfig:
        return RenderConfig(self.n_coarse, self.n_fine, self.normalize_depth)

    def kernel_config(self) -> KernelConfig:
        return KernelConfig(
            kind=self.kernel, n=self.kernel_n, embed_dim=self.kernel_embed_dim, depth=self.kernel_depth,
            width=self.kernel_width, window=self.kernel_window, head_init=self.kernel_head_init,
        )

    def mgs_config(self, manifest: SceneManifest) -> MGSConfig:
        if not self.mgs:
            return MGSConfig(mode="off")
        rho = manifest.mgs_rho if self.mgs_rho is None else self.mgs_rho
        eta = manifest.mgs_eta if self.mgs_eta is None else self.mgs_eta
        return MGSConfig(rho, eta, self.mgs_mode)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """lr_start * (lr_end / lr_start) ** (step / iterations)."""
    if not 0 <= step <= cfg.iterations:
        raise ValueError(f"step {step} outside [0, {cfg.iterations}]")
    return float(cfg.lr_start * (cfg.lr_end / cfg.lr_start) ** (step / cfg.iterations))


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0, beta1, beta2, eps)

    def update(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], lr: float) -> Dict[str, np.ndarray]:
        """One bias-corrected Adam step; moments are updated in place."""
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        updated: Dict[str, np.ndarray] = {}
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                updated[name] = params[name]
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            updated[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return updated


class Model:
    """Coarse and fine radiance fields plus the optional blur kernel."""

    def __init__(self, cfg: TrainConfig, n_views: int):
        rng = np.random.default_rng(cfg.seed)
        fc = cfg.field_config()
        coarse = RadianceField("coarse", fc, rng)
        fine = RadianceField("fine", fc, rng) if cfg.n_fine > 0 else None
        self.renderer = Renderer(coarse, fine, cfg.render_config())
        self.kernel = build_kernel(cfg.kernel_config(), n_views, rng)
        self.n_views = n_views

    @property
    def params(self) -> Dict[str, np.ndarray]:
        params = {k: v.copy() for k, v in self.renderer.params.items()}
        if self.kernel is not None:
            params.update({k: v.copy() for k, v in self.kernel.params.items()})
        return params


@dataclass
class TrainState:
    step: int
    params: Dict[str, np.ndarray]
    adam: AdamState
    rng: np.random.Generator


@dataclass
class _RegularizerPlan:
    ss_view: int = -1
    ss_rect: Tuple[int, int] = (0, 0)
    unseen: List[Pose] = field(default_factory=list)
    patch_rng: Optional[np.random.Generator] = None
    pd_view: int = -1
    pd_rect: Tuple[int, int] = (0, 0)


def _run_tasks(tasks: Sequence[Callable[[], Any]], threads: int) -> List[Any]:
    """Run independent tape tasks; results keep submission order."""
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda task: task(), tasks))
    return [task() for task in tasks]


class Trainer:
    def __init__(
        self,
        scene: Scene,
        cfg: TrainConfig,
        predeblurred: Optional[Dict[str, np.ndarray]] = None,
        out_dir: Optional[str] = None,
    ):
        manifest = scene.manifest
        self.cfg = cfg
        self.scene = scene
        self.out_dir = out_dir
        self.views = manifest.train_views
        if not self.views:
            raise ManifestError("scene has no training views")
        shapes = {(v.focal, v.width, v.height, v.near, v.far) for v in self.views}
        if len(shapes) != 1:
            raise ManifestError("training views must share intrinsics and bounds")
        self.intr = self.views[0].intrinsics(manifest.ndc)
        self.images = np.stack([scene.images[v.id] for v in self.views])
        self.rotations = np.stack([v.pose.rotation for v in self.views])
        self.translations = np.stack([v.pose.translation for v in self.views])
        self.model = Model(cfg, len(self.views))
        self.mgs = cfg.mgs_config(manifest)
        self.hook = None if self.mgs.mode == "off" else partial(apply_mgs, cfg=self.mgs)
        self.fixed_unseen = fixed_unseen_poses(manifest) if cfg.ss else []
        if cfg.ss and not self.fixed_unseen and len(self.views) < 2:
            logger.warning("Fewer than two training views; smoothness uses hidden rays only")
        if cfg.ss and cfg.ss_patch > min(self.intr.width, self.intr.height):
            raise ValueError(f"smoothness patch {cfg.ss_patch} exceeds the image size")
        self.extractor, self.deblurred = self._setup_distillation(predeblurred or {})

    def _setup_distillation(self, predeblurred: Dict[str, np.ndarray]) -> Tuple[Optional[FeatureExtractor], Dict[int, np.ndarray]]:
        cfg = self.cfg
        if not cfg.pd:
            return None, {}
        if cfg.pd_patch > min(self.intr.width, self.intr.height):
            logger.warning(f"Distillation patch {cfg.pd_patch} exceeds the image size; perceptual distillation disabled")
            return None, {}
        deblurred: Dict[int, np.ndarray] = {}
        for i, view in enumerate(self.views):
            if view.id in predeblurred:
                deblurred[i] = predeblurred[view.id]
            else:
                logger.warning(f"View {view.id} has no pre-deblurred image; perceptual distillation disabled for it")
        if not deblurred:
            return None, {}
        return FeatureExtractor(cfg.pd_patch, seed=cfg.seed, feature_dir=cfg.feature_dir), deblurred

    # -------------------- state --------------------
    def init_state(self) -> TrainState:
        params = self.model.params
        adam = AdamState.zeros(params, self.cfg.beta1, self.cfg.beta2, self.cfg.eps)
        return TrainState(0, params, adam, np.random.default_rng([self.cfg.seed, 1]))

    def checkpoint(self, state: TrainState) -> Checkpoint:
        return Checkpoint(
            step=state.step,
            params=state.params,
            first_moments=state.adam.m,
            second_moments=state.adam.v,
            rng_state=state.rng.bit_generator.state,
            config=self.cfg.to_item(),
            meta={"scene": self.scene.manifest.name, "n_views": len(self.views),
                  "views": [v.id for v in self.views], "adam_step": state.adam.step},
        )

    def restore(self, ckpt: Checkpoint) -> TrainState:
        expected = self.model.params
        if set(ckpt.params) != set(expected):
            raise ManifestError("checkpoint parameters do not match the configured model")
        for name, value in ckpt.params.items():
            if value.shape != expected[name].shape:
                raise ManifestError(f"checkpoint parameter {name} has shape {value.shape}, expected {expected[name].shape}")
        cfg = self.cfg
        adam = AdamState(dict(ckpt.first_moments), dict(ckpt.second_moments),
                         int(ckpt.meta.get("adam_step", ckpt.step)), cfg.beta1, cfg.beta2, cfg.eps)
        rng = np.random.default_rng([cfg.seed, 1])
        if ckpt.rng_state is not None:
            rng.bit_generator.state = ckpt.rng_state
        logger.info(f"Resuming from step {ckpt.step}")
        return TrainState(ckpt.step, dict(ckpt.params), adam, rng)

    # -------------------- batches --------------------
    def sample_batch(self, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Uniformly drawn training rays: view indices, pixels (x, y) and target colors."""
        v, h, w = self.images.shape[:3]
        idx = rng.integers(0, v * h * w, size=self.cfg.batch_rays)
        views, rest = np.divmod(idx, h * w)
        ys, xs = np.divmod(rest, w)
        pixels = np.stack([xs, ys], axis=-1).astype(np.float64)
        return views, pixels, self.images[views, ys, xs]

    def ray_batch(self, views: np.ndarray, pixels: np.ndarray) -> RayBatch:
        intr = self.intr
        rotations = self.rotations[views]
        translations = self.translations[views]
        dirs = pixel_directions(pixels, intr.focal, intr.width, intr.height)
        rays = Ray(translations.copy(), rotate_directions(rotations, dirs), intr.near, intr.far)
        return RayBatch(rays, pixels, views, rotations, translations, intr)

    def predict(self, p, batch: RayBatch, keys: Optional[np.ndarray]) -> List[Any]:
        """Blurred colors of every render pass (coarse, then fine)."""
        renderer, kernel, intr = self.model.renderer, self.model.kernel, self.intr
        if kernel is None:
            outputs = render_world_rays(renderer, p, batch.rays, intr, keys, self.hook)
            return [o.color for o in outputs if o is not None]
        kout = kernel.transform(p, batch)
        slot_keys = None
        if keys is not None:
            lead = keys.shape[:-1]
            slot_keys = np.broadcast_to(keys[..., None, :], lead + (kernel.n, keys.shape[-1]))
        outputs = render_world_rays(renderer, p, kout.rays, intr, slot_keys, self.hook)
        return [compose_blur(o.color, kout.weights) for o in outputs if o is not None]

    def _plan(self, rng: np.random.Generator) -> Optional[_RegularizerPlan]:
        cfg = self.cfg
        if not cfg.ss and self.extractor is None:
            return None
        plan = _RegularizerPlan()
        if cfg.ss:
            plan.ss_view = int(rng.integers(0, len(self.views)))
            plan.ss_rect = random_rect(rng, self.intr, cfg.ss_patch)
            if self.fixed_unseen:
                plan.unseen = list(self.fixed_unseen)
            elif len(self.views) >= 2:
                poses = [v.pose for v in self.views]
                plan.unseen = [sample_unseen_pose(poses, cfg.jitter_std, rng) for _ in range(cfg.unseen_poses)]
            plan.patch_rng = np.random.default_rng(rng.integers(0, 2 ** 63))
        if self.extractor is not None:
            choices = sorted(self.deblurred)
            plan.pd_view = choices[int(rng.integers(0, len(choices)))]
            k = cfg.pd_patch
            cx = int(rng.integers(0, self.intr.width // k))
            cy = int(rng.integers(0, self.intr.height // k))
            plan.pd_rect = (cx * k, cy * k)
        return plan

    # -------------------- tape tasks --------------------
    def _reconstruction_task(self, params, views, pixels, target, keys, weight: float):
        tape = ad.Tape()
        p = ad.bind(params, tape)
        preds = self.predict(p, self.ray_batch(views, pixels), keys)
        loss = reconstruction_loss(preds, target) * weight
        grads = tape.backward(loss)
        return {"recon": float(ad.value_of(loss))}, grads

    def smoothness_loss(self, p, plan: _RegularizerPlan, step: int):
        cfg, intr = self.cfg, self.intr
        k = cfg.ss_patch
        view = self.views[plan.ss_view]
        train_patch = patch_batch(view.pose, plan.ss_view, intr, plan.ss_rect[0], plan.ss_rect[1], k)
        patches = integrated_unobserved_patches(p, train_patch, self.model.kernel, plan.unseen, intr, plan.patch_rng, k)
        origins = ad.stack([pt.rays.origin for pt in patches], axis=0)
        directions = ad.stack([pt.rays.direction for pt in patches], axis=0)
        pixels = np.stack([pt.pixels for pt in patches])
        tags = _SS_TAG + np.arange(len(patches)).reshape(-1, 1, 1)
        keys = pixel_keys(cfg.seed, step, tags, pixels)
        outputs = render_world_rays(self.model.renderer, p, Ray(origins, directions, intr.near, intr.far), intr, keys, self.hook)
        out = final(outputs)
        depth = outputs[0].depth if cfg.ss_on_coarse else out.depth
        return surface_smoothness_loss(depth, out.color)

    def distillation_loss(self, p, plan: _RegularizerPlan, step: int):
        """Perceptual loss of a kernel-free rendered patch against the pre-deblurred image."""
        cfg = self.cfg
        k = cfg.pd_patch
        x0, y0 = plan.pd_rect
        view = self.views[plan.pd_view]
        keys = pixel_keys(cfg.seed, step, _PD_TAG + plan.pd_view, patch_pixels(x0, y0, k))
        rendered = render_patch(self.model.renderer, p, view.pose, self.intr, x0, y0, k, keys, self.hook)
        target = self.extractor.target_features(view.id, self.deblurred[plan.pd_view], x0, y0)
        return perceptual_loss(rendered.color, target, self.extractor)

    def _regularizer_task(self, params, plan: _RegularizerPlan, step: int):
        cfg = self.cfg
        tape = ad.Tape()
        p = ad.bind(params, tape)
        ss = self.smoothness_loss(p, plan, step) if cfg.ss else 0.0
        pd = self.distillation_loss(p, plan, step) if self.extractor is not None else 0.0
        loss = cfg.lambda_ss * ss + cfg.lambda_pd * pd
        grads = tape.backward(loss)
        return {"ss": float(ad.value_of(ss)), "pd": float(ad.value_of(pd))}, grads

    # -------------------- step --------------------
    def train_step(self, state: TrainState) -> Tuple[TrainState, Dict[str, float]]:
        cfg = self.cfg
        rng = state.rng
        step = state.step
        views, pixels, target = self.sample_batch(rng)
        keys = pixel_keys(cfg.seed, step, views, pixels)
        plan = self._plan(rng)
        n = len(views)
        tasks: List[Callable[[], Any]] = []
        for start in range(0, n, cfg.chunk_rays):
            s = slice(start, start + cfg.chunk_rays)
            tasks.append(partial(self._reconstruction_task, state.params, views[s], pixels[s], target[s],
                                 keys[s], len(views[s]) / n))
        if plan is not None:
            tasks.append(partial(self._regularizer_task, state.params, plan, step))
        try:
            results = _run_tasks(tasks, cfg.threads)
        except NumericError as exc:
            dump = self._dump(step, views, pixels, exc)
            raise TrainingAborted(f"training aborted at step {step}: {exc}", exc.node_id, dump) from exc

        losses = {"recon": 0.0, "ss": 0.0, "pd": 0.0}
        grads: Dict[str, np.ndarray] = {}
        for partial_losses, g in results:
            for key, value in partial_losses.items():
                losses[key] += value
            for name, value in g.items():
                grads[name] = value if name not in grads else grads[name] + value
        losses["total"] = losses["recon"] + cfg.lambda_ss * losses["ss"] + cfg.lambda_pd * losses["pd"]
        if not np.isfinite(losses["total"]):
            dump = self._dump(step, views, pixels, NumericError("non-finite loss"))
            raise TrainingAborted(f"non-finite loss at step {step}", None, dump)

        params = state.adam.update(state.params, grads, lr_at(step, cfg))
        return TrainState(step + 1, params, state.adam, rng), losses

    def _dump(self, step: int, views: np.ndarray, pixels: np.ndarray, exc: NumericError) -> str:
        directory = self.out_dir or "."
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, f"abort_step{step:06d}.json")
        record = {
            "step": step,
            "error": str(exc),
            "node_id": exc.node_id,
            "rays": [{"view": self.views[int(v)].id, "pixel": [int(x), int(y)]} for v, (x, y) in zip(views, pixels)],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2)
        logger.error(f"Non-finite value at step {step}; diagnostic dump written to {path}")
        return path

    def evaluate(self, state: TrainState, split: str = "test") -> "EvalResult":
        return evaluate(self.model, state.params, self.scene, split, self.cfg.render_factor,
                        self.cfg.chunk_rays, self.cfg.threads)


# -------------------- training loop --------------------

@dataclass
class TrainResult:
    state: TrainState
    history: List[Dict[str, float]]
    checkpoint: Optional[str]


def train(
    scene: Scene,
    cfg: TrainConfig,
    out_dir: str,
    resume: Optional[str] = None,
    predeblurred: Optional[Dict[str, np.ndarray]] = None,
) -> TrainResult:
    """Train until `cfg.iterations`, logging metrics and writing checkpoints under `out_dir`."""
    os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(scene, cfg, predeblurred, out_dir)
    state = trainer.init_state() if resume is None else trainer.restore(load_checkpoint(resume))
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    history: List[Dict[str, float]] = []
    last_saved: Optional[str] = None
    logger.info(f"Training '{scene.manifest.name}' for {cfg.iterations} steps "
                f"(kernel={cfg.kernel}, ss={cfg.ss}, mgs={cfg.mgs}, pd={trainer.extractor is not None})")
    with open(metrics_path, "a" if resume else "w", encoding="utf-8") as log:
        steps = range(state.step, cfg.iterations)
        for _ in tqdm(steps, desc="train", disable=not settings.ENABLE_PROGRESS):
            lr = lr_at(state.step, cfg)
            state, losses = trainer.train_step(state)
            history.append(losses)
            if state.step % cfg.metrics_every == 0:
                log.write(json.dumps({"step": state.step, "losses": losses, "lr": lr}) + "\n")
                log.flush()
                logger.info(f"step {state.step}: loss {losses['total']:.6f} (recon {losses['recon']:.6f}) lr {lr:.2e}")
            if state.step % cfg.checkpoint_every == 0:
                last_saved = save_checkpoint(checkpoint_path(ckpt_dir, state.step), trainer.checkpoint(state))
    final_path = checkpoint_path(ckpt_dir, state.step)
    if last_saved != final_path:
        last_saved = save_checkpoint(final_path, trainer.checkpoint(state))
    return TrainResult(state, history, last_saved)


def load_model(path: str) -> Tuple[Model, Dict[str, np.ndarray], TrainConfig, Checkpoint]:
    """Rebuild the architecture recorded in a checkpoint and return its parameters."""
    ckpt = load_checkpoint(path)
    cfg = TrainConfig.from_item(ckpt.config)
    model = Model(cfg, int(ckpt.meta.get("n_views", 1)))
    if set(model.params) != set(ckpt.params):
        raise ManifestError(f"{path} does not match the architecture in its own header")
    return model, ckpt.params, cfg, ckpt


# -------------------- evaluation --------------------

@dataclass
class EvalResult:
    metrics: Dict[str, Any]
    renders: Dict[str, Tuple[np.ndarray, np.ndarray]]


def _subsample(image: np.ndarray, factor: int, shape: Tuple[int, int]) -> np.ndarray:
    if factor <= 1:
        return image
    return image[::factor, ::factor][:shape[0], :shape[1]]


def evaluate(
    model: Model,
    params: Dict[str, np.ndarray],
    scene: Scene,
    split: str = "test",
    render_factor: int = 1,
    chunk: int = 256,
    threads: int = 1,
) -> EvalResult:
    """PSNR/SSIM of kernel-free renders against the sharp (or, failing that, input) images."""
    manifest = scene.manifest
    per_view: Dict[str, Dict[str, float]] = {}
    renders: Dict[str, Tuple[np.ndarray, np.ndarray]] = {}
    for view in manifest.views_with_role(split):
        intr = view.intrinsics(manifest.ndc).scaled(render_factor)
        color, depth = render_image(model.renderer, view.pose, intr, chunk, threads, params)
        reference = scene.sharp.get(view.id)
        source = "sharp"
        if reference is None:
            reference, source = scene.images[view.id], "image"
        reference = _subsample(reference, render_factor, color.shape[:2])
        entry = {"psnr": psnr(color, reference), "reference": source}
        if min(color.shape[:2]) >= SSIM_WINDOW:
            entry["ssim"] = ssim(color, reference)
        else:
            logger.warning(f"View {view.id} render is smaller than the SSIM window; SSIM skipped")
            entry["ssim"] = float("nan")
        per_view[view.id] = entry
        renders[view.id] = (color, depth)
    metrics = {"split": split, "render_factor": render_factor, "views": per_view, "mean": summarize(per_view)}
    return EvalResult(metrics, renders)


def render_blurred_image(
    model: Model,
    params: Dict[str, np.ndarray],
    view_index: int,
    pose: Pose,
    intr: Intrinsics,
    chunk: int = 256,
) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic re-render of a training view through the learned kernel: (H, W, 3) color, (H, W, n) weights."""
    kernel = model.kernel
    pixels = intr.pixel_grid().reshape(-1, 2)
    colors, weights = [], []
    for start in range(0, len(pixels), chunk):
        batch = pose_batch(pose, view_index, intr, pixels[start:start + chunk])
        kout = kernel.transform(params, batch)
        out = final(render_world_rays(model.renderer, params, kout.rays, intr))
        colors.append(compose_blur(out.color, kout.weights))
        weights.append(kout.weights)
    color = np.concatenate(colors).reshape(intr.height, intr.width, 3)
    return color, np.concatenate(weights).reshape(intr.height, intr.width, -1)


def _motion(screws) -> Dict[str, float]:
    rot = [float(np.linalg.norm(np.asarray(s.r, dtype=np.float64))) for s in screws]
    trans = [float(np.linalg.norm(np.asarray(s.v, dtype=np.float64))) for s in screws]
    return {"max_rotation": max(rot, default=0.0), "max_translation": max(trans, default=0.0)}


def kernel_motion_report(
    model: Model,
    params: Dict[str, np.ndarray],
    scene: Scene,
    truth: Optional[Dict[str, BlurTruth]] = None,
    chunk: int = 256,
) -> Dict[str, Any]:
    """Per training view: blurry re-render PSNR through the kernel, clean-render PSNR
    against the blurry input, composition-weight entropy, and learned vs. true motion."""
    if model.kernel is None:
        logger.warning("Model has no blur kernel; motion report skipped")
        return {}
    manifest = scene.manifest
    views: Dict[str, Dict[str, Any]] = {}
    for i, view in enumerate(manifest.train_views):
        intr = view.intrinsics(manifest.ndc)
        blurry = scene.images[view.id]
        reblur, weights = render_blurred_image(model, params, i, view.pose, intr, chunk)
        clean, _ = render_image(model.renderer, view.pose, intr, chunk, 1, params)
        entry: Dict[str, Any] = {
            "blurry_psnr": psnr(reblur, blurry),
            "clean_psnr": psnr(clean, blurry),
            "weight_entropy": weight_entropy(weights),
        }
        if isinstance(model.kernel, RigidBlurKernel):
            entry["learned_motion"] = _motion(model.kernel.screws_for(params, i))
        if truth is not None and view.id in truth:
            entry["true_motion"] = _motion(truth[view.id].screws)
        views[view.id] = entry
    if truth is None:
        logger.info("No ground-truth blur sidecar; true motion omitted from the report")
    return {
        "kernel": model.kernel.kind,
        "views": views,
        "mean": summarize(views, ("blurry_psnr", "clean_psnr", "weight_entropy")),
    }
