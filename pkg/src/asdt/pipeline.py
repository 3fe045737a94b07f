"""Stage-1 training of the self-dual teaching network, PSM generation and
stage-2 retraining."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from . import IGNORE
from . import eval as ev
from .backbone import BackboneConfig, ToyBackbone, feature_size
from .class_teacher import (
    ClassHead,
    cam_to_probmaps,
    cams_to_pseudolabels,
    classification_loss,
    compute_cams,
    multiscale_cams,
)
from .config import MODES, RunConfig
from .crf import CrfParams, crf_refine, crf_refine_batch, harden, harden_labels, pairwise_kernel
from .losses import PairwiseKernelConfig, UnreliableTargetWarning, loss_ct_to_s, loss_ct_to_st, loss_st_to_s, present_mask
from .pwm import PWMSchedule, Teacher, alternate_distillation_loss, select_teacher
from .seg_head import SegHead, head_dilation
from .synthdata import (
    IMAGE_MEAN,
    IMAGE_STD,
    DatasetManifest,
    ImageSample,
    ManifestRecord,
    augment,
    epoch_order,
    load_samples,
    normalize,
    write_manifest,
)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class ASDTNet(nn.Module):
    """Shared backbone with class-teacher, seg-teacher and student branches."""

    def __init__(self, num_classes: int, crop: int = 64, hidden: int = 64, dilation: int = 12, toy_dilation: int = 4,
                 backbone_cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.num_classes = num_classes
        self.backbone = ToyBackbone(backbone_cfg)
        d = head_dilation(feature_size(crop, backbone_cfg), dilation, toy_dilation)
        c_f = backbone_cfg.out_channels
        self.class_head = ClassHead(c_f, num_classes)
        self.seg_teacher = SegHead(c_f, num_classes, hidden, d)
        self.student = SegHead(c_f, num_classes, hidden, d)

    @property
    def stride(self) -> int:
        return self.backbone.stride


@dataclass
class TrainState:
    model: ASDTNet
    optimizer: torch.optim.Optimizer
    config: RunConfig
    class_names: list[str]
    t: int = 0
    trace: list[dict] = field(default_factory=list)
    # image id -> B^st label map at image resolution, built at LOW onsets
    st_cache: dict[str, np.ndarray] | None = None

    @property
    def seed(self) -> int:
        return self.config["seed"]


# ---------------------------------------------------------------------------
# construction


def set_reproducible(cfg: RunConfig) -> None:
    if cfg["runtime.deterministic"]:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def build_model(cfg: RunConfig, num_classes: int) -> ASDTNet:
    torch.manual_seed(cfg["seed"])
    return ASDTNet(num_classes, cfg["data.crop"], cfg["model.seg_hidden"], cfg["model.dilation"], cfg["model.toy_dilation"])


def build_optimizer(model: ASDTNet, cfg: RunConfig) -> torch.optim.SGD:
    lr = cfg["optim.lr"]
    heads = [p for m in (model.class_head, model.seg_teacher, model.student) for p in m.parameters()]
    return torch.optim.SGD(
        [
            {"params": list(model.backbone.parameters()), "lr": lr},
            {"params": heads, "lr": lr * cfg["optim.head_lr_mult"]},
        ],
        lr=lr,
        momentum=cfg["optim.momentum"],
        weight_decay=cfg["optim.weight_decay"],
    )


def build_state(cfg: RunConfig, class_names: Sequence[str]) -> TrainState:
    cfg = RunConfig(cfg).validate()
    set_reproducible(cfg)
    model = build_model(cfg, len(class_names))
    return TrainState(model, build_optimizer(model, cfg), cfg, list(class_names))


def pwm_schedule(cfg: RunConfig) -> PWMSchedule:
    return PWMSchedule(cfg["pwm.T"], cfg["pwm.tau"])


def crf_params(cfg: RunConfig) -> CrfParams:
    return CrfParams(cfg["crf.n_iters"], cfg["crf.w_appearance"], cfg["crf.theta_alpha"], cfg["crf.theta_beta"],
                     cfg["crf.w_smoothness"], cfg["crf.theta_gamma"], cfg["crf.compat"])


def kernel_config(cfg: RunConfig) -> PairwiseKernelConfig:
    return PairwiseKernelConfig(cfg["losses.sigma_D"], cfg["losses.sigma_I"], cfg["losses.radius"])


# ---------------------------------------------------------------------------
# batches


def to_tensors(samples: Sequence[ImageSample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).float().contiguous()
    tags = torch.from_numpy(np.stack([s.tags for s in samples])).float()
    return images, tags


def colors_at(images: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Normalized network input -> 0-255 colours, area-averaged to ``size``."""
    mean = torch.as_tensor(IMAGE_MEAN, dtype=images.dtype)[None, :, None, None]
    std = torch.as_tensor(IMAGE_STD, dtype=images.dtype)[None, :, None, None]
    rgb = (images * std + mean) * 255.0
    if rgb.shape[-2:] != size:
        rgb = F.interpolate(rgb, size=size, mode="area")
    return rgb


def steps_per_epoch(n: int, batch_size: int) -> int:
    return math.ceil(n / min(batch_size, n))


def batch_for_step(samples: Sequence[ImageSample], t: int, batch_size: int, seed: int) -> list[ImageSample]:
    """The t-th batch of the epoch-shuffled stream, computable without replay."""
    bs = min(batch_size, len(samples))
    spe = steps_per_epoch(len(samples), bs)
    order = epoch_order(len(samples), seed, t // spe)
    k = t % spe
    return [samples[int(i)] for i in order[k * bs : (k + 1) * bs]]


def augment_batch(samples: Sequence[ImageSample], cfg: RunConfig, t: int) -> list[ImageSample]:
    return [
        augment(s, (cfg["seed"], t, i), cfg["data.crop"], (cfg["data.scale_min"], cfg["data.scale_max"]),
                cfg["data.flip_prob"])
        for i, s in enumerate(samples)
    ]


# ---------------------------------------------------------------------------
# targets


def restrict(P: torch.Tensor, tags: torch.Tensor) -> torch.Tensor:
    """Zero channels of untagged classes and renormalize to the simplex."""
    P = P * present_mask(tags).to(P.dtype)[:, :, None, None]
    return P / P.sum(dim=1, keepdim=True).clamp_min(1e-12)


def seg_teacher_labels(P_st, tags, colors, params: CrfParams, spacing: float) -> torch.Tensor:
    """B^st: CRF-refined, hardened seg-teacher prediction (no gradient)."""
    with torch.no_grad():
        return harden(crf_refine_batch(restrict(P_st.detach(), tags), colors, params, spacing))


def naive_fusion_labels(cams, P_st, tags, colors, params: CrfParams, spacing: float, how: str) -> torch.Tensor:
    with torch.no_grad():
        P_ct = cam_to_probmaps(cams, tags)
        P_st = restrict(P_st.detach(), tags)
        fused = torch.maximum(P_ct, P_st) if how == "max" else 0.5 * (P_ct + P_st)
        fused = fused / fused.sum(dim=1, keepdim=True)
        return harden(crf_refine_batch(fused, colors, params, spacing))


@torch.no_grad()
def build_st_cache(model: ASDTNet, samples: Sequence[ImageSample], params: CrfParams) -> dict[str, np.ndarray]:
    """B^st for every training image (un-augmented), stored at image
    resolution so that it can follow each step's augmentation."""
    was_training = model.training
    model.eval()
    cache = {}
    for s in samples:
        image = torch.from_numpy(normalize(s.image)).permute(2, 0, 1)[None].float()
        feats = model.backbone(image)
        fhw = tuple(feats.shape[-2:])
        tags = torch.from_numpy(s.tags)[None].float()
        B = seg_teacher_labels(model.seg_teacher(feats), tags, colors_at(image, fhw), params, float(model.stride))
        labels = harden_labels(B).float()[:, None]
        full = F.interpolate(labels, size=image.shape[-2:], mode="nearest")[0, 0]
        cache[s.id] = full.numpy().astype(np.uint8)
    model.train(was_training)
    return cache


def cached_st_labels(cache: dict[str, np.ndarray], batch: Sequence[ImageSample], cfg: RunConfig, t: int,
                     fhw: tuple[int, int], num_labels: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Warp cached B^st through this step's augmentation; returns one-hot
    targets at feature resolution and a mask of pixels that have one."""
    try:
        warped = augment_batch([ImageSample(s.image, s.tags, cache[s.id], s.id) for s in batch], cfg, t)
    except KeyError as e:
        raise TrainingError(f"no cached seg-teacher labels for image {e.args[0]}") from None
    masks = torch.from_numpy(np.stack([w.gt_mask for w in warped])).float()[:, None]
    labels = F.interpolate(masks, size=fhw, mode="nearest")[:, 0].long()
    valid = labels != IGNORE
    B = F.one_hot(torch.where(valid, labels, 0), num_labels).permute(0, 3, 1, 2).float()
    B = B * valid[:, None]
    return B, valid.float()


def needs_st_refresh(state: TrainState, mode: str) -> bool:
    cfg = state.config
    if mode != "V" or cfg["train.st_refresh"] != "onset":
        return False
    sched = pwm_schedule(cfg)
    if select_teacher(state.t, sched) is Teacher.CLASS_TEACHER:
        return False
    return state.st_cache is None or state.t % sched.T == sched.T_h


# ---------------------------------------------------------------------------
# stage 1


def train_step(state: TrainState, batch: Sequence[ImageSample], mode: str | None = None) -> tuple[TrainState, dict]:
    cfg = state.config
    mode = mode or cfg["train.mode"]
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    model = state.model
    model.train()
    t = state.t
    aug = augment_batch(batch, cfg, t)
    images, tags = to_tensors(aug)

    feats = model.backbone(images)
    fhw = tuple(feats.shape[-2:])
    colors = colors_at(images, fhw)
    spacing = float(model.stride)
    kcfg = kernel_config(cfg)
    lam = cfg["losses.lambda_str"]
    cparams = crf_params(cfg)

    scores = model.class_head(feats)
    l_ce = classification_loss(scores, tags)

    with torch.no_grad():
        cams = compute_cams(feats.detach(), model.class_head.fc.weight.detach(), tags)
        B_ct, R_ct = cams_to_pseudolabels(cams, tags, cfg["cam.theta_fg"], cfg["cam.theta_bg"])

    P_s = model.student(feats)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnreliableTargetWarning)
        if mode == "I":
            l_ct_st = torch.zeros(())
            teacher = Teacher.CLASS_TEACHER
            l_s = loss_ct_to_s(P_s, B_ct, R_ct, tags, colors, kcfg, lam, spacing)
        else:
            P_st = model.seg_teacher(feats)
            l_ct_st = loss_ct_to_st(P_st, B_ct, R_ct, tags, colors, kcfg, lam, spacing)
            if mode == "II":
                teacher = Teacher.SEG_TEACHER
                l_s = loss_st_to_s(P_s, seg_teacher_labels(P_st, tags, colors, cparams, spacing), tags, colors, kcfg,
                                   lam, spacing)
            elif mode in ("III", "IV"):
                teacher = Teacher.SEG_TEACHER
                B_fused = naive_fusion_labels(cams, P_st, tags, colors, cparams, spacing, "max" if mode == "III" else "mean")
                l_s = loss_st_to_s(P_s, B_fused, tags, colors, kcfg, lam, spacing)
            else:
                sched = pwm_schedule(cfg)
                teacher = select_teacher(t, sched)
                if cfg["train.st_refresh"] == "onset":
                    st_labels = lambda: cached_st_labels(state.st_cache or {}, batch, cfg, t, fhw,  # noqa: E731
                                                         model.num_classes + 1)
                else:
                    st_labels = lambda: seg_teacher_labels(P_st, tags, colors, cparams, spacing)  # noqa: E731
                l_s = alternate_distillation_loss(t, sched, P_s, (B_ct, R_ct), st_labels, tags, colors, kcfg, lam,
                                                  spacing)

    total = l_ce + l_ct_st + l_s
    if not torch.isfinite(total):
        raise TrainingError(f"non-finite loss at iteration {t}; batch ids: {[s.id for s in batch]}")

    state.optimizer.zero_grad(set_to_none=True)
    total.backward()
    state.optimizer.step()
    state.t = t + 1
    report = {
        "t": t,
        "teacher": teacher.value,
        "l_ce": l_ce.item(),
        "l_ct_st": l_ct_st.item(),
        "l_student": l_s.item(),
        "total": total.item(),
    }
    state.trace.append(report)
    return state, report


def total_steps(n: int, cfg: RunConfig) -> int:
    return cfg["train.epochs"] * steps_per_epoch(n, cfg["train.batch_size"])


def fit(state: TrainState, samples: Sequence[ImageSample], steps: int | None = None, mode: str | None = None,
        log_every: int = 100, until: int | None = None) -> TrainState:
    """Train until ``state.t`` reaches ``until`` (default: configured epochs),
    or for ``steps`` more iterations."""
    cfg = state.config
    if until is None:
        until = state.t + steps if steps is not None else total_steps(len(samples), cfg)
    mode = mode or cfg["train.mode"]
    while state.t < until:
        if needs_st_refresh(state, mode):
            state.st_cache = build_st_cache(state.model, samples, crf_params(cfg))
        batch = batch_for_step(samples, state.t, cfg["train.batch_size"], cfg["seed"])
        _, rep = train_step(state, batch, mode)
        if log_every and rep["t"] % log_every == 0:
            log.info("t=%d %s total=%.4f ce=%.4f ct->st=%.4f student=%.4f", rep["t"], rep["teacher"], rep["total"],
                     rep["l_ce"], rep["l_ct_st"], rep["l_student"])
    return state


# ---------------------------------------------------------------------------
# inference


def fuse(P_st: torch.Tensor, P_s: torch.Tensor) -> torch.Tensor:
    """Element-wise max of the two branch maps, renormalized per pixel."""
    m = torch.maximum(P_st, P_s)
    return m / m.sum(dim=-3, keepdim=True)


def upsample(P: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    P = F.interpolate(P, size=size, mode="bilinear", align_corners=False)
    return P / P.sum(dim=1, keepdim=True)


@torch.no_grad()
def branch_maps(model: ASDTNet, samples: Sequence[ImageSample], use_tags: bool = True) -> dict[str, torch.Tensor]:
    """Image-resolution probability maps of both segmentation branches and
    their fusion, before CRF."""
    model.eval()
    images = torch.from_numpy(np.stack([normalize(s.image) for s in samples])).permute(0, 3, 1, 2).float()
    tags = torch.from_numpy(np.stack([s.tags for s in samples])).float()
    feats = model.backbone(images)
    size = tuple(images.shape[-2:])
    out = {}
    for name, head in (("st", model.seg_teacher), ("s", model.student)):
        P = head(feats)
        if use_tags:
            P = restrict(P, tags)
        out[name] = upsample(P, size)
    out["fused"] = fuse(out["st"], out["s"])
    out["colors"] = torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).float() * 255.0
    out["images"] = images
    out["tags"] = tags
    return out


@torch.no_grad()
def generate_psm(state_or_model, sample: ImageSample, params: CrfParams | None = None, use_tags: bool = True) -> np.ndarray:
    """Pseudo mask (H, W) uint8: fuse branches, CRF, argmax."""
    model = state_or_model.model if isinstance(state_or_model, TrainState) else state_or_model
    if params is None:
        params = crf_params(state_or_model.config) if isinstance(state_or_model, TrainState) else CrfParams()
    maps = branch_maps(model, [sample], use_tags)
    refined = crf_refine(maps["fused"][0], maps["colors"][0], params)
    return harden_labels(refined).numpy().astype(np.uint8)


@torch.no_grad()
def evaluate_stage1(model: ASDTNet, samples: Sequence[ImageSample], params: CrfParams = CrfParams(),
                    scales: Sequence[float] = (0.5, 1.0, 1.5, 2.0), batch_size: int = 16) -> dict[str, np.ndarray]:
    """Confusion matrices for P^st, P^s, fused (each CRF-refined) and the
    multi-scale CAM baseline (no CRF)."""
    K = model.num_classes + 1
    cms = {k: ev.new_confusion(K) for k in ("st", "s", "fused", "cam")}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        maps = branch_maps(model, chunk)
        cams = multiscale_cams(maps["images"], model.backbone, model.class_head, scales, maps["tags"])
        P_cam = upsample(cam_to_probmaps(cams, maps["tags"]), tuple(maps["images"].shape[-2:]))
        for i, s in enumerate(chunk):
            kernel = pairwise_kernel(maps["colors"][i], params)
            for name in ("st", "s", "fused"):
                pred = harden_labels(crf_refine(maps[name][i], maps["colors"][i], params, kernel=kernel))
                cms[name] = ev.accumulate(cms[name], pred.numpy(), s.gt_mask)
            cms["cam"] = ev.accumulate(cms["cam"], harden_labels(P_cam[i]).numpy(), s.gt_mask)
    return cms


def export_psms(state: TrainState, manifest: DatasetManifest, out_dir: str | Path,
                samples: Sequence[ImageSample] | None = None) -> DatasetManifest:
    """Write one index PNG per training image and a manifest pointing at them."""
    out_dir = Path(out_dir)
    (out_dir / "psm").mkdir(parents=True, exist_ok=True)
    samples = samples if samples is not None else load_samples(manifest)
    params = crf_params(state.config)
    records = []
    for rec, s in zip(manifest.records, samples):
        psm = generate_psm(state.model, s, params)
        path = out_dir / "psm" / f"{Path(rec.image_path).stem}.png"
        Image.fromarray(psm).save(path)
        records.append(ManifestRecord(rec.image_path, rec.tags, path))
    psm_manifest = DatasetManifest(records, list(manifest.class_names), out_dir / "psm_manifest.tsv")
    write_manifest(psm_manifest, psm_manifest.path)
    return psm_manifest


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = state.model
    torch.save(
        {
            "version": CHECKPOINT_VERSION,
            "backbone": m.backbone.state_dict(),
            "class_head": m.class_head.state_dict(),
            "seg_teacher": m.seg_teacher.state_dict(),
            "student": m.student.state_dict(),
            "optimizer": state.optimizer.state_dict(),
            "iter": state.t,
            "config_hash": state.config.hash(),
            "config": dict(state.config),
            "class_names": state.class_names,
            "st_cache": state.st_cache,
        },
        path,
    )
    return path


def load_checkpoint(path: str | Path) -> TrainState:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob.get('version')!r}")
    cfg = RunConfig(blob["config"])
    set_reproducible(cfg)
    model = build_model(cfg, len(blob["class_names"]))
    for key in ("backbone", "class_head", "seg_teacher", "student"):
        getattr(model, key).load_state_dict(blob[key])
    opt = build_optimizer(model, cfg)
    opt.load_state_dict(blob["optimizer"])
    return TrainState(model, opt, cfg, list(blob["class_names"]), t=blob["iter"], st_cache=blob.get("st_cache"))


# ---------------------------------------------------------------------------
# stage 2


class Segmenter(nn.Module):
    """Fresh backbone + segmentation head trained on pseudo masks."""

    def __init__(self, num_classes: int, crop: int = 64, hidden: int = 64, dilation: int = 12, toy_dilation: int = 4):
        super().__init__()
        self.num_classes = num_classes
        self.backbone = ToyBackbone()
        d = head_dilation(feature_size(crop, self.backbone.cfg), dilation, toy_dilation)
        self.head = SegHead(self.backbone.out_channels, num_classes, hidden, d)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits = self.head.logits(self.backbone(x))
        return F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)


def pixel_ce(logits: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Cross-entropy over non-IGNORE pixels; zero when every pixel is IGNORE."""
    valid = masks != IGNORE
    if not valid.any():
        return (logits * 0).sum()
    return F.cross_entropy(logits, masks.long(), ignore_index=IGNORE)


def retrain_on_psms(samples: Sequence[ImageSample], cfg: RunConfig, iters: int | None = None,
                    progress: Callable[[int, float], None] | None = None) -> Segmenter:
    """Train a fresh segmenter with pixel CE on ``sample.gt_mask`` (the PSMs)."""
    if not samples:
        raise ValueError("empty PSM set")
    if any(s.gt_mask is None for s in samples):
        raise ValueError("every retraining sample needs a pseudo mask")
    set_reproducible(cfg)
    torch.manual_seed(cfg["seed"])
    model = Segmenter(len(samples[0].tags), cfg["data.crop"], cfg["model.seg_hidden"], cfg["model.dilation"],
                      cfg["model.toy_dilation"])
    iters = iters if iters is not None else cfg["retrain.iters"]
    base_lr = cfg["retrain.lr"]
    opt = torch.optim.SGD(model.parameters(), lr=base_lr, momentum=cfg["retrain.momentum"],
                          weight_decay=cfg["retrain.weight_decay"])
    bs = cfg["retrain.batch_size"]
    model.train()
    for t in range(iters):
        lr = base_lr * (1 - t / iters) ** cfg["retrain.power"]
        for g in opt.param_groups:
            g["lr"] = lr
        batch = augment_batch(batch_for_step(samples, t, bs, cfg["seed"] + 1), cfg, t)
        images, _ = to_tensors(batch)
        masks = torch.from_numpy(np.stack([s.gt_mask for s in batch]))
        loss = pixel_ce(model(images), masks)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if progress is not None:
            progress(t, loss.item())
    return model


@torch.no_grad()
def evaluate_segmenter(model: Segmenter, samples: Sequence[ImageSample], params: CrfParams | None = None,
                       batch_size: int = 16) -> np.ndarray:
    model.eval()
    cm = ev.new_confusion(model.num_classes + 1)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = torch.from_numpy(np.stack([normalize(s.image) for s in chunk])).permute(0, 3, 1, 2).float()
        P = torch.softmax(model(images), dim=1)
        for i, s in enumerate(chunk):
            p = P[i]
            if params is not None:
                p = crf_refine(p, torch.from_numpy(s.image).permute(2, 0, 1).float() * 255.0, params)
            cm = ev.accumulate(cm, harden_labels(p).numpy(), s.gt_mask)
    return cm


def psm_samples(samples: Sequence[ImageSample], psms: Sequence[np.ndarray]) -> list[ImageSample]:
    return [ImageSample(s.image, s.tags, m, s.id) for s, m in zip(samples, psms)]


# ---------------------------------------------------------------------------
# experiments


def stage1_metrics(cms: dict[str, np.ndarray], class_names: Sequence[str], mode: str) -> dict[str, float]:
    out = {}
    for name in ("st", "s", "fused", "cam"):
        m = ev.per_class_metrics(name, cms[name], class_names)
        if mode == "I" and name in ("st", "fused"):
            m = {k: float("nan") for k in m}
        out.update(m)
    return out


def ablation_run(mode: str, cfg: RunConfig, train: Sequence[ImageSample], val: Sequence[ImageSample],
                 class_names: Sequence[str]) -> tuple[TrainState, dict[str, float]]:
    """Train one distillation variant and score it on ``val``."""
    if mode not in MODES:
        raise ValueError(f"unknown ablation mode {mode!r}; expected one of {', '.join(MODES)}")
    cfg = RunConfig(cfg).updated(**{"train.mode": mode})
    state = build_state(cfg, class_names)
    fit(state, train, mode=mode)
    cms = evaluate_stage1(state.model, val, crf_params(cfg), cfg.floats("cam.scales"))
    return state, stage1_metrics(cms, class_names, mode)


def sweep(param: str, values: Sequence[float], cfg: RunConfig, train: Sequence[ImageSample],
          val: Sequence[ImageSample], class_names: Sequence[str]) -> list[tuple[float, dict[str, float]]]:
    key = {"T": "pwm.T", "tau": "pwm.tau"}.get(param)
    if key is None:
        raise ValueError(f"sweep parameter must be T or tau, got {param!r}")
    rows = []
    for v in values:
        run_cfg = RunConfig(cfg).updated(**{key: int(v) if key == "pwm.T" else float(v)}).validate()
        _, metrics = ablation_run("V", run_cfg, train, val, class_names)
        rows.append((v, metrics))
    return rows
