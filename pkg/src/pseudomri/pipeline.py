"""Two-stage training, depth-swept inference and the inference-steps interpolation study."""
from __future__ import annotations

import copy
import csv
import hashlib
import io
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .config import RunConfig, from_dict
from .data import PairedSample, Volume, uniform_depths
from .diffusion import (EmaState, NoiseSchedule, ddim_sample, diffusion_loss, ema_update, forward_noise,
                        make_linear_schedule, predict_x0, uniform_step_indices)
from .guidance import smoothed_one_hot
from .metrics import adjacent_slice_correlation
from .networks import (AutoencoderKL, Denoiser, GaussianPosterior, KoaClassifier, decode, encode_kl,
                       koa_classify_stub, recon_kl_loss, sample_posterior)

log = logging.getLogger(__name__)

BUNDLE_KIND = "pseudomri-bundle"


class NonFiniteLossError(RuntimeError):
    pass


class MissingStageError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# seeding
# --------------------------------------------------------------------------

def derive_seed(*parts) -> int:
    """Stable 63-bit seed from any sequence of printable parts."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def slice_seed(run_seed: int, k: int) -> int:
    return derive_seed("slice", run_seed, k)


def _gen(*parts) -> torch.Generator:
    return torch.Generator().manual_seed(derive_seed(*parts))


# --------------------------------------------------------------------------
# model bundle
# --------------------------------------------------------------------------

def module_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in module.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@dataclass
class ModelBundle:
    cfg: RunConfig
    autoencoder: AutoencoderKL
    denoiser: Optional[Denoiser] = None
    classifier: Optional[KoaClassifier] = None
    ema: Optional[EmaState] = None
    meta: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)  # name -> (tensors, scalars) for resuming
    _sampler: Optional[Denoiser] = field(default=None, repr=False)

    @classmethod
    def create(cls, cfg: RunConfig, seed: Optional[int] = None) -> "ModelBundle":
        seed = cfg.seed if seed is None else seed
        torch.manual_seed(derive_seed("init-ae", seed))
        return cls(cfg, AutoencoderKL(cfg.autoencoder), meta={"ae_step": 0, "diff_step": 0})

    @property
    def schedule(self) -> NoiseSchedule:
        s = self.cfg.schedule
        return make_linear_schedule(s.T, s.beta_start, s.beta_end)

    def ensure_denoiser(self, seed: int) -> Denoiser:
        if self.denoiser is None:
            torch.manual_seed(derive_seed("init-denoiser", seed))
            self.denoiser = Denoiser(self.cfg.autoencoder, self.cfg.unet, self.cfg.cond_encoder)
            self.ema = EmaState.from_module(self.denoiser, self.cfg.train.ema_decay)
        return self.denoiser

    def sampling_model(self) -> Denoiser:
        """Frozen copy of the denoiser carrying the EMA weights (used for all sampling)."""
        if self.denoiser is None or self.ema is None:
            raise MissingStageError("bundle has no trained diffusion stage")
        if self._sampler is None:
            model = copy.deepcopy(self.denoiser)
            self.ema.copy_to(model)
            model.eval().requires_grad_(False)
            self._sampler = model
        return self._sampler

    def invalidate(self) -> None:
        self._sampler = None

    # ---- persistence ----

    def tensors(self) -> dict:
        out = ckpt.flatten_state("ae", self.autoencoder.state_dict())
        if self.denoiser is not None:
            out.update(ckpt.flatten_state("denoiser", self.denoiser.state_dict()))
            out.update(ckpt.flatten_state("ema", self.ema.shadow))
        if self.classifier is not None:
            out.update(ckpt.flatten_state("classifier", self.classifier.state_dict()))
        for name, (tensors, _) in self.optim.items():
            out.update(tensors)
        return out

    def save(self, path) -> Path:
        header = {
            "kind": BUNDLE_KIND,
            "config": self.cfg.to_dict(),
            "meta": self.meta,
            "has_denoiser": self.denoiser is not None,
            "has_classifier": self.classifier is not None,
            "optim": {name: scalars for name, (_, scalars) in self.optim.items()},
        }
        return ckpt.save_checkpoint(path, header, self.tensors())

    @classmethod
    def load(cls, path) -> "ModelBundle":
        header, tensors = ckpt.load_checkpoint(path)
        if header.get("kind") != BUNDLE_KIND:
            raise ckpt.CheckpointError(f"{path} is not a model bundle")
        cfg = from_dict(header["config"])
        ae = AutoencoderKL(cfg.autoencoder)
        ae.load_state_dict(ckpt.unflatten_state("ae", tensors))
        bundle = cls(cfg, ae, meta=header["meta"])
        if header["has_denoiser"]:
            bundle.denoiser = Denoiser(cfg.autoencoder, cfg.unet, cfg.cond_encoder)
            bundle.denoiser.load_state_dict(ckpt.unflatten_state("denoiser", tensors))
            bundle.ema = EmaState(cfg.train.ema_decay, ckpt.unflatten_state("ema", tensors))
        if header["has_classifier"]:
            bundle.classifier = KoaClassifier(cfg.autoencoder.image_channels)
            bundle.classifier.load_state_dict(ckpt.unflatten_state("classifier", tensors))
        for name, scalars in header.get("optim", {}).items():
            bundle.optim[name] = ({k: v for k, v in tensors.items() if k.startswith(name + "/")}, scalars)
        return bundle


# --------------------------------------------------------------------------
# training reports
# --------------------------------------------------------------------------

REPORT_COLUMNS = ("eval", "step", "l_rec", "kl", "l_diff", "lr", "seconds")


@dataclass
class TrainReport:
    stage: str
    seed: int
    rows: list[dict] = field(default_factory=list)
    steps: int = 0
    wallclock: float = 0.0
    stopped_early: bool = False
    notes: dict = field(default_factory=dict)

    def series(self, key: str) -> list[float]:
        return [r[key] for r in self.rows]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for k, r in enumerate(self.rows):
            w.writerow([k, r["step"]] + [repr(float(r.get(c, math.nan))) for c in REPORT_COLUMNS[2:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _check_finite(loss: torch.Tensor, stage: str, step: int) -> None:
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"{stage}: non-finite loss {loss.item()} at step {step}")


def _set_lr(opt: torch.optim.Optimizer, base: float, step: int, warmup: int) -> float:
    lr = base * min(1.0, (step + 1) / warmup) if warmup > 0 else base
    for g in opt.param_groups:
        g["lr"] = lr
    return lr


def _make_optimizer(params, lr, weight_decay):
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def _restore_optimizer(bundle, name, opt, names):
    if name in bundle.optim:
        tensors, scalars = bundle.optim[name]
        ckpt.optimizer_from_tensors(name, opt, names, tensors, scalars)


def _store_optimizer(bundle, name, opt, names):
    bundle.optim[name] = ckpt.optimizer_to_tensors(name, opt, names)


class _EarlyStop:
    """Stops after ``patience`` evaluations without a new best (or once below ``stop_below``)."""

    def __init__(self, patience: int, stop_below: Optional[float], state: Optional[dict] = None):
        self.patience, self.stop_below = patience, stop_below
        state = state or {}
        self.best = state.get("best", math.inf)
        self.since = state.get("since", 0)

    def update(self, value: float) -> bool:
        if value < self.best:
            self.best, self.since = value, 0
        else:
            self.since += 1
        below = self.stop_below is not None and value < self.stop_below
        return below or self.since >= self.patience

    def state(self) -> dict:
        return {"best": self.best, "since": self.since}


# --------------------------------------------------------------------------
# data tensors
# --------------------------------------------------------------------------

def _to_channels(x: torch.Tensor, channels: int) -> torch.Tensor:
    """``(N, H, W)`` -> ``(N, C, H, W)``; 3 channels are identical copies."""
    return x[:, None].expand(-1, channels, -1, -1).contiguous()


@dataclass
class TrainingTensors:
    xrays: torch.Tensor  # (N, C, R, R)
    volumes: torch.Tensor  # (N, S, C, R, R)
    grades: torch.Tensor  # (N,)

    @classmethod
    def from_samples(cls, samples: Sequence[PairedSample], channels: int = 1) -> "TrainingTensors":
        samples = list(samples)
        if not samples:
            raise ValueError("empty dataset")
        xr = torch.from_numpy(np.stack([s.xray for s in samples])).float()
        vol = torch.from_numpy(np.stack([s.volume.slices for s in samples])).float()
        n, s, r, _ = vol.shape
        return cls(_to_channels(xr, channels), _to_channels(vol.reshape(n * s, r, r), channels).reshape(n, s, channels, r, r),
                   torch.tensor([p.grade for p in samples]))

    @property
    def n(self) -> int:
        return self.xrays.shape[0]

    @property
    def s(self) -> int:
        return self.volumes.shape[1]


# --------------------------------------------------------------------------
# stage 1: autoencoder
# --------------------------------------------------------------------------

def _ae_names(bundle):
    return [n for n, _ in bundle.autoencoder.named_parameters()]


@torch.no_grad()
def evaluate_reconstruction(ae: AutoencoderKL, slices: torch.Tensor, batch: int = 64):
    """Training-set ``(L_rec, KL)`` decoding the posterior mean."""
    ae.eval()
    rec, kl, n = 0.0, 0.0, 0
    for k in range(0, slices.shape[0], batch):
        x = slices[k:k + batch]
        post = ae.encode(x)
        x_hat = ae.decoder(post.mean)
        _, mse, kl_b = recon_kl_loss(x, x_hat, post, 0.0)
        rec += mse.item() * len(x)
        kl += kl_b.item() * len(x)
        n += len(x)
    ae.train()
    return rec / n, kl / n


def train_autoencoder(samples, bundle: ModelBundle, steps: Optional[int] = None,
                      on_checkpoint: Optional[Callable[[ModelBundle], None]] = None):
    """Stage 1: fit E1/D on per-slice reconstruction + KL. Resumes from ``bundle.meta['ae_step']``."""
    cfg, tc = bundle.cfg, bundle.cfg.train
    steps = tc.ae_steps if steps is None else steps
    data = samples if isinstance(samples, TrainingTensors) else TrainingTensors.from_samples(samples, cfg.autoencoder.image_channels)
    slices = data.volumes.reshape((-1,) + tuple(data.volumes.shape[2:]))
    if tc.max_slices is not None:
        slices = slices[:tc.max_slices]
    if slices.shape[0] == 0:
        raise ValueError("empty dataset")
    ae = bundle.autoencoder
    ae.train()
    names = _ae_names(bundle)
    opt = _make_optimizer(ae.parameters(), tc.ae_lr, tc.weight_decay)
    _restore_optimizer(bundle, "opt_ae", opt, names)
    meta = bundle.meta
    history = meta.setdefault("ae_history", [])
    stopper = _EarlyStop(tc.patience, tc.stop_below, meta.get("ae_early"))
    report = TrainReport("autoencoder", cfg.seed, rows=history)
    start, t0 = meta.get("ae_step", 0), time.perf_counter()
    if meta.get("ae_done"):
        return bundle, report
    lr = tc.ae_lr
    for step in range(start, steps):
        gen = _gen(cfg.seed, "ae", step)
        idx = torch.randint(slices.shape[0], (min(tc.batch_size, slices.shape[0]),), generator=gen)
        x = slices[idx]
        lr = _set_lr(opt, tc.ae_lr, step, tc.warmup_steps)
        x_hat, post = ae(x, gen)
        loss, mse, kl = recon_kl_loss(x, x_hat, post, tc.kl_weight)
        _check_finite(loss, "autoencoder", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        meta["ae_step"] = step + 1
        done = False
        if (step + 1) % tc.eval_every == 0 or step + 1 == steps:
            l_rec, l_kl = evaluate_reconstruction(ae, slices)
            history.append({"step": step + 1, "l_rec": l_rec, "kl": l_kl, "l_diff": math.nan, "lr": lr,
                            "seconds": time.perf_counter() - t0})
            log.info("ae step %d  L_rec %.5f  KL %.4f", step + 1, l_rec, l_kl)
            done = stopper.update(l_rec)
            meta["ae_early"] = stopper.state()
        if done:
            report.stopped_early = step + 1 < steps
            meta["ae_done"] = True
        if on_checkpoint is not None and ((step + 1) % tc.checkpoint_every == 0 or done or step + 1 == steps):
            _store_optimizer(bundle, "opt_ae", opt, names)
            on_checkpoint(bundle)
        if done:
            break
    _store_optimizer(bundle, "opt_ae", opt, names)
    report.steps = meta["ae_step"] - start
    report.wallclock = time.perf_counter() - t0
    return bundle, report


# --------------------------------------------------------------------------
# classifier stub
# --------------------------------------------------------------------------

def train_classifier(samples, bundle: ModelBundle, steps: Optional[int] = None, lr: float = 3e-3):
    """Fit the KOA classifier stub on radiographs; returns training-set accuracy."""
    cfg = bundle.cfg
    steps = cfg.train.classifier_steps if steps is None else steps
    data = samples if isinstance(samples, TrainingTensors) else TrainingTensors.from_samples(samples, cfg.autoencoder.image_channels)
    torch.manual_seed(derive_seed("init-classifier", cfg.seed))
    clf = KoaClassifier(cfg.autoencoder.image_channels)
    opt = torch.optim.AdamW(clf.parameters(), lr=lr, weight_decay=1e-4)
    for step in range(steps):
        gen = _gen(cfg.seed, "classifier", step)
        idx = torch.randint(data.n, (min(32, data.n),), generator=gen)
        loss = F.cross_entropy(clf(data.xrays[idx]), data.grades[idx])
        _check_finite(loss, "classifier", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    clf.eval().requires_grad_(False)
    bundle.classifier = clf
    return classifier_accuracy(clf, data.xrays, data.grades)


@torch.no_grad()
def classifier_accuracy(clf: KoaClassifier, xrays: torch.Tensor, grades: torch.Tensor) -> float:
    return int((clf(xrays).argmax(-1) == grades).sum()) / len(grades)


def grade_distribution(bundle: ModelBundle, x_c: torch.Tensor, grade=None) -> torch.Tensor:
    """KOA distribution per the configured mode; label mode needs the grade."""
    if bundle.cfg.train.label_mode == "label":
        if grade is None:
            raise ValueError("label mode needs the ground-truth grade")
        return koa_classify_stub(x_c, grade=torch.as_tensor(grade).reshape(-1).expand(x_c.shape[0]))
    if bundle.classifier is None:
        raise MissingStageError("classifier mode needs a trained classifier")
    with torch.no_grad():
        return koa_classify_stub(x_c, bundle.classifier)


# --------------------------------------------------------------------------
# stage 2: diffusion
# --------------------------------------------------------------------------

@torch.no_grad()
def encode_posteriors(ae: AutoencoderKL, volumes: torch.Tensor, batch: int = 64) -> GaussianPosterior:
    n, s = volumes.shape[:2]
    flat = volumes.reshape((n * s,) + tuple(volumes.shape[2:]))
    means, logvars = [], []
    for k in range(0, flat.shape[0], batch):
        post = encode_kl(flat[k:k + batch], ae)
        means.append(post.mean)
        logvars.append(post.logvar)
    mean, logvar = torch.cat(means), torch.cat(logvars)
    return GaussianPosterior(mean.reshape((n, s) + tuple(mean.shape[1:])), logvar.reshape((n, s) + tuple(mean.shape[1:])))


def _denoiser_names(bundle):
    return [n for n, _ in bundle.denoiser.named_parameters()]


def train_diffusion(samples, bundle: ModelBundle, steps: Optional[int] = None,
                    on_checkpoint: Optional[Callable[[ModelBundle], None]] = None):
    """Stage 2: E1/D frozen; condition encoder, guidance module and U-Net trained on the eps objective."""
    cfg, tc = bundle.cfg, bundle.cfg.train
    steps = tc.diff_steps if steps is None else steps
    if bundle.meta.get("ae_step", 0) <= 0:
        raise MissingStageError("train the autoencoder first")
    data = samples if isinstance(samples, TrainingTensors) else TrainingTensors.from_samples(samples, cfg.autoencoder.image_channels)
    sched = bundle.schedule
    ae = bundle.autoencoder
    ae.eval().requires_grad_(False)
    frozen_before = module_hash(ae)

    meta = bundle.meta
    if tc.label_mode == "classifier" and bundle.classifier is None:
        meta["classifier_accuracy"] = train_classifier(data, bundle)
    probs_all = grade_distribution(bundle, data.xrays, data.grades)

    posts = encode_posteriors(ae, data.volumes)
    # range of the scaled training latents; sampling clips predicted z0 to it
    meta["latent_bound"] = float(tc.latent_scale * posts.mean.abs().max())
    model = bundle.ensure_denoiser(cfg.seed)
    model.train()
    names = _denoiser_names(bundle)
    opt = _make_optimizer(model.parameters(), tc.lr, tc.weight_decay)
    _restore_optimizer(bundle, "opt_diff", opt, names)
    history = meta.setdefault("diff_history", [])
    stopper = _EarlyStop(tc.patience, tc.stop_below, meta.get("diff_early"))
    report = TrainReport("diffusion", cfg.seed, rows=history)
    start, t0 = meta.get("diff_step", 0), time.perf_counter()
    if meta.get("diff_done"):
        return bundle, report
    window, last_rec = [], math.nan
    depths = torch.as_tensor(uniform_depths(data.s), dtype=torch.float32)
    lr = tc.lr
    for step in range(start, steps):
        gen = _gen(cfg.seed, "diff", step)
        b = tc.batch_size
        idx = torch.randint(data.n, (b,), generator=gen)
        d_idx = torch.randint(data.s, (b,), generator=gen)
        t = torch.randint(1, sched.total_steps + 1, (b,), generator=gen)
        post = GaussianPosterior(posts.mean[idx, d_idx], posts.logvar[idx, d_idx])
        if tc.sample_latents:
            z0 = sample_posterior(post, gen, tc.latent_scale)
        else:
            z0 = tc.latent_scale * post.mean
        eps = torch.randn(z0.shape, generator=gen)
        z_t = forward_noise(z0, t, eps, sched)
        lr = _set_lr(opt, tc.lr, step, tc.warmup_steps)
        cond = model.condition(data.xrays[idx], probs_all[idx])
        eps_hat = model(z_t, t, depths[d_idx], cond)
        loss = diffusion_loss(eps, eps_hat)
        _check_finite(loss, "diffusion", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        ema_update(bundle.ema, model)
        bundle.invalidate()
        window.append(loss.item())
        meta["diff_step"] = step + 1
        done = False
        if (step + 1) % tc.eval_every == 0 or step + 1 == steps:
            with torch.no_grad():
                # monitoring only: reconstruction of the slice through the predicted clean latent
                x0_hat = decode(predict_x0(z_t, eps_hat.detach(), t, sched), ae, tc.latent_scale)
                last_rec = F.mse_loss(x0_hat, data.volumes[idx, d_idx]).item()
            l_diff = float(np.mean(window))
            window = []
            history.append({"step": step + 1, "l_rec": last_rec, "kl": math.nan, "l_diff": l_diff, "lr": lr,
                            "seconds": time.perf_counter() - t0})
            log.info("diff step %d  L_diff %.5f  L_rec(monitor) %.5f", step + 1, l_diff, last_rec)
            done = stopper.update(l_diff)
            meta["diff_early"] = stopper.state()
        if done:
            report.stopped_early = step + 1 < steps
            meta["diff_done"] = True
        if on_checkpoint is not None and ((step + 1) % tc.checkpoint_every == 0 or done or step + 1 == steps):
            _store_optimizer(bundle, "opt_diff", opt, names)
            on_checkpoint(bundle)
        if done:
            break
    _store_optimizer(bundle, "opt_diff", opt, names)
    frozen_after = module_hash(ae)
    if frozen_after != frozen_before:
        raise RuntimeError("autoencoder parameters changed during diffusion training")
    meta["ae_hash"] = frozen_after
    report.notes["ae_hash_before"] = frozen_before
    report.notes["ae_hash_after"] = frozen_after
    report.steps = meta["diff_step"] - start
    report.wallclock = time.perf_counter() - t0
    return bundle, report


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def _as_condition_image(x_c, channels: int) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(x_c, dtype=np.float32))
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3 and x.shape[0] not in (1, 3):
        raise ValueError(f"expected a single (H, W) radiograph, got {tuple(x.shape)}")
    if x.shape[0] != channels:
        x = x[:1].expand(channels, -1, -1)
    return x[None].contiguous()


@dataclass
class Conditioning:
    x_c: torch.Tensor
    probs: torch.Tensor
    cond: tuple


@torch.no_grad()
def prepare_conditioning(bundle: ModelBundle, x_c, grade=None) -> Conditioning:
    """Depth-independent conditioning, computed once per radiograph."""
    model = bundle.sampling_model()
    x = _as_condition_image(x_c, bundle.cfg.autoencoder.image_channels)
    probs = grade_distribution(bundle, x, grade)
    return Conditioning(x, probs, model.condition(x, probs))


@torch.no_grad()
def infer_slice(bundle: ModelBundle, x_c, depth: float, steps: int, seed: int, grade=None,
                conditioning: Optional[Conditioning] = None) -> np.ndarray:
    """One generated slice at normalized ``depth`` from a unit-Gaussian start seeded by ``seed``."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not 0.0 <= depth <= 1.0:
        raise ValueError("depth must lie in [0, 1]")
    model = bundle.sampling_model()
    cond = conditioning or prepare_conditioning(bundle, x_c, grade)
    sched = bundle.schedule
    ae_cfg = bundle.cfg.autoencoder
    lat = ae_cfg.latent_resolution
    gen = torch.Generator().manual_seed(seed)
    z_T = torch.randn((1, ae_cfg.latent_channels, lat, lat), generator=gen)
    d = torch.tensor([depth], dtype=torch.float32)
    denoise = lambda z, t, c: model(z, t, d, c)
    clip = bundle.meta.get("latent_bound") if bundle.cfg.infer.clip_latents else None
    z0 = ddim_sample(denoise, z_T, cond.cond, uniform_step_indices(sched.total_steps, steps), sched, clip)
    img = decode(z0, bundle.autoencoder, bundle.cfg.train.latent_scale)[0]
    return img.mean(0).numpy() if img.shape[0] > 1 else img[0].numpy()


def infer_volume(bundle: ModelBundle, x_c, s: int, steps: int, seed: int, grade=None, workers: int = 1,
                 shared_noise: bool = False, order: Optional[Sequence[int]] = None,
                 timings: Optional[list] = None) -> Volume:
    """``s`` slices at depths ``k / (s - 1)``. Slice ``k`` is seeded by ``slice_seed(seed, k)``
    (or by ``slice_seed(seed, 0)`` for every slice with ``shared_noise``)."""
    if s < 2:
        raise ValueError("need at least two slices")
    bundle.autoencoder.eval()
    cond = prepare_conditioning(bundle, x_c, grade)
    depths = uniform_depths(s)
    order = list(range(s)) if order is None else list(order)
    if sorted(order) != list(range(s)):
        raise ValueError("order must be a permutation of the slice indices")

    def run(k):
        t0 = time.perf_counter()
        img = infer_slice(bundle, None, float(depths[k]), steps, slice_seed(seed, 0 if shared_noise else k),
                          conditioning=cond)
        return k, img, time.perf_counter() - t0

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, order))
    else:
        results = [run(k) for k in order]
    slices = [None] * s
    for k, img, dt in results:
        slices[k] = img
        if timings is not None:
            timings.append((k, dt))
    return Volume(np.stack(slices), depths, provenance="generated")


@dataclass
class InterpRow:
    s: int
    adjacent_corr: float
    gt_corr: float
    seconds: float


def interp_study(bundle: ModelBundle, x_c, s_list: Sequence[int], steps: int, seed: int, grade=None,
                 gt_volume=None, workers: int = 1):
    """Adjacent-slice correlation of generated volumes for each slice count in ``s_list``."""
    gt_corr = adjacent_slice_correlation(gt_volume) if gt_volume is not None else math.nan
    rows, volumes = [], {}
    for s in s_list:
        t0 = time.perf_counter()
        vol = infer_volume(bundle, x_c, s, steps, seed, grade, workers)
        volumes[s] = vol
        rows.append(InterpRow(s, adjacent_slice_correlation(vol), gt_corr, time.perf_counter() - t0))
    return rows, volumes


INTERP_COLUMNS = ("s", "adjacent_corr", "gt_corr", "seconds")


def interp_csv(rows: Sequence[InterpRow], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INTERP_COLUMNS)
    for r in rows:
        w.writerow([r.s, repr(r.adjacent_corr), repr(r.gt_corr), repr(r.seconds)])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
