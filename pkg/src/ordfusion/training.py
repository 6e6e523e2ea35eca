"""Two-optimizer training loop with fusion-sample generation.

Each joint-phase batch runs the full pipeline: sample a reference from an
adjacent category for every main image, encode both, separate and fuse their
final feature maps (or add them directly under the IG-only ablation), decode
a fusion image, and apply two disjoint updates. The generation loss updates
only the separation extractors and the generator (encoder gradients that leak
through the fused image's re-encoding are discarded); the classification loss
updates only the encoder and classifier, with fusion images detached so they
act as extra labeled data. An optional continued phase then trains the
encoder and classifier alone on plain cross-entropy while generation-side
parameters stay frozen.

Checkpoints are single archives holding every parameter and optimizer tensor,
the step counter, phase, and RNG states, plus a JSON-able config header with
a mandatory version field; reloading resumes training bit-exactly.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from . import evaluation
from .backbone import ARCHS, BackboneConfig, EncoderClassifier
from .datasets import OrdinalDataset
from .generator import (
    GENERATOR_KINDS,
    FeatureSeparator,
    build_generator,
    direct_add_fusion,
    fuse,
    generate,
)
from .losses import (
    LossBundle,
    LossWeights,
    SsimParams,
    categorical_generation_loss,
    classification_loss,
    cross_entropy,
    generation_loss,
    reconstruction_loss,
    structural_generation_loss,
)
from .sampling import SAMPLER_KINDS, NoReferenceAvailable, sample_reference_index

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

PHASE_JOINT = "joint"
PHASE_CONTINUED = "continued"


class ConfigError(ValueError):
    """Invalid training configuration."""


class CheckpointError(RuntimeError):
    """Unreadable or incompatible checkpoint archive."""


@dataclass(frozen=True)
class TrainConfig:
    """Resolved training hyperparameters.

    ``fusion_mode`` and ``enable_sf`` describe the same switch from two
    angles; they are normalized so mode "add" always means the ablation
    without separation extractors.
    """

    seed: int = 0
    batch_size: int = 18
    lr_encoder: float = 1e-4
    lr_generator: float = 5e-3
    joint_steps: int = 2000
    continued_training_batches: int = 200
    eval_every: int = 0  # 0: evaluate only at phase boundaries
    enable_ig: bool = True
    enable_sf: bool = True
    enable_ct: bool = True
    arch: str = "small_cnn"
    channels: int = 32
    sampler_kind: str = "inverse_ratio"
    generator_kind: str = "unet"
    fusion_mode: str = "sf"
    tau: float = 0.2
    alpha: float = 5.0
    beta: float = 2.0
    lam: float = 0.2
    ssim_epsilon: float = 1e-6
    loss_reduction: str = "sum"

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        # zero is allowed so one optimizer can be isolated in partition checks
        if self.lr_encoder < 0 or self.lr_generator < 0:
            raise ConfigError("learning rates must be nonnegative")
        if self.joint_steps < 0 or self.continued_training_batches < 0:
            raise ConfigError("step budgets must be nonnegative")
        if self.enable_sf and not self.enable_ig:
            raise ConfigError("enable_sf requires enable_ig")
        if self.sampler_kind not in SAMPLER_KINDS:
            raise ConfigError(f"sampler.kind must be one of {SAMPLER_KINDS}")
        if self.generator_kind not in GENERATOR_KINDS:
            raise ConfigError(f"generator.kind must be one of {GENERATOR_KINDS}")
        if self.arch not in ARCHS:
            raise ConfigError(f"arch must be one of {ARCHS}")
        if self.fusion_mode not in ("sf", "add"):
            raise ConfigError("fusion.mode must be 'sf' or 'add'")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError("loss.reduction must be 'sum' or 'mean'")
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"sf.tau must lie in (0, 1), got {self.tau}")
        if min(self.alpha, self.beta, self.lam) < 0:
            raise ConfigError("loss weights must be nonnegative")
        # keep the two views of the S-F switch consistent
        if not self.enable_sf and self.fusion_mode == "sf":
            object.__setattr__(self, "fusion_mode", "add")
        if self.fusion_mode == "add" and self.enable_sf:
            object.__setattr__(self, "enable_sf", False)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, lam=self.lam)

    @property
    def ssim_params(self) -> SsimParams:
        return SsimParams(epsilon=self.ssim_epsilon)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "batch_size": self.batch_size,
            "lr_encoder": self.lr_encoder,
            "lr_generator": self.lr_generator,
            "joint_steps": self.joint_steps,
            "continued_training_batches": self.continued_training_batches,
            "eval_every": self.eval_every,
            "enable_ig": self.enable_ig,
            "enable_sf": self.enable_sf,
            "enable_ct": self.enable_ct,
            "arch": self.arch,
            "channels": self.channels,
            "sampler": {"kind": self.sampler_kind},
            "sf": {"tau": self.tau},
            "generator": {"kind": self.generator_kind},
            "fusion": {"mode": self.fusion_mode},
            "loss": {
                "alpha": self.alpha,
                "beta": self.beta,
                "lambda": self.lam,
                "ssim_epsilon": self.ssim_epsilon,
                "reduction": self.loss_reduction,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        flat: dict = {}
        for key in (
            "seed",
            "batch_size",
            "lr_encoder",
            "lr_generator",
            "joint_steps",
            "continued_training_batches",
            "eval_every",
            "enable_ig",
            "enable_sf",
            "enable_ct",
            "arch",
            "channels",
            "tau",
            "alpha",
            "beta",
            "lam",
            "ssim_epsilon",
            "loss_reduction",
            "sampler_kind",
            "generator_kind",
            "fusion_mode",
        ):
            if key in d:
                flat[key] = d[key]
        if "sampler" in d:
            flat["sampler_kind"] = d["sampler"].get("kind", cls.sampler_kind)
        if "sf" in d:
            flat["tau"] = d["sf"].get("tau", cls.tau)
        if "generator" in d:
            flat["generator_kind"] = d["generator"].get("kind", cls.generator_kind)
        if "fusion" in d:
            flat["fusion_mode"] = d["fusion"].get("mode", cls.fusion_mode)
        if "loss" in d:
            loss = d["loss"]
            flat["alpha"] = loss.get("alpha", cls.alpha)
            flat["beta"] = loss.get("beta", cls.beta)
            flat["lam"] = loss.get("lambda", loss.get("lam", cls.lam))
            flat["ssim_epsilon"] = loss.get("ssim_epsilon", cls.ssim_epsilon)
            flat["loss_reduction"] = loss.get("reduction", cls.loss_reduction)
        unknown = set(d) - {
            "sampler",
            "sf",
            "generator",
            "fusion",
            "loss",
        } - set(flat)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**flat)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def with_overrides(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


def apply_ablation(cfg: TrainConfig, name: str) -> TrainConfig:
    """Row presets: base (no generation), ig (direct add), sf (no continued
    training), full."""
    presets = {
        "base": dict(enable_ig=False, enable_sf=False, enable_ct=False, fusion_mode="add"),
        "ig": dict(enable_ig=True, enable_sf=False, enable_ct=False, fusion_mode="add"),
        "sf": dict(enable_ig=True, enable_sf=True, enable_ct=False, fusion_mode="sf"),
        "full": dict(enable_ig=True, enable_sf=True, enable_ct=True, fusion_mode="sf"),
    }
    if name not in presets:
        raise ConfigError(f"unknown ablation {name!r}; expected one of {sorted(presets)}")
    return cfg.with_overrides(**presets[name])


def _dataset_backbone_config(cfg: TrainConfig, ds: OrdinalDataset) -> BackboneConfig:
    shape = ds.image_shape
    if len(shape) == 2:
        in_channels, h, w = 1, *shape
    elif len(shape) == 3:
        in_channels, h, w = shape
    else:
        raise ConfigError(f"unsupported image shape {shape}")
    if h != w:
        raise ConfigError(f"images must be square, got {h}x{w}")
    return BackboneConfig(
        arch=cfg.arch,
        channels=cfg.channels,
        input_size=h,
        in_channels=in_channels,
        num_classes=ds.k,
    )


def _to_tensor_stack(ds: OrdinalDataset) -> tuple[Tensor, Tensor]:
    images = torch.from_numpy(ds.images_array())
    if images.ndim == 3:
        images = images.unsqueeze(1)
    labels = torch.from_numpy(ds.labels_array())
    return images, labels


class Trainer:
    """Owns model/optimizer state and advances it one batch at a time."""

    def __init__(self, cfg: TrainConfig, train_ds: OrdinalDataset, val_ds: OrdinalDataset | None = None):
        cfg_backbone = _dataset_backbone_config(cfg, train_ds)
        self.cfg = cfg
        self.backbone_cfg = cfg_backbone
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.images, self.labels = _to_tensor_stack(train_ds)

        torch.manual_seed(cfg.seed)
        self.model = EncoderClassifier(cfg_backbone)
        self.separator = (
            FeatureSeparator(cfg.channels, cfg.tau) if cfg.enable_ig and cfg.enable_sf else None
        )
        self.generator = build_generator(cfg.generator_kind, cfg_backbone) if cfg.enable_ig else None

        self.opt_encoder = torch.optim.Adam(self.model.parameters(), lr=cfg.lr_encoder)
        gen_params = []
        if self.separator is not None:
            gen_params += list(self.separator.parameters())
        if self.generator is not None:
            gen_params += list(self.generator.parameters())
        self.opt_generator = (
            torch.optim.Adam(gen_params, lr=cfg.lr_generator) if gen_params else None
        )

        self.rng = np.random.default_rng(cfg.seed)
        self.step = 0
        self.phase = PHASE_JOINT

    # ------------------------------------------------------------------ steps

    def _draw_batch(self) -> np.ndarray:
        n = len(self.train_ds)
        size = min(self.cfg.batch_size, n)
        return self.rng.choice(n, size=size, replace=False)

    def _sample_references(self, labels: Tensor) -> list[int | None]:
        refs: list[int | None] = []
        for m in labels.tolist():
            try:
                refs.append(sample_reference_index(self.cfg.sampler_kind, self.train_ds, m, self.rng))
            except NoReferenceAvailable:
                refs.append(None)
        return refs

    def train_step(self, batch_idx: np.ndarray | None = None) -> LossBundle:
        if batch_idx is None:
            batch_idx = self._draw_batch()
        if self.phase == PHASE_JOINT and self.cfg.enable_ig:
            bundle = self._joint_step(torch.as_tensor(batch_idx, dtype=torch.long))
        else:
            bundle = self._plain_ce_step(torch.as_tensor(batch_idx, dtype=torch.long))
        self.step += 1
        return bundle

    def _plain_ce_step(self, batch_idx: Tensor) -> LossBundle:
        x_m = self.images[batch_idx]
        y_m = self.labels[batch_idx]
        self.opt_encoder.zero_grad()
        ce_main = cross_entropy(self.model(x_m), y_m)
        ce_main.backward()
        self.opt_encoder.step()
        v = float(ce_main.item())
        return LossBundle(l_ce_main=v, l_c=v)

    def _joint_step(self, batch_idx: Tensor) -> LossBundle:
        cfg = self.cfg
        weights = cfg.loss_weights
        x_m = self.images[batch_idx]
        y_m = self.labels[batch_idx]

        self.opt_encoder.zero_grad()
        self.opt_generator.zero_grad()

        pyr_m = self.model.encode(x_m)

        refs = self._sample_references(y_m)
        valid = [i for i, r in enumerate(refs) if r is not None]
        x_f_data = None
        y_r_valid = None
        l_sg = l_cg = l_rc = l_g = 0.0
        if valid:
            valid_t = torch.as_tensor(valid, dtype=torch.long)
            ref_idx = torch.as_tensor([refs[i] for i in valid], dtype=torch.long)
            x_r = self.images[ref_idx]
            y_r_valid = self.labels[ref_idx]
            with torch.no_grad():
                pyr_r = self.model.encode(x_r)
                p_r = self.model.classify(pyr_r.f4)
            det_pyr = pyr_m.detached()
            det_pyr.stages = [s[valid_t] for s in det_pyr.stages]
            det_f4 = det_pyr.f4

            if self.separator is not None:
                sep_m = self.separator(det_f4)
                sep_r = self.separator(pyr_r.f4)
                fused = fuse(sep_m, sep_r)
                l_rc_t = reconstruction_loss(det_f4, sep_m, cfg.loss_reduction)
            else:
                fused = direct_add_fusion(det_f4, pyr_r.f4)
                l_rc_t = torch.zeros(())

            x_f = generate(cfg.generator_kind, self.generator, fused, det_pyr)
            l_sg_t = structural_generation_loss(
                x_m[valid_t], x_r, x_f, cfg.ssim_params, batched=True
            )
            p_f = self.model.classify(self.model.encode(x_f).f4)
            l_cg_t = categorical_generation_loss(p_r, p_f, cfg.loss_reduction)
            l_g_t = generation_loss(l_sg_t, l_cg_t, l_rc_t, weights)
            l_g_t.backward()
            self.opt_generator.step()
            # the fused image's re-encoding leaked gradients into the encoder
            # and classifier; they belong to the generation loss and are dropped
            self.opt_encoder.zero_grad()
            x_f_data = x_f.detach()
            l_sg, l_cg, l_rc, l_g = (
                float(l_sg_t.item()),
                float(l_cg_t.item()),
                float(l_rc_t.item()),
                float(l_g_t.item()),
            )

        ce_main = cross_entropy(self.model.classify(pyr_m.f4), y_m)
        ce_fusion_val = 0.0
        if x_f_data is not None:
            if weights.lam > 0:
                ce_fusion = cross_entropy(self.model(x_f_data), y_r_valid)
                l_c = classification_loss(ce_main, ce_fusion, weights.lam)
                ce_fusion_val = float(ce_fusion.item())
            else:
                with torch.no_grad():
                    ce_fusion_val = float(cross_entropy(self.model(x_f_data), y_r_valid).item())
                l_c = ce_main
        else:
            l_c = ce_main
        l_c.backward()
        self.opt_encoder.step()

        return LossBundle(
            l_sg=l_sg,
            l_cg=l_cg,
            l_rc=l_rc,
            l_g=l_g,
            l_ce_main=float(ce_main.item()),
            l_ce_fusion=ce_fusion_val,
            l_c=float(ce_main.item()) + weights.lam * ce_fusion_val,
        )

    # ------------------------------------------------------------------ loop

    def run(self, trace_path=None, checkpoint_dir=None) -> list[dict]:
        """Joint phase, then continued phase when enabled; returns the trace."""
        cfg = self.cfg
        trace: list[dict] = []
        trace_file = open(trace_path, "a") if trace_path else None
        try:
            budgets = [(PHASE_JOINT, cfg.joint_steps)]
            if cfg.enable_ct:
                budgets.append((PHASE_CONTINUED, cfg.continued_training_batches))
            for phase, budget in budgets:
                self.phase = phase
                for i in range(budget):
                    bundle = self.train_step()
                    row = {
                        "step": self.step,
                        "phase": phase,
                        "l_sg": bundle.l_sg,
                        "l_cg": bundle.l_cg,
                        "l_rc": bundle.l_rc,
                        "l_g": bundle.l_g,
                        "l_ce_main": bundle.l_ce_main,
                        "l_c": bundle.l_c,
                        "val_acc": None,
                        "val_mae": None,
                    }
                    last = i == budget - 1
                    if self.val_ds is not None and (
                        last or (cfg.eval_every and self.step % cfg.eval_every == 0)
                    ):
                        records = self.evaluate(self.val_ds)
                        row["val_acc"] = evaluation.accuracy(records)
                        row["val_mae"] = evaluation.mae(records)
                    trace.append(row)
                    if trace_file:
                        trace_file.write(json.dumps(row) + "\n")
        except Exception:
            if checkpoint_dir is not None:
                flush = Path(checkpoint_dir) / f"ckpt_abort_{self.step}"
                try:
                    self.save_checkpoint(flush)
                    logger.error("aborted at step %d; state flushed to %s", self.step, flush)
                except Exception:  # pragma: no cover - best-effort flush
                    logger.exception("failed to flush checkpoint on abort")
            raise
        finally:
            if trace_file:
                trace_file.close()
        return trace

    # ------------------------------------------------------------------ eval

    @torch.no_grad()
    def predict_logits(self, images: Tensor, batch_size: int = 256) -> Tensor:
        outs = []
        for start in range(0, images.shape[0], batch_size):
            outs.append(self.model(images[start : start + batch_size]))
        return torch.cat(outs, dim=0)

    def evaluate(self, ds: OrdinalDataset) -> list[evaluation.PredictionRecord]:
        images, labels = _to_tensor_stack(ds)
        preds = self.predict_logits(images).argmax(dim=1) + 1
        return [
            evaluation.PredictionRecord(true_label=int(t), predicted_label=int(p))
            for t, p in zip(labels.tolist(), preds.tolist())
        ]

    # ------------------------------------------------------------ checkpoints

    def save_checkpoint(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "backbone": self.backbone_cfg.to_dict(),
            "step": self.step,
            "phase": self.phase,
            "model": self.model.state_dict(),
            "separator": self.separator.state_dict() if self.separator else None,
            "generator": self.generator.state_dict() if self.generator else None,
            "opt_encoder": self.opt_encoder.state_dict(),
            "opt_generator": self.opt_generator.state_dict() if self.opt_generator else None,
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": torch.get_rng_state(),
        }
        torch.save(payload, path)
        return path


def _read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        # archives carry optimizer/rng state dicts, not just tensors
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "version" not in payload:
        raise CheckpointError(f"checkpoint {path} lacks a version field")
    if payload["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload['version']} != supported {CHECKPOINT_VERSION}"
        )
    return payload


def load_checkpoint(path, train_ds: OrdinalDataset, val_ds: OrdinalDataset | None = None) -> Trainer:
    """Rebuild a Trainer from an archive; resumes bit-exactly."""
    payload = _read_checkpoint(path)
    cfg = TrainConfig.from_dict(payload["config"])
    stored = BackboneConfig.from_dict(payload["backbone"])
    derived = _dataset_backbone_config(cfg, train_ds)
    if stored != derived:
        raise CheckpointError(
            f"config mismatch: checkpoint built for {stored}, dataset implies {derived}"
        )
    trainer = Trainer(cfg, train_ds, val_ds)
    trainer.model.load_state_dict(payload["model"])
    if trainer.separator is not None:
        trainer.separator.load_state_dict(payload["separator"])
    if trainer.generator is not None:
        trainer.generator.load_state_dict(payload["generator"])
    trainer.opt_encoder.load_state_dict(payload["opt_encoder"])
    if trainer.opt_generator is not None and payload["opt_generator"] is not None:
        trainer.opt_generator.load_state_dict(payload["opt_generator"])
    trainer.rng = np.random.default_rng()
    trainer.rng.bit_generator.state = copy.deepcopy(payload["numpy_rng"])
    torch.set_rng_state(payload["torch_rng"])
    trainer.step = payload["step"]
    trainer.phase = payload["phase"]
    return trainer


def load_inference_bundle(path):
    """Models only (no dataset needed), for fusion dumps and prediction."""
    payload = _read_checkpoint(path)
    cfg = TrainConfig.from_dict(payload["config"])
    bcfg = BackboneConfig.from_dict(payload["backbone"])
    model = EncoderClassifier(bcfg)
    model.load_state_dict(payload["model"])
    separator = None
    if payload["separator"] is not None:
        separator = FeatureSeparator(cfg.channels, cfg.tau)
        separator.load_state_dict(payload["separator"])
    gen = None
    if payload["generator"] is not None:
        gen = build_generator(cfg.generator_kind, bcfg)
        gen.load_state_dict(payload["generator"])
    return cfg, bcfg, model, separator, gen


def run_training(
    cfg: TrainConfig,
    train_ds: OrdinalDataset,
    val_ds: OrdinalDataset | None = None,
    trace_path=None,
    checkpoint_dir=None,
) -> tuple[Trainer, list[dict]]:
    """Train from scratch under ``cfg``; deterministic given cfg.seed."""
    trainer = Trainer(cfg, train_ds, val_ds)
    trace = trainer.run(trace_path=trace_path, checkpoint_dir=checkpoint_dir)
    return trainer, trace
