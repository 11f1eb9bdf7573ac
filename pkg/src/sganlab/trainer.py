"""Training loops for the four variants, checkpoints and the sampling pipeline.

Randomness is stateless: the crop origins, noise images and network
initialisations for step ``s`` are derived from ``(seed, stream, s)``, so a
run resumed from a checkpoint replays exactly what an uninterrupted run
would have done.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as nnf

from . import netspec as ns
from .dataform import NUM_CLASSES, PatchSpec, SectionStack, patch_offsets
from .labelops import EditPolicy, edit_labels
from .objectives import CycleWeights, LossTerms, cross_entropy_labels, v_dsgan_cycle, v_joint, v_label, v_sgan, v_unsup
from .tabular import TabularGANProblem, TabularRates, TabularResult, train_tabular  # noqa: F401

logger = logging.getLogger(__name__)

VARIANTS = ("unsup", "joint", "sgan", "dsgan")
MAGIC = b"SGANCKPT"
CKPT_VERSION = 1
# fields that may change between a run and its resumption
_RUN_LENGTH_FIELDS = ("epochs", "max_steps", "checkpoint_every")

_STREAM_DATA, _STREAM_NOISE, _STREAM_INIT, _STREAM_SAMPLE, _STREAM_F = 1, 2, 3, 4, 5
_NET_IDS = {"G": 0, "D": 1, "G_y": 2, "D_y": 3, "G_x": 4, "D_x": 5, "F_y": 6}


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class CheckpointError(ValueError):
    pass


def derive_seed(*parts: int) -> int:
    """A 63-bit seed that depends on every part (order-sensitive)."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(2, np.uint64)[0] >> 1)


# -- configuration ------------------------------------------------------------

@dataclass
class TrainConfig:
    variant: str = "sgan"
    epochs: int = 2
    max_steps: int | None = None  # overrides epochs when set
    batch_size: int = 4
    patches_per_epoch: int = 64
    crop: int = 64
    seed: int = 0
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_f: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_reg: float = 10.0
    lambda_cyc: float = 10.0
    label_factor: int = 16
    noise_channels: int = ns.NOISE_CHANNELS
    g_width: int = 32
    x_width: int = 16
    x_levels: int = 3
    d_width: int = 16
    d_layers: int = 2
    f_width: int = 16
    pyramid_factors: tuple = (1, 2, 4)
    pyramid_weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    adversarial_labels: str = "real"  # dsgan: "synthetic" pairs G_x(G_y(z)) with G_y(z)
    reconstructor: str = "cotrain"  # dsgan: cotrain | pretrained (frozen after pre-training)
    f_pretrain_steps: int = 200
    checkpoint_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.pyramid_factors = tuple(int(f) for f in self.pyramid_factors)
        self.pyramid_weights = tuple(float(w) for w in self.pyramid_weights)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("lr_g", "lr_d", "lr_f"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam coefficients must lie in [0, 1)")
        for name in ("epochs", "batch_size", "patches_per_epoch", "crop"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.crop % self.label_factor:
            raise ValueError(f"crop {self.crop} is not a multiple of the label upsample factor {self.label_factor}")
        if self.crop % (2 ** self.x_levels) or self.crop % max(self.pyramid_factors):
            raise ValueError("crop must be divisible by 2**x_levels and the largest pyramid factor")
        if self.adversarial_labels not in ("real", "synthetic"):
            raise ValueError("adversarial_labels must be 'real' or 'synthetic'")
        if self.reconstructor not in ("cotrain", "pretrained"):
            raise ValueError("reconstructor must be 'cotrain' or 'pretrained'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        CycleWeights(self.lambda_reg, self.lambda_cyc)
        ns.PyramidSpec(self.pyramid_factors, self.pyramid_weights)

    @property
    def cycle(self) -> CycleWeights:
        return CycleWeights(self.lambda_reg, self.lambda_cyc)

    @property
    def noise_size(self) -> int:
        return self.crop // self.label_factor

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.patches_per_epoch // self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.max_steps if self.max_steps is not None else self.epochs * self.steps_per_epoch

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pyramid_factors"] = list(self.pyramid_factors)
        d["pyramid_weights"] = list(self.pyramid_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training option(s): {sorted(unknown)}")
        return cls(**d)

    def model_hash(self) -> str:
        """Hash of everything except run length; resuming requires a match."""
        d = {k: v for k, v in self.to_dict().items() if k not in _RUN_LENGTH_FIELDS}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


# -- networks -----------------------------------------------------------------

def _pyramid(cfg):
    return ns.PyramidSpec(cfg.pyramid_factors, cfg.pyramid_weights)


def _disc(cfg, channels):
    return ns.build_discriminator(ns.DiscriminatorSpec(channels, cfg.d_width, cfg.d_layers, _pyramid(cfg)))


def network_builders(cfg: TrainConfig) -> dict:
    """Name -> zero-argument constructor for every network the variant uses."""
    gspec = dict(upsample_factor=cfg.label_factor, base_width=cfg.g_width, noise_channels=cfg.noise_channels)
    if cfg.variant == "unsup":
        return {"G": lambda: ns.build_label_generator(ns.GeneratorSpec(output_channels=1, **gspec)),
                "D": lambda: _disc(cfg, 1)}
    if cfg.variant == "joint":
        return {"G": lambda: ns.build_label_generator(ns.GeneratorSpec(output_channels=4, **gspec)),
                "D": lambda: _disc(cfg, 4)}
    nets = {
        "G_y": lambda: ns.build_label_generator(ns.GeneratorSpec(output_channels=3, **gspec)),
        "D_y": lambda: _disc(cfg, 3),
        "G_x": lambda: ns.build_conditional_generator(ns.GeneratorSpec(
            kind="conditional_image", base_width=cfg.x_width, refinement_levels=cfg.x_levels,
            output_channels=1)),
        "D_x": lambda: _disc(cfg, 4),
    }
    if cfg.variant == "dsgan":
        nets["F_y"] = lambda: ns.Reconstructor(width=cfg.f_width)
    return nets


def build_networks(cfg: TrainConfig) -> dict:
    """Each network is initialised from its own derived seed."""
    nets = {}
    for name, make in network_builders(cfg).items():
        # ids are stable per name, so variants sharing a network share its init
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(derive_seed(cfg.seed, _STREAM_INIT, _NET_IDS[name]))
            nets[name] = make().to(cfg.torch_dtype)
    return nets


def build_optimizers(cfg: TrainConfig, nets: dict) -> dict:
    lr = {"G": cfg.lr_g, "G_y": cfg.lr_g, "G_x": cfg.lr_g, "D": cfg.lr_d, "D_y": cfg.lr_d, "D_x": cfg.lr_d,
          "F_y": cfg.lr_f}
    return {name: torch.optim.Adam(net.parameters(), lr=lr[name], betas=(cfg.beta1, cfg.beta2))
            for name, net in nets.items()}


# -- checkpoints --------------------------------------------------------------

@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    nets: dict
    optimizers: dict = field(default_factory=dict)

    def state_arrays(self) -> dict:
        """Flat name -> float32 array map of parameters and optimizer state."""
        out = {}
        for name, net in self.nets.items():
            for key, t in net.state_dict().items():
                out[f"{name}/{key}"] = t
        for name, opt in self.optimizers.items():
            params = [p for g in opt.param_groups for p in g["params"]]
            for i, p in enumerate(params):
                st = opt.state.get(p, {})
                for key in ("step", "exp_avg", "exp_avg_sq"):
                    if key in st:
                        out[f"opt/{name}/{i}/{key}"] = st[key]
        return {k: v.detach().cpu().numpy().astype("<f4") for k, v in out.items()}

    def save(self, path) -> str:
        path = Path(path)
        arrays = self.state_arrays()
        cfg_json = json.dumps(self.config.to_dict(), sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", CKPT_VERSION))
            fh.write(bytes.fromhex(self.config.model_hash()))
            fh.write(struct.pack("<I", len(cfg_json)))
            fh.write(cfg_json)
            fh.write(struct.pack("<QI", self.step, len(arrays)))
            for name in sorted(arrays):
                arr = arrays[name]
                key = name.encode()
                fh.write(struct.pack("<H", len(key)))
                fh.write(key)
                fh.write(b"<f4")
                fh.write(struct.pack("<B", arr.ndim))
                fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                fh.write(np.ascontiguousarray(arr).tobytes())
        return str(path)

    @classmethod
    def load(cls, path, with_optimizers: bool = True) -> "Checkpoint":
        config, step, arrays = read_checkpoint(path)
        nets = build_networks(config)
        for name, net in nets.items():
            state = {}
            for key, ref in net.state_dict().items():
                full = f"{name}/{key}"
                if full not in arrays:
                    raise CheckpointError(f"checkpoint lacks {full}")
                arr = arrays[full]
                if tuple(arr.shape) != tuple(ref.shape):
                    raise CheckpointError(f"{full}: shape {arr.shape} != {tuple(ref.shape)}")
                state[key] = torch.as_tensor(arr.copy()).to(ref.dtype)
            net.load_state_dict(state)
        opts = build_optimizers(config, nets) if with_optimizers else {}
        for name, opt in opts.items():
            params = [p for g in opt.param_groups for p in g["params"]]
            for i, p in enumerate(params):
                prefix = f"opt/{name}/{i}/"
                if prefix + "exp_avg" in arrays:
                    opt.state[p] = {
                        "step": torch.tensor(float(arrays[prefix + "step"])),
                        "exp_avg": torch.as_tensor(arrays[prefix + "exp_avg"].copy()).to(p.dtype),
                        "exp_avg_sq": torch.as_tensor(arrays[prefix + "exp_avg_sq"].copy()).to(p.dtype),
                    }
        return cls(config, step, nets, opts)


def read_checkpoint(path) -> tuple[TrainConfig, int, dict]:
    """Parse a checkpoint file into (config, step, name -> array)."""
    path = Path(path)
    if path.is_dir():
        path = path / "final.ckpt"
    if not path.exists() and path.with_suffix(".ckpt").exists():
        path = path.with_suffix(".ckpt")
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = data[pos:pos + 32].hex()
    pos += 32
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    config = TrainConfig.from_dict(json.loads(data[pos:pos + n]))
    pos += n
    if config.model_hash() != digest:
        raise CheckpointError("config hash mismatch: checkpoint is corrupt")
    step, count = struct.unpack_from("<QI", data, pos)
    pos += 12
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + klen].decode()
        pos += klen
        if data[pos:pos + 3] != b"<f4":
            raise CheckpointError(f"{name}: unsupported dtype tag {data[pos:pos + 3]!r}")
        pos += 3
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(data, "<f4", size, pos).reshape(shape)
        pos += 4 * size
    return config, step, arrays


# -- data and noise -----------------------------------------------------------

class StepData:
    """Deterministic per-step minibatches of one-hot labels and images."""

    def __init__(self, cfg: TrainConfig, stack: SectionStack):
        if len(stack) == 0:
            raise ValueError("empty training stack")
        PatchSpec(cfg.crop, 1).validate(stack.shape)
        self.cfg, self.stack = cfg, stack
        self._epoch, self._offsets = None, None

    def epoch_offsets(self, epoch: int) -> np.ndarray:
        if self._epoch != epoch:
            spec = PatchSpec(self.cfg.crop, self.cfg.patches_per_epoch,
                             derive_seed(self.cfg.seed, _STREAM_DATA, epoch))
            self._offsets = patch_offsets(len(self.stack), self.stack.shape, spec)
            self._epoch = epoch
        return self._offsets

    def batch(self, step: int):
        cfg = self.cfg
        spe = cfg.steps_per_epoch
        off = self.epoch_offsets(step // spe)
        i = (step % spe) * cfg.batch_size
        rows = off[i:i + cfg.batch_size]
        s = cfg.crop
        labels = np.stack([self.stack.labels[k, r:r + s, c:c + s] for k, r, c in rows])
        images = np.stack([self.stack.images[k, r:r + s, c:c + s] for k, r, c in rows])
        y = nnf.one_hot(torch.as_tensor(labels, dtype=torch.long), NUM_CLASSES).permute(0, 3, 1, 2)
        x = torch.as_tensor(images)[:, None]
        return x.to(cfg.torch_dtype), y.to(cfg.torch_dtype), rows


def step_noise(cfg: TrainConfig, step: int, batch: int | None = None) -> torch.Tensor:
    gen = torch.Generator().manual_seed(derive_seed(cfg.seed, _STREAM_NOISE, step))
    n = cfg.noise_size
    return ns.make_noise(batch or cfg.batch_size, n, n, cfg.noise_channels, generator=gen, dtype=cfg.torch_dtype)


# -- reports ------------------------------------------------------------------

@dataclass
class TrainReport:
    variant: str
    records: list = field(default_factory=list)
    step_order: list = field(default_factory=list)
    start_step: int = 0
    final_step: int = 0
    elapsed_s: float = 0.0
    checkpoints: list = field(default_factory=list)

    def component_names(self) -> set:
        names = set()
        for r in self.records:
            names |= {k for k in r if k not in ("step", "epoch", "batch")}
        return names

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records if key in r])


def _merge(prefix: str, terms: LossTerms, out: dict) -> None:
    for k, v in terms.record().items():
        if k != "variant":
            out[f"{prefix}/{k}"] = v


def _losses_finite(rec: dict) -> bool:
    return all(math.isfinite(v) for v in rec.values() if isinstance(v, float))


# -- the trainer ----------------------------------------------------------------

STEP_ORDER = {
    "unsup": ["D", "G"],
    "joint": ["D", "G"],
    "sgan": ["D_y+D_x", "G_y+G_x"],
    "dsgan": ["D_y+D_x", "G_y+G_x+F_y"],
}


class Trainer:
    """Holds networks and optimizers and advances one deterministic step at a time."""

    def __init__(self, cfg: TrainConfig, stack: SectionStack, checkpoint: Checkpoint | None = None):
        self.cfg = cfg
        self.data = StepData(cfg, stack)
        if checkpoint is not None:
            if checkpoint.config.model_hash() != cfg.model_hash():
                raise CheckpointError("checkpoint was written with a different model/training config")
            self.nets, self.opts, self.step = checkpoint.nets, checkpoint.optimizers, checkpoint.step
        else:
            self.nets = build_networks(cfg)
            self.opts = build_optimizers(cfg, self.nets)
            self.step = 0
            if cfg.variant == "dsgan" and cfg.reconstructor == "pretrained":
                pretrain_reconstructor(self.nets["F_y"], stack, cfg)
        self.frozen = {"F_y"} if cfg.variant == "dsgan" and cfg.reconstructor == "pretrained" else set()

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.cfg, self.step, self.nets, self.opts)

    def _update(self, names, loss):
        for n in names:
            self.opts[n].zero_grad(set_to_none=True)
        loss.backward()
        for n in names:
            if n in self.frozen:
                continue
            if any(p.grad is not None for p in self.nets[n].parameters()):
                self.opts[n].step()

    def run_step(self) -> dict:
        cfg, n = self.cfg, self.nets
        x, y, rows = self.data.batch(self.step)
        z = step_noise(cfg, self.step)
        rec = {"step": self.step, "epoch": self.step // cfg.steps_per_epoch}
        if cfg.variant in ("unsup", "joint"):
            fn = v_unsup if cfg.variant == "unsup" else v_joint
            real = x if cfg.variant == "unsup" else torch.cat([x, y], dim=1)
            terms = fn(n["D"], n["G"], real, z, part="d")
            self._update(["D"], terms.d_loss)
            g_terms = fn(n["D"], n["G"], real, z, part="g")
            self._update(["G"], g_terms.g_loss)
            terms.g_components = g_terms.g_components
            terms.scales.update(g_terms.scales)
            _merge("gan", terms, rec)
        else:
            ty, tx = v_sgan(n["D_y"], n["G_y"], n["D_x"], n["G_x"], x, y, z, part="d")
            if cfg.variant == "dsgan" and cfg.adversarial_labels == "synthetic":
                tx = v_dsgan_cycle(n["D_x"], n["G_y"], n["G_x"], n["F_y"], CycleWeights(0, 0), x, y, z,
                                   part="d", adversarial_labels="synthetic")
            self._update(["D_y", "D_x"], ty.d_loss + tx.d_loss)
            if cfg.variant == "sgan":
                gy, gx = v_sgan(n["D_y"], n["G_y"], n["D_x"], n["G_x"], x, y, z, part="g")
                self._update(["G_y", "G_x"], gy.g_loss + gx.g_loss)
            else:
                y_hat = n["G_y"](z)
                gy = v_label(n["D_y"], n["G_y"], y, z, part="g", y_hat=y_hat)
                gx = v_dsgan_cycle(n["D_x"], n["G_y"], n["G_x"], n["F_y"], cfg.cycle, x, y, z, part="g",
                                   adversarial_labels=cfg.adversarial_labels, y_hat=y_hat)
                self._update(["G_y", "G_x", "F_y"], gy.g_loss + gx.g_loss)
            ty.g_components, tx.g_components = gy.g_components, gx.g_components
            ty.scales.update(gy.scales)
            tx.scales.update(gx.scales)
            _merge("y", ty, rec)
            _merge("x", tx, rec)
        self.step += 1
        return rec


def _dump_divergence(trainer: Trainer, rec: dict, out_dir) -> str | None:
    if out_dir is None:
        return None
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    norms = {f"{name}/{k}": float(p.detach().double().norm())
             for name, net in trainer.nets.items() for k, p in net.named_parameters()}
    path = out / f"diverged_step{rec['step']}.json"
    path.write_text(json.dumps({"record": rec, "param_norms": norms, "config": trainer.cfg.to_dict()},
                               indent=1, default=str, allow_nan=True))
    return str(path)


def _run(cfg: TrainConfig, stack: SectionStack, out_dir=None, resume=None, log_path=None,
         callback=None) -> tuple[Checkpoint, TrainReport]:
    ckpt = Checkpoint.load(resume) if resume is not None else None
    if ckpt is not None:
        # run length may differ; everything else must match
        if ckpt.config.model_hash() != cfg.model_hash():
            raise CheckpointError("checkpoint was written with a different model/training config")
        ckpt.config = cfg
    trainer = Trainer(cfg, stack, ckpt)
    report = TrainReport(cfg.variant, step_order=STEP_ORDER[cfg.variant], start_step=trainer.step)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = log_path or out / "train_log.jsonl"
    log = open(log_path, "a" if resume is not None else "w") if log_path else None
    t0 = time.perf_counter()
    try:
        while trainer.step < cfg.total_steps:
            rec = trainer.run_step()
            if not _losses_finite(rec):
                dump = _dump_divergence(trainer, rec, out)
                raise TrainingDiverged(f"non-finite loss at step {rec['step']}", dump)
            report.records.append(rec)
            if log:
                log.write(json.dumps(rec, sort_keys=True) + "\n")
            if callback:
                callback(trainer, rec)
            if out is not None and cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                report.checkpoints.append(trainer.checkpoint().save(out / f"ckpt_{trainer.step}.ckpt"))
    finally:
        if log:
            log.close()
    report.final_step = trainer.step
    report.elapsed_s = time.perf_counter() - t0
    final = trainer.checkpoint()
    if out is not None:
        report.checkpoints.append(final.save(out / "final.ckpt"))
    return final, report


def train_decoupled(config: TrainConfig, train_stack: SectionStack, **kw) -> tuple[Checkpoint, TrainReport]:
    """Label GAN and conditional GAN trained side by side, G_x on real labels."""
    if config.variant != "sgan":
        raise ValueError(f"train_decoupled needs variant 'sgan', got {config.variant!r}")
    return _run(config, train_stack, **kw)


def train_dsgan(config: TrainConfig, train_stack: SectionStack, **kw) -> tuple[Checkpoint, TrainReport]:
    """Conditional GAN with reconstruction and cycle terms through F_y."""
    if config.variant != "dsgan":
        raise ValueError(f"train_dsgan needs variant 'dsgan', got {config.variant!r}")
    return _run(config, train_stack, **kw)


def train_variant(config: TrainConfig, train_stack: SectionStack, **kw) -> tuple[Checkpoint, TrainReport]:
    """A single GAN on images alone or on (image, label) stacks."""
    if config.variant not in ("unsup", "joint"):
        raise ValueError(f"train_variant needs variant 'unsup' or 'joint', got {config.variant!r}")
    return _run(config, train_stack, **kw)


def train(config: TrainConfig, train_stack: SectionStack, **kw) -> tuple[Checkpoint, TrainReport]:
    fn = {"sgan": train_decoupled, "dsgan": train_dsgan}.get(config.variant, train_variant)
    return fn(config, train_stack, **kw)


# -- supervised reconstructor -----------------------------------------------------

def pretrain_reconstructor(net: ns.Reconstructor, stack: SectionStack, cfg: TrainConfig,
                           steps: int | None = None, lr: float | None = None) -> ns.Reconstructor:
    """Supervised cross-entropy training of an image -> label network on real pairs."""
    steps = cfg.f_pretrain_steps if steps is None else steps
    rcfg = dataclasses.replace(cfg, seed=derive_seed(cfg.seed, _STREAM_F))
    data = StepData(rcfg, stack)
    opt = torch.optim.Adam(net.parameters(), lr=lr or 1e-3, betas=(0.9, 0.999))
    for s in range(steps):
        x, y, _ = data.batch(s)
        opt.zero_grad(set_to_none=True)
        loss = cross_entropy_labels(y, net(x))
        loss.backward()
        opt.step()
    return net


def train_reconstructor(stack: SectionStack, steps: int = 400, crop: int = 64, batch_size: int = 4,
                        width: int = 16, seed: int = 0, lr: float = 1e-3) -> ns.Reconstructor:
    """A stand-alone segmenter, e.g. to score generated pairs independently of any GAN."""
    cfg = TrainConfig(variant="sgan", crop=crop, batch_size=batch_size, seed=seed, f_width=width,
                      patches_per_epoch=max(batch_size, 64))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(derive_seed(seed, _STREAM_INIT, 99))
        net = ns.Reconstructor(width=width)
    return pretrain_reconstructor(net, stack, cfg, steps=steps, lr=lr)


# -- sampling ---------------------------------------------------------------------

def _hard_to_onehot(label: np.ndarray, dtype) -> torch.Tensor:
    return nnf.one_hot(torch.as_tensor(label, dtype=torch.long), NUM_CLASSES).permute(2, 0, 1)[None].to(dtype)


def sample_pipeline(checkpoint, noise_size, count: int, seed: int = 0,
                    edit: EditPolicy | bool | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """z -> hard label -> image pairs; ``edit`` cleans labels before rendering.

    ``noise_size`` is an int or (h, w); outputs are ``noise_size * label_factor``
    pixels.  Joint checkpoints split the 4-channel sample instead.
    """
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else Checkpoint.load(checkpoint, with_optimizers=False)
    cfg = ckpt.config
    h, w = (noise_size, noise_size) if np.isscalar(noise_size) else tuple(noise_size)
    policy = EditPolicy() if edit is True else (edit or None)
    joint = cfg.variant == "joint"
    if not joint and not {"G_y", "G_x"} <= set(ckpt.nets):
        raise CheckpointError(f"checkpoint of variant {cfg.variant!r} lacks G_y/G_x")
    out = []
    with torch.no_grad():
        for i in range(count):
            gen = torch.Generator().manual_seed(derive_seed(seed, _STREAM_SAMPLE, i))
            z = ns.make_noise(1, h, w, cfg.noise_channels, generator=gen, dtype=cfg.torch_dtype)
            if joint:
                sample = ckpt.nets["G"](z)[0]
                label = sample[1:].argmax(0).numpy().astype(np.uint8)
                if policy is not None:
                    label = edit_labels(label, policy)
                image = sample[0].numpy()
            else:
                label = ckpt.nets["G_y"](z)[0].argmax(0).numpy().astype(np.uint8)
                if policy is not None:
                    label = edit_labels(label, policy)
                image = ckpt.nets["G_x"](_hard_to_onehot(label, cfg.torch_dtype))[0, 0].numpy()
            out.append((label, image.astype(np.float32)))
    return out


def render_labels(checkpoint: Checkpoint, labels, batch: int = 8) -> list[np.ndarray]:
    """Run G_x on given hard labels."""
    g_x = checkpoint.nets["G_x"]
    out = []
    with torch.no_grad():
        for i in range(0, len(labels), batch):
            y = torch.cat([_hard_to_onehot(l, checkpoint.config.torch_dtype) for l in labels[i:i + batch]])
            out.extend(g_x(y)[:, 0].numpy())
    return out


def write_tabular_report(result: TabularResult, path) -> str:
    payload = {"converged": result.converged, "residuals": result.residuals(), "steps": result.steps,
               "q_y": result.q_y.tolist(), "q_x_given_y": result.q_x_given_y.tolist(),
               "D_y": result.D_y.tolist(), "D_xy": result.D_xy.tolist(),
               "value_y": result.value_y, "value_x": result.value_x}
    Path(path).write_text(json.dumps(payload, indent=1))
    return os.fspath(path)
