"""CycleGAN translation between scanner domains, the DCGAN label synthesizer and helpers."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DivergenceError, ScheduleError, ShapeError, UnlabeledRecord
from .imaging import (SLICE_SIZE, DatasetManifest, SliceRecord, TranslationMode, decode_label_image,
                      encode_label_image)
from .nncore import (AdamConfig, ParamSet, adam_step, conv2d, conv2d_transpose, conv_param, gaussian_init,
                     grads_for,
                     instance_norm, leaky_relu, relu, resnet_block, resnet_block_params, save_checkpoint)

N_DOWN = 3
N_RESNET = 3
POOL_CAPACITY = 8

# ---------------------------------------------------------------------------
# generator

def tconv_param(params: dict, name: str, cin: int, cout: int, k: int, generator, dtype=torch.float32):
    """Transposed-conv weights, stored as the adjoint forward kernel (cin, cout, k, k)."""
    params[name + ".w"] = gaussian_init((cin, cout, k, k), generator, dtype=dtype)
    params[name + ".b"] = torch.zeros(cout, dtype=dtype)


def generator_params(ngf: int = 8, seed: int = 0, dtype=torch.float32) -> ParamSet:
    g = torch.Generator().manual_seed(seed)
    p = {}
    conv_param(p, "stem", ngf, 1, 7, g, dtype)
    ch = ngf
    for i in range(N_DOWN):
        conv_param(p, f"down{i}", ch * 2, ch, 3, g, dtype)
        ch *= 2
    for i in range(N_RESNET):
        resnet_block_params(p, f"res{i}.", ch, g, dtype)
    for i in range(N_DOWN):
        tconv_param(p, f"up{i}", ch, ch // 2, 4, g, dtype)
        ch //= 2
    conv_param(p, "out", 1, ch, 7, g, dtype)
    return ParamSet(p)


def generator_param_count(ngf: int) -> int:
    """Closed-form parameter count of :func:`generator_params`."""
    total = 49 * ngf + ngf
    ch = ngf
    for _ in range(N_DOWN):
        total += 9 * ch * 2 * ch + 2 * ch
        ch *= 2
    total += N_RESNET * 2 * (9 * ch * ch + ch)
    for _ in range(N_DOWN):
        total += 16 * ch * (ch // 2) + ch // 2
        ch //= 2
    return total + 49 * ch + 1


def _reflect_conv(x, p, name, pad):
    return conv2d(F.pad(x, (pad,) * 4, mode="reflect"), p[name + ".w"], bias=p[name + ".b"])


def generator_forward(g, x: torch.Tensor, strict: bool = True) -> torch.Tensor:
    """Translate an (n, 1, 256, 256) batch with values in [0, 1]; output is in [0, 1]."""
    p = g.params if isinstance(g, ParamSet) else g
    if x.dim() != 4 or x.shape[1] != 1:
        raise ShapeError(f"generator expects (n, 1, H, W), got {tuple(x.shape)}", dim="input")
    if strict and tuple(x.shape[2:]) != (SLICE_SIZE, SLICE_SIZE):
        raise ShapeError(f"generator expects {SLICE_SIZE}x{SLICE_SIZE} rasters, got {tuple(x.shape[2:])}",
                         dim="spatial")
    h = relu(instance_norm(_reflect_conv(x * 2.0 - 1.0, p, "stem", 3)))
    for i in range(N_DOWN):
        h = relu(instance_norm(conv2d(h, p[f"down{i}.w"], stride=2, padding=1, bias=p[f"down{i}.b"])))
    for i in range(N_RESNET):
        h = resnet_block(h, p, f"res{i}.")
    for i in range(N_DOWN):
        h = relu(instance_norm(conv2d_transpose(h, p[f"up{i}.w"], stride=2, padding=1, bias=p[f"up{i}.b"])))
    out = torch.tanh(_reflect_conv(h, p, "out", 3))
    return (out + 1.0) / 2.0


# ---------------------------------------------------------------------------
# discriminator (70x70 PatchGAN)

_D_STRIDES = (2, 2, 2, 1, 1)


def discriminator_params(ndf: int = 8, seed: int = 0, dtype=torch.float32) -> ParamSet:
    g = torch.Generator().manual_seed(seed)
    p = {}
    chans = [1, ndf, ndf * 2, ndf * 4, ndf * 8, 1]
    for i in range(len(_D_STRIDES)):
        conv_param(p, f"d{i}", chans[i + 1], chans[i], 4, g, dtype)
    return ParamSet(p)


def discriminator_forward(d, x: torch.Tensor) -> torch.Tensor:
    """Patch score map; raw scores (no output nonlinearity)."""
    p = d.params if isinstance(d, ParamSet) else d
    h = x * 2.0 - 1.0
    last = len(_D_STRIDES) - 1
    for i, stride in enumerate(_D_STRIDES):
        h = conv2d(h, p[f"d{i}.w"], stride=stride, padding=1, bias=p[f"d{i}.b"])
        if i == last:
            break
        if i > 0:
            h = instance_norm(h)
        h = leaky_relu(h, 0.2)
    return h


# ---------------------------------------------------------------------------
# losses

def adversarial_loss(d_real: torch.Tensor, d_fake: torch.Tensor, mode: str = "lsgan"):
    """Returns ``(g_loss, d_loss)``. ``lsgan`` is least squares; ``log`` uses logits with the
    non-saturating generator objective."""
    if d_real.shape != d_fake.shape:
        raise ShapeError("real and fake score maps differ in shape", dim="scores")
    if mode == "lsgan":
        d_loss = torch.mean((d_real - 1.0) ** 2) + torch.mean(d_fake ** 2)
        g_loss = torch.mean((d_fake - 1.0) ** 2)
    elif mode == "log":
        d_loss = torch.mean(F.softplus(-d_real)) + torch.mean(F.softplus(d_fake))
        g_loss = torch.mean(F.softplus(-d_fake))
    else:
        raise ValueError(f"unknown adversarial loss {mode!r}")
    return g_loss, d_loss


def generator_gan_loss(d_fake: torch.Tensor, mode: str = "lsgan") -> torch.Tensor:
    if mode == "lsgan":
        return torch.mean((d_fake - 1.0) ** 2)
    if mode == "log":
        return torch.mean(F.softplus(-d_fake))
    raise ValueError(f"unknown adversarial loss {mode!r}")


def cycle_loss(g_ab: Callable, g_ba: Callable, x: torch.Tensor) -> torch.Tensor:
    return torch.mean(torch.abs(g_ba(g_ab(x)) - x))


@dataclass
class LossBreakdown:
    gan_s2t: torch.Tensor
    gan_t2s: torch.Tensor
    cycle_s: torch.Tensor
    cycle_t: torch.Tensor
    weights: tuple
    total: torch.Tensor
    fake_t: torch.Tensor | None = None
    fake_s: torch.Tensor | None = None

    def weighted_terms(self) -> list[float]:
        raw = (self.gan_s2t, self.gan_t2s, self.cycle_s, self.cycle_t)
        return [float(w) * float(t.detach()) for w, t in zip(self.weights, raw)]

    def as_dict(self) -> dict[str, float]:
        names = ("gan_s2t", "gan_t2s", "cycle_s", "cycle_t", "total")
        return {n: float(getattr(self, n).detach()) for n in names}


def total_cycle_objective(gs, ds, batch_s, batch_t, weights=(1.0, 1.0, 10.0, 10.0),
                          mode: str = "lsgan") -> LossBreakdown:
    """Weighted sum of both adversarial terms and both cycle terms.

    ``gs = (G_s2t, G_t2s)`` and ``ds = (D_s, D_t)`` are callables on batches.
    """
    if len(batch_s) == 0 or len(batch_t) == 0:
        raise ValueError("both batches must be non-empty")
    if any(w < 0 for w in weights):
        raise ValueError(f"loss weights must be non-negative, got {weights}")
    g_s2t, g_t2s = gs
    d_s, d_t = ds
    fake_t = g_s2t(batch_s)
    fake_s = g_t2s(batch_t)
    gan_s2t = generator_gan_loss(d_t(fake_t), mode)
    gan_t2s = generator_gan_loss(d_s(fake_s), mode)
    cyc_s = torch.mean(torch.abs(g_t2s(fake_t) - batch_s))
    cyc_t = torch.mean(torch.abs(g_s2t(fake_s) - batch_t))
    l1, l2, l3, l4 = weights
    total = l1 * gan_s2t + l2 * gan_t2s + l3 * cyc_s + l4 * cyc_t
    return LossBreakdown(gan_s2t, gan_t2s, cyc_s, cyc_t, tuple(weights), total, fake_t, fake_s)


# ---------------------------------------------------------------------------
# image history pool

@dataclass
class ImagePool:
    capacity: int = POOL_CAPACITY
    buffer: list = field(default_factory=list)

    def __len__(self):
        return len(self.buffer)


def pool_query(pool: ImagePool, fresh, rng: np.random.Generator):
    """Fill, then with probability 0.5 swap a random stored image for the fresh one."""
    if pool.capacity <= 0:
        return fresh
    if len(pool.buffer) < pool.capacity:
        pool.buffer.append(fresh)
        return fresh
    if rng.random() < 0.5:
        i = int(rng.integers(pool.capacity))
        old = pool.buffer[i]
        pool.buffer[i] = fresh
        return old
    return fresh


def pool_batch(pool: ImagePool, batch: torch.Tensor, rng) -> torch.Tensor:
    return torch.stack([pool_query(pool, img, rng) for img in batch.detach()])


# ---------------------------------------------------------------------------
# training

@dataclass
class CycleTrainConfig:
    epochs: int = 50
    decay_start: int = 25
    lr: float = 0.0002
    batch: int = 4
    weights: tuple = (1.0, 1.0, 10.0, 10.0)
    seed: int = 0
    ngf: int = 8
    ndf: int = 8
    gan_mode: str = "lsgan"
    pool_capacity: int = POOL_CAPACITY
    checkpoint_every: int = 0

    def __post_init__(self):
        self.weights = tuple(float(w) for w in self.weights)
        if not 0 < self.decay_start < self.epochs:
            raise ScheduleError(f"need 0 < decay_start < epochs, got {self.decay_start} and {self.epochs}")
        if any(w < 0 for w in self.weights) or len(self.weights) != 4:
            raise ValueError(f"four non-negative loss weights required, got {self.weights}")
        if self.batch < 1:
            raise ValueError("batch size must be >= 1")
        if self.gan_mode not in ("lsgan", "log"):
            raise ValueError(f"gan_mode must be lsgan or log, got {self.gan_mode!r}")


def lr_schedule(epoch: int, cfg: CycleTrainConfig) -> float:
    """Constant, then linear decay reaching zero at the final epoch (1-based)."""
    if not 1 <= epoch <= cfg.epochs:
        raise ScheduleError(f"epoch {epoch} outside 1..{cfg.epochs}")
    if epoch <= cfg.decay_start:
        return cfg.lr
    return cfg.lr * (cfg.epochs - epoch) / (cfg.epochs - cfg.decay_start)


@dataclass
class TranslationResult:
    g_s2t: ParamSet
    g_t2s: ParamSet
    d_s: ParamSet
    d_t: ParamSet
    history: list
    meta: dict = field(default_factory=dict)

    def checkpoint_sets(self) -> dict[str, ParamSet]:
        return {"g_s2t": self.g_s2t, "g_t2s": self.g_t2s, "d_s": self.d_s, "d_t": self.d_t}


HISTORY_FIELDS = ["epoch", "lr", "gan_s2t", "gan_t2s", "cycle_s", "cycle_t", "total", "d_s", "d_t"]


def write_history(path, history: Sequence[dict], fields=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = fields or list(history[0]) if history else (fields or [])
    with path.open("w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def _stack(records: Sequence[SliceRecord], idx) -> torch.Tensor:
    return torch.from_numpy(np.stack([records[i].image for i in idx]).astype(np.float32))[:, None]


def _epoch_order(n: int, n_batches: int, batch: int, rng) -> np.ndarray:
    need = n_batches * batch
    reps = [rng.permutation(n) for _ in range(math.ceil(need / n))]
    return np.concatenate(reps)[:need]


def _check_finite(values: dict, epoch: int, batch: int):
    bad = {k: v for k, v in values.items() if not math.isfinite(v)}
    if bad:
        raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {batch}: {sorted(bad)}",
                              diagnostics={"epoch": epoch, "batch": batch, **values})


def params_digest(ps: ParamSet) -> str:
    h = hashlib.sha256()
    for name in sorted(ps.params):
        h.update(name.encode())
        h.update(ps.params[name].detach().numpy().tobytes())
    return h.hexdigest()[:16]


def train_translation(cfg: CycleTrainConfig, source: Sequence[SliceRecord], target: Sequence[SliceRecord],
                      out_dir=None, meta: dict | None = None, log: Callable | None = None,
                      mode=None) -> TranslationResult:
    """Unpaired CycleGAN training of source <-> target.

    Only the images of both sets are read. Per batch: joint generator step, then D_s, then D_t
    on pooled fakes.
    """
    source, target = list(source), list(target)
    if not source or not target:
        raise ValueError("source and target sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    g_s2t = generator_params(cfg.ngf, cfg.seed * 4 + 0)
    g_t2s = generator_params(cfg.ngf, cfg.seed * 4 + 1)
    d_s = discriminator_params(cfg.ndf, cfg.seed * 4 + 2)
    d_t = discriminator_params(cfg.ndf, cfg.seed * 4 + 3)
    adam = AdamConfig(lr=cfg.lr, beta1=0.5, beta2=0.999)
    pool_s, pool_t = ImagePool(cfg.pool_capacity), ImagePool(cfg.pool_capacity)
    n_batches = math.ceil(max(len(source), len(target)) / cfg.batch)
    meta = {"kind": "cyclegan", "config": asdict(cfg), **(meta or {})}
    if mode is not None:
        meta["mode"] = TranslationMode.parse(mode).value
    history = []
    out_dir = Path(out_dir) if out_dir is not None else None

    for epoch in range(1, cfg.epochs + 1):
        lr = lr_schedule(epoch, cfg)
        order_s = _epoch_order(len(source), n_batches, cfg.batch, rng)
        order_t = _epoch_order(len(target), n_batches, cfg.batch, rng)
        sums = dict.fromkeys(HISTORY_FIELDS[2:], 0.0)
        for b in range(n_batches):
            sl = slice(b * cfg.batch, (b + 1) * cfg.batch)
            real_s, real_t = _stack(source, order_s[sl]), _stack(target, order_t[sl])

            gs = g_s2t.trainable(), g_t2s.trainable()
            dsf, dtf = d_s.frozen(), d_t.frozen()
            br = total_cycle_objective(
                (lambda x: generator_forward(gs[0], x), lambda x: generator_forward(gs[1], x)),
                (lambda x: discriminator_forward(dsf, x), lambda x: discriminator_forward(dtf, x)),
                real_s, real_t, cfg.weights, cfg.gan_mode)
            names = [("a", n) for n in gs[0].names()] + [("b", n) for n in gs[1].names()]
            grads = torch.autograd.grad(br.total, [gs[0][n] if k == "a" else gs[1][n] for k, n in names])
            ga = {n: gr for (k, n), gr in zip(names, grads) if k == "a"}
            gb = {n: gr for (k, n), gr in zip(names, grads) if k == "b"}
            g_s2t, g_t2s = adam_step(gs[0], ga, adam, lr), adam_step(gs[1], gb, adam, lr)

            # discriminators see the fakes produced in this batch's generator pass
            fake_t, fake_s = br.fake_t.detach(), br.fake_s.detach()
            d_losses = {}
            for key, d, real, fake, pool in (("d_s", d_s, real_s, fake_s, pool_s),
                                             ("d_t", d_t, real_t, fake_t, pool_t)):
                dp = d.trainable()
                pooled = pool_batch(pool, fake, rng)
                _, dl = adversarial_loss(discriminator_forward(dp, real), discriminator_forward(dp, pooled),
                                         cfg.gan_mode)
                dl = 0.5 * dl
                new = adam_step(dp, grads_for(dl, dp), adam, lr)
                if key == "d_s":
                    d_s = new
                else:
                    d_t = new
                d_losses[key] = float(dl.detach())

            values = {**br.as_dict(), **d_losses}
            _check_finite(values, epoch, b)
            for k in sums:
                sums[k] += values[k]
        row = {"epoch": epoch, "lr": lr, **{k: v / n_batches for k, v in sums.items()}}
        history.append(row)
        if log:
            log(f"epoch {epoch}/{cfg.epochs} lr={lr:.2e} cycle_s={row['cycle_s']:.4f} "
                f"cycle_t={row['cycle_t']:.4f} total={row['total']:.4f}")
        result = TranslationResult(g_s2t, g_t2s, d_s, d_t, history, meta)
        if out_dir is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch_{epoch:03d}.dsfg", result.checkpoint_sets(), {**meta, "epoch": epoch})

    result = TranslationResult(g_s2t, g_t2s, d_s, d_t, history,
                               {**meta, "generator_id": params_digest(g_s2t)})
    if out_dir is not None:
        save_checkpoint(out_dir / "final.dsfg", result.checkpoint_sets(), {**result.meta, "epoch": cfg.epochs})
        write_history(out_dir / "history.csv", history, HISTORY_FIELDS)
    return result


@torch.no_grad()
def translate_images(g, images: np.ndarray, batch: int = 8) -> np.ndarray:
    images = np.asarray(images, dtype=np.float32)
    out = []
    for i in range(0, len(images), batch):
        x = torch.from_numpy(images[i:i + batch])[:, None]
        out.append(generator_forward(g, x)[:, 0].numpy())
    return np.concatenate(out) if out else np.zeros((0, SLICE_SIZE, SLICE_SIZE), np.float32)


def generate_synthetic(g_s2t, source: Sequence[SliceRecord], mode, generator_id: str = "",
                       dataset: str = "SYN", vendor: str | None = None) -> DatasetManifest:
    """Translate every source record and pair the output with that record's label."""
    mode = TranslationMode.parse(mode)
    source = list(source.records() if isinstance(source, DatasetManifest) else source)
    for r in source:
        if not r.has_label:
            raise UnlabeledRecord(f"{r.domain}/{r.subject}/{r.slice_index} has no label to carry over")
    labels = [r.training_label() for r in source]
    images = translate_images(g_s2t, np.stack([r.image for r in source])) if source else []
    out = []
    for r, img, lab in zip(source, images, labels):
        prov = {"mode": mode.value, "generator": generator_id, "source_domain": r.domain,
                "source_subject": r.subject}
        out.append(SliceRecord(np.clip(img, 0.0, 1.0).astype(np.float32), lab.copy(), dataset,
                               vendor or r.vendor, r.subject, r.slice_index, r.original_shape, False, prov))
    return DatasetManifest.from_records(out)


# ---------------------------------------------------------------------------
# DCGAN label synthesizer

@dataclass
class DcganConfig:
    latent: int = 100
    epochs: int = 25
    lr: float = 0.0002
    batch: int = 16
    output_size: int = 64
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        n = self.output_size
        if n < 8 or n & (n - 1):
            raise ValueError(f"output size must be a power of two >= 8, got {n}")
        if self.latent < 1 or self.batch < 1 or self.epochs < 1:
            raise ValueError("latent, batch and epochs must be >= 1")

    @property
    def blocks(self) -> int:
        return int(math.log2(self.output_size)) - 2


def dcgan_generator_params(cfg: DcganConfig, dtype=torch.float32) -> ParamSet:
    g = torch.Generator().manual_seed(cfg.seed * 2)
    p = {}
    ch = cfg.width * 2 ** (cfg.blocks - 1)
    tconv_param(p, "proj", cfg.latent, ch, 4, g, dtype)
    for i in range(cfg.blocks):
        cout = 1 if i == cfg.blocks - 1 else ch // 2
        tconv_param(p, f"up{i}", ch, cout, 4, g, dtype)
        ch = cout
    return ParamSet(p)


def dcgan_discriminator_params(cfg: DcganConfig, dtype=torch.float32) -> ParamSet:
    g = torch.Generator().manual_seed(cfg.seed * 2 + 1)
    p = {}
    cin, ch = 1, cfg.width
    for i in range(cfg.blocks):
        conv_param(p, f"d{i}", ch, cin, 4, g, dtype)
        cin, ch = ch, ch * 2
    conv_param(p, "score", 1, cin, 4, g, dtype)
    return ParamSet(p)


def dcgan_generate(p, z: torch.Tensor) -> torch.Tensor:
    """Latent (n, latent) -> (n, 1, S, S) rasters in [0, 1]."""
    p = p.params if isinstance(p, ParamSet) else p
    blocks = sum(1 for k in p if k.startswith("up") and k.endswith(".w"))
    h = conv2d_transpose(z[:, :, None, None], p["proj.w"], stride=1, padding=0, bias=p["proj.b"])
    h = relu(instance_norm(h))
    for i in range(blocks):
        h = conv2d_transpose(h, p[f"up{i}.w"], stride=2, padding=1, bias=p[f"up{i}.b"])
        h = torch.sigmoid(h) if i == blocks - 1 else relu(instance_norm(h))
    return h


def dcgan_discriminate(p, x: torch.Tensor) -> torch.Tensor:
    p = p.params if isinstance(p, ParamSet) else p
    blocks = sum(1 for k in p if k.startswith("d") and k.endswith(".w"))
    h = x * 2.0 - 1.0
    for i in range(blocks):
        h = conv2d(h, p[f"d{i}.w"], stride=2, padding=1, bias=p[f"d{i}.b"])
        h = leaky_relu(instance_norm(h) if i > 0 else h, 0.2)
    return conv2d(h, p["score.w"], bias=p["score.b"]).flatten(1).mean(dim=1)


@dataclass
class DcganResult:
    generator: ParamSet
    discriminator: ParamSet
    history: list
    config: DcganConfig


def _label_rasters(labels: Sequence[SliceRecord], size: int) -> torch.Tensor:
    step = SLICE_SIZE // size
    rasters = [encode_label_image(r.training_label())[step // 2::step, step // 2::step] for r in labels]
    return torch.from_numpy(np.stack(rasters).astype(np.float32))[:, None]


def dcgan_train(labels, cfg: DcganConfig, out_dir=None, log: Callable | None = None) -> DcganResult:
    """Fit a DCGAN to encoded label rasters (log loss, Adam beta1 0.5)."""
    records = list(labels.records() if isinstance(labels, DatasetManifest) else labels)
    if not records:
        raise ValueError("DCGAN needs at least one label image")
    data = _label_rasters(records, cfg.output_size)
    rng = np.random.default_rng(cfg.seed)
    tg = torch.Generator().manual_seed(cfg.seed)
    gen, disc = dcgan_generator_params(cfg), dcgan_discriminator_params(cfg)
    adam = AdamConfig(lr=cfg.lr, beta1=0.5, beta2=0.999)
    n_batches = math.ceil(len(data) / cfg.batch)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(data))
        g_sum = d_sum = 0.0
        for b in range(n_batches):
            real = data[order[b * cfg.batch:(b + 1) * cfg.batch]]
            z = torch.randn(len(real), cfg.latent, generator=tg)
            dp = disc.trainable()
            with torch.no_grad():
                fake = dcgan_generate(gen, z)
            _, dl = adversarial_loss(dcgan_discriminate(dp, real), dcgan_discriminate(dp, fake), "log")
            disc = adam_step(dp, grads_for(dl, dp), adam)
            gp = gen.trainable()
            gl = generator_gan_loss(dcgan_discriminate(disc.frozen(), dcgan_generate(gp, z)), "log")
            gen = adam_step(gp, grads_for(gl, gp), adam)
            gl, dl = float(gl.detach()), float(dl.detach())
            _check_finite({"g": gl, "d": dl}, epoch, b)
            g_sum += gl
            d_sum += dl
        history.append({"epoch": epoch, "g_loss": g_sum / n_batches, "d_loss": d_sum / n_batches})
        if log:
            log(f"dcgan epoch {epoch}/{cfg.epochs} g={history[-1]['g_loss']:.4f} d={history[-1]['d_loss']:.4f}")
    result = DcganResult(gen, disc, history, cfg)
    if out_dir is not None:
        out_dir = Path(out_dir)
        save_checkpoint(out_dir / "final.dsfg", {"dcgan_g": gen, "dcgan_d": disc},
                        {"kind": "dcgan", "config": asdict(cfg)})
        write_history(out_dir / "history.csv", history)
    return result


@torch.no_grad()
def dcgan_sample(gen, n: int, seed: int = 0, latent: int | None = None, dataset: str = "DCGAN",
                 vendor: str = "synthetic", batch: int = 64) -> DatasetManifest:
    """Sample ``n`` label rasters, upsample to 256x256 (nearest) and quantize to the tri-level code."""
    p = gen.params if isinstance(gen, ParamSet) else gen
    latent = latent or p["proj.w"].shape[0]
    tg = torch.Generator().manual_seed(seed)
    gid = params_digest(gen if isinstance(gen, ParamSet) else ParamSet(dict(p)))
    records = []
    for start in range(0, n, batch):
        z = torch.randn(min(batch, n - start), latent, generator=tg)
        raw = dcgan_generate(p, z)[:, 0].numpy()
        factor = SLICE_SIZE // raw.shape[-1]
        for j, img in enumerate(raw):
            label = decode_label_image(np.kron(img, np.ones((factor, factor), np.float32)))
            i = start + j
            records.append(SliceRecord(encode_label_image(label), label, dataset, vendor, f"dcgan-{i:05d}", 0,
                                       (SLICE_SIZE, SLICE_SIZE), False,
                                       {"generator": gid, "sample": i, "encoded_label": True}))
    return DatasetManifest.from_records(records)


def relabel(manifest: DatasetManifest, dataset: str, vendor: str) -> DatasetManifest:
    return DatasetManifest.from_records([replace(r, dataset=dataset, vendor=vendor) for r in manifest.records()])
