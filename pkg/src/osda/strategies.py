"""The three ways to consume the extracted negative set.

All providers expose `next_batch(batch_size) -> tensor` and replay exactly
under a fixed seed: original pass-through sampling, randomly augmented
sampling (images only), and sampling from a generator trained adversarially
against both a discriminator and the frozen classifier.
"""

import copy
import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.transforms import InterpolationMode
from torchvision.transforms import functional as TF

from .losses import check_finite, gen_agreement, gen_entropy

log = logging.getLogger(__name__)


def _child_seeds(seed, n):
    return [int(s) for s in
            np.random.SeedSequence(seed).generate_state(n, np.uint32)]


def _sample_indices(n, batch_size, generator):
    return torch.randint(n, (batch_size,), generator=generator)


class OriginalProvider:
    """Uniform with-replacement sampling of the pristine negatives."""

    def __init__(self, negs, seed=0):
        if len(negs) == 0:
            raise ValueError("cannot build a provider from an empty "
                             "negative set")
        self.data = negs.data
        self.rng = torch.Generator().manual_seed(seed)

    def next_batch(self, batch_size):
        idx = _sample_indices(self.data.shape[0], batch_size, self.rng)
        return self.data[idx]


@dataclass
class AugmentConfig:
    """Random affine + Gaussian blur applied per drawn sample."""

    rotation_range: float = 15.0   # degrees, sampled in +/- range
    translate_fraction: float = 0.10
    scale_range: tuple = (0.9, 1.1)
    shear_range: float = 5.0       # degrees
    blur_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ValueError("scale_range must satisfy 0 < lo <= hi")
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")


class AugmentProvider:
    """Pristine negatives perturbed by an independently sampled affine
    transform and a mild Gaussian blur; output re-clamped to [0,1]."""

    def __init__(self, negs, cfg):
        if len(negs) == 0:
            raise ValueError("cannot build a provider from an empty "
                             "negative set")
        if negs.data.ndim != 4:
            raise ValueError(
                "augmentation needs image-shaped (C,H,W) negatives, got "
                "sample shape %s; use the original or generation strategy "
                "for vector data" % (tuple(negs.data.shape[1:]),))
        self.data = negs.data
        self.cfg = cfg
        self.rng = torch.Generator().manual_seed(cfg.seed)
        sigma = cfg.blur_sigma
        self.kernel_size = 2 * int(np.ceil(3 * sigma)) + 1 if sigma > 0 else 0

    def _draw(self, lo, hi):
        return lo + (hi - lo) * float(torch.rand(1, generator=self.rng))

    def _transform(self, img):
        cfg = self.cfg
        h, w = img.shape[-2:]
        angle = self._draw(-cfg.rotation_range, cfg.rotation_range)
        tx = self._draw(-cfg.translate_fraction, cfg.translate_fraction) * w
        ty = self._draw(-cfg.translate_fraction, cfg.translate_fraction) * h
        scale = self._draw(*cfg.scale_range)
        shear = self._draw(-cfg.shear_range, cfg.shear_range)
        identity = (angle == 0 and tx == 0 and ty == 0 and scale == 1
                    and shear == 0)
        if not identity:
            img = TF.affine(img, angle=angle, translate=[tx, ty],
                            scale=scale, shear=[shear, 0.0],
                            interpolation=InterpolationMode.BILINEAR)
        if cfg.blur_sigma > 0:
            img = TF.gaussian_blur(img, self.kernel_size,
                                   [cfg.blur_sigma, cfg.blur_sigma])
        return img.clamp(0.0, 1.0)

    def next_batch(self, batch_size):
        idx = _sample_indices(self.data.shape[0], batch_size, self.rng)
        return torch.stack([self._transform(self.data[i]) for i in idx])


class MlpGenerator(nn.Module):
    """Two-hidden-layer generator; sigmoid output for image-shaped data
    (range [0,1]), linear output for unbounded vector data."""

    def __init__(self, latent_dim, sample_shape, hidden=128):
        super().__init__()
        self.latent_dim = latent_dim
        self.sample_shape = tuple(sample_shape)
        out = int(np.prod(sample_shape))
        self.bounded = len(self.sample_shape) == 3
        self.net = nn.Sequential(
            nn.Linear(latent_dim, hidden), nn.ReLU(),
            nn.Linear(hidden, hidden), nn.ReLU(),
            nn.Linear(hidden, out))

    def forward(self, z):
        x = self.net(z)
        if self.bounded:
            x = torch.sigmoid(x)
        return x.view(-1, *self.sample_shape)


class MlpDiscriminator(nn.Module):
    def __init__(self, sample_shape, hidden=128):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(int(np.prod(sample_shape)), hidden),
            nn.LeakyReLU(0.2),
            nn.Linear(hidden, hidden), nn.LeakyReLU(0.2),
            nn.Linear(hidden, 1))

    def forward(self, x):
        return self.net(x.flatten(1)).squeeze(1)


class ConvGenerator(nn.Module):
    """Transposed-convolution generator for 32x32 or 64x64 images."""

    def __init__(self, latent_dim, sample_shape, width=64):
        super().__init__()
        channels, side, _ = sample_shape
        n_up = int(np.log2(side // 4))
        self.latent_dim = latent_dim
        self.sample_shape = tuple(sample_shape)
        feat = width * 2 ** (n_up - 1)
        layers = [nn.ConvTranspose2d(latent_dim, feat, 4, 1, 0, bias=False),
                  nn.BatchNorm2d(feat), nn.ReLU(True)]
        for _ in range(n_up - 1):
            layers += [nn.ConvTranspose2d(feat, feat // 2, 4, 2, 1,
                                          bias=False),
                       nn.BatchNorm2d(feat // 2), nn.ReLU(True)]
            feat //= 2
        layers += [nn.ConvTranspose2d(feat, channels, 4, 2, 1, bias=False),
                   nn.Sigmoid()]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z.view(-1, self.latent_dim, 1, 1))


class ConvDiscriminator(nn.Module):
    def __init__(self, sample_shape, width=64):
        super().__init__()
        channels, side, _ = sample_shape
        n_down = int(np.log2(side // 4))
        layers = [nn.Conv2d(channels, width, 4, 2, 1, bias=False),
                  nn.LeakyReLU(0.2, inplace=True)]
        feat = width
        for _ in range(n_down - 1):
            layers += [nn.Conv2d(feat, feat * 2, 4, 2, 1, bias=False),
                       nn.BatchNorm2d(feat * 2),
                       nn.LeakyReLU(0.2, inplace=True)]
            feat *= 2
        layers += [nn.Conv2d(feat, 1, 4, 1, 0, bias=False)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).view(-1)


def _conv_capable(sample_shape):
    return (len(sample_shape) == 3 and sample_shape[1] == sample_shape[2]
            and sample_shape[1] in (32, 64))


def build_gan_nets(sample_shape, latent_dim):
    if _conv_capable(sample_shape):
        return (ConvGenerator(latent_dim, sample_shape),
                ConvDiscriminator(sample_shape), "conv")
    return (MlpGenerator(latent_dim, sample_shape),
            MlpDiscriminator(sample_shape), "mlp")


@dataclass
class GanConfig:
    iterations: int = 1000
    batch_size: int = 36
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    w_gen_ent: float = 1.0
    w_gen_agree: float = 1.0
    latent_dim: int = 64
    seed: int = 0


@dataclass
class GanState:
    generator: nn.Module
    discriminator: nn.Module
    latent_dim: int
    sample_shape: tuple
    arch: str
    history: list = field(default_factory=list)


class GanDivergenceError(RuntimeError):
    """Raised when a GAN loss goes non-finite; carries the last finite
    parameter state so the caller can checkpoint it."""

    def __init__(self, message, last_state):
        super().__init__(message)
        self.last_state = last_state


def gan_train(negs, frozen_model, cfg):
    """Adversarial training on the negative set with classifier penalties.

    Discriminator: binary cross-entropy, real negatives labeled 1 and
    generated samples labeled 0.  Generator: fool the discriminator plus
    weighted entropy/agreement penalties computed through the frozen
    classifier, which receives no parameter updates.
    """
    if len(negs) == 0:
        raise ValueError("gan_train needs a non-empty negative set")
    if len(negs) < cfg.batch_size:
        log.warning("negative set (%d) smaller than gan batch size (%d); "
                    "sampling with replacement", len(negs), cfg.batch_size)

    frozen = copy.deepcopy(frozen_model).eval()
    for p in frozen.parameters():
        p.requires_grad_(False)

    init_seed, latent_seed, data_seed = _child_seeds(cfg.seed, 3)
    torch.manual_seed(init_seed)
    sample_shape = tuple(negs.data.shape[1:])
    gen, disc, arch = build_gan_nets(sample_shape, cfg.latent_dim)
    g_latent = torch.Generator().manual_seed(latent_seed)
    g_data = torch.Generator().manual_seed(data_seed)
    opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_g,
                             betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_d,
                             betas=(0.5, 0.999))
    bce = nn.BCEWithLogitsLoss()

    state = GanState(gen, disc, cfg.latent_dim, sample_shape, arch)
    last_good = None
    for it in range(cfg.iterations):
        real = negs.data[_sample_indices(len(negs), cfg.batch_size, g_data)]
        z = torch.randn(cfg.batch_size, cfg.latent_dim, generator=g_latent)
        fake = gen(z)

        d_real = disc(real)
        d_fake = disc(fake.detach())
        d_loss = (bce(d_real, torch.ones_like(d_real))
                  + bce(d_fake, torch.zeros_like(d_fake)))
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        g_logits = disc(fake)
        g_adv = bce(g_logits, torch.ones_like(g_logits))
        feats = frozen.features(fake)
        ent = gen_entropy(frozen.closed_probs(feats))
        agree = gen_agreement(frozen.open_known_probs(feats))
        g_loss = g_adv + cfg.w_gen_ent * ent + cfg.w_gen_agree * agree
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        row = {"iter": it,
               "d_loss": float(d_loss),
               "g_adv": float(g_adv),
               "gen_ent": cfg.w_gen_ent * float(ent),
               "gen_agree": cfg.w_gen_agree * float(agree),
               "d_fake_prob": float(torch.sigmoid(d_fake).mean())}
        values = torch.tensor([row["d_loss"], row["g_adv"], row["gen_ent"],
                               row["gen_agree"]])
        if not torch.isfinite(values).all():
            raise GanDivergenceError(
                "gan training diverged at iteration %d" % it, last_good)
        state.history.append(row)
        last_good = {"generator": copy.deepcopy(gen.state_dict()),
                     "discriminator": copy.deepcopy(disc.state_dict()),
                     "iteration": it}
    return state


class GenerationProvider:
    """Negative batches sampled from a trained generator; optionally mixes
    in a fraction of pristine negatives."""

    def __init__(self, gan, seed=0, pristine=None, mix_pristine=0.0):
        if mix_pristine > 0 and (pristine is None or len(pristine) == 0):
            raise ValueError("mix_pristine > 0 requires pristine negatives")
        self.gan = gan
        self.rng = torch.Generator().manual_seed(seed)
        self.pristine = pristine.data if pristine is not None else None
        self.mix_pristine = mix_pristine

    def next_batch(self, batch_size):
        n_pristine = int(round(self.mix_pristine * batch_size))
        z = torch.randn(batch_size - n_pristine, self.gan.latent_dim,
                        generator=self.rng)
        with torch.no_grad():
            fake = self.gan.generator(z)
        if n_pristine == 0:
            return fake
        idx = _sample_indices(self.pristine.shape[0], n_pristine, self.rng)
        return torch.cat([fake, self.pristine[idx]])


GAN_CHECKPOINT_SCHEMA = 1


def save_gan_checkpoint(path, gan):
    torch.save({
        "schema_version": GAN_CHECKPOINT_SCHEMA,
        "kind": "gan",
        "latent_dim": gan.latent_dim,
        "sample_shape": tuple(gan.sample_shape),
        "arch": gan.arch,
        "components": {"generator": gan.generator.state_dict(),
                       "discriminator": gan.discriminator.state_dict()},
    }, path)


def load_gan_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("kind") != "gan":
        raise ValueError("%s is not a gan checkpoint" % path)
    gen, disc, arch = build_gan_nets(payload["sample_shape"],
                                     payload["latent_dim"])
    if arch != payload["arch"]:
        raise ValueError("checkpoint arch %r does not match rebuilt %r"
                         % (payload["arch"], arch))
    gen.load_state_dict(payload["components"]["generator"])
    disc.load_state_dict(payload["components"]["discriminator"])
    return GanState(gen, disc, payload["latent_dim"],
                    tuple(payload["sample_shape"]), arch)


def dump_sample_grid(path, rows, max_cols=8):
    """Write a pristine/augmented/generated comparison grid.

    `rows` maps row name -> sample tensor.  Image-shaped data becomes a
    PNG grid (one row per kind); vector data becomes a CSV matrix.
    """
    path = str(path)
    names = [k for k in ("pristine", "augmented", "generated") if k in rows]
    if not names:
        raise ValueError("no sample rows to dump")
    first = rows[names[0]]
    if first.ndim == 4:
        from PIL import Image

        tiles = []
        for name in names:
            batch = rows[name][:max_cols].clamp(0, 1)
            cols = [batch[i] for i in range(batch.shape[0])]
            while len(cols) < max_cols:
                cols.append(torch.zeros_like(cols[0]))
            tiles.append(torch.cat(cols, dim=2))
        grid = torch.cat(tiles, dim=1)
        arr = (grid.numpy() * 255).astype(np.uint8)
        if arr.shape[0] == 1:
            img = Image.fromarray(arr[0], mode="L")
        else:
            img = Image.fromarray(arr.transpose(1, 2, 0))
        img.save(path)
    else:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            dim = first.shape[1]
            w.writerow(["kind", "index"] + ["dim%d" % i for i in range(dim)])
            for name in names:
                batch = rows[name][:max_cols]
                for i in range(batch.shape[0]):
                    w.writerow([name, i]
                               + ["%.6g" % v for v in batch[i].tolist()])
