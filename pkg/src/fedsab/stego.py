"""Steganographic trigger generator.

A U-Net-style encoder turns (image, secret bits) into a full-size additive
residual; a decoder reads the bits back from the triggered image and a
weight-clipped critic scores realism.  All three are trained jointly on a
weighted sum of image MSE, a fixed-filter perceptual distance, per-bit
binary cross-entropy and the critic's realism gap.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from fedsab.engine import Adam, ParamSet, Tape, Tensor, glorot_uniform, load_bundle, save_bundle
from fedsab.errors import ConfigError, InputError, TrainingError
from fedsab.models import Conv, Dense, GlobalAvgPool, MaxPool, ReLU, Sequential
from fedsab.rng import MASK64, derive_rng, fnv1a64, mix64

log = logging.getLogger(__name__)

GROUP = 8  # secret bits per projected input plane


@dataclass(frozen=True)
class SecretBits:
    bits: np.ndarray
    source_label: str
    nbits: int = 32

    def __post_init__(self):
        if len(self.bits) != self.nbits:
            raise InputError(f"expected {self.nbits} bits, got {len(self.bits)}")


def secret_from_label(label: str, nbits: int = 32, seed: int = 0) -> SecretBits:
    """Deterministic bit string for a class label.

    The label bytes are FNV-1a hashed, combined with the seed, and expanded
    64 bits at a time by running SplitMix64 over a counter.
    """
    if not 8 <= nbits <= 256:
        raise InputError(f"nbits must lie in [8, 256], got {nbits}")
    h = fnv1a64(str(label).encode("utf-8")) ^ mix64(int(seed) & MASK64)
    bits = []
    counter = 0
    while len(bits) < nbits:
        word = mix64((h + counter * 0xD1B54A32D192ED03) & MASK64)
        bits.extend((word >> (63 - i)) & 1 for i in range(64))
        counter += 1
    return SecretBits(np.array(bits[:nbits], dtype=np.uint8), str(label), nbits)


# -- networks ----------------------------------------------------------------
class Encoder:
    """U-Net: two downsampling stages, a bottleneck, two upsampling stages
    with skip concatenations, and a 1x1 residual head.

    Secret bits enter as extra input channels, one learned linear H*W plane
    per group of 8 bits.
    """

    def __init__(self, image_shape: tuple[int, int, int], nbits: int, width: int = 16):
        self.image_shape = tuple(image_shape)
        self.nbits = nbits
        self.width = width
        self.groups = -(-nbits // GROUP)

    def init(self, rng: np.random.Generator) -> ParamSet:
        c, h, w = self.image_shape
        f, g = self.width, self.groups
        p = ParamSet()
        for i in range(g):
            n_in = min(GROUP, self.nbits - i * GROUP)
            p[f"proj{i}.w"] = glorot_uniform(rng, (n_in, h * w), n_in, h * w)
            p[f"proj{i}.b"] = Tensor(np.zeros(h * w, np.float32))

        def conv(name, cin, cout, k=3):
            p[f"{name}.w"] = glorot_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k)
            p[f"{name}.b"] = Tensor(np.zeros(cout, np.float32))

        conv("down1", c + g, f)
        conv("down2", f, 2 * f)
        conv("mid", 2 * f, 2 * f)
        conv("up2", 4 * f, 2 * f)
        conv("up1", 3 * f, f)
        conv("head", f + c + g, c, k=1)
        return p

    def forward(self, tape: Tape, params: ParamSet, images: Tensor, bits: np.ndarray) -> Tensor:
        c, h, w = self.image_shape
        if tuple(images.shape[1:]) != self.image_shape:
            raise ConfigError(f"encoder built for {self.image_shape}, got images {images.shape[1:]}")
        bits = np.asarray(bits, dtype=images.data.dtype)
        if bits.shape != (images.shape[0], self.nbits):
            raise ConfigError(f"encoder expects secrets of shape [B, {self.nbits}], got {bits.shape}")
        B = images.shape[0]
        planes = []
        for i in range(self.groups):
            chunk = Tensor(bits[:, i * GROUP : (i + 1) * GROUP])
            plane = tape.dense(chunk, params[f"proj{i}.w"], params[f"proj{i}.b"])
            planes.append(tape.reshape(plane, (B, 1, h, w)))
        x0 = tape.concat([images, *planes])

        def block(name, x):
            return tape.relu(tape.conv2d(x, params[f"{name}.w"], params[f"{name}.b"]))

        e1 = block("down1", x0)
        e2 = block("down2", tape.maxpool2(e1))
        m = block("mid", tape.maxpool2(e2))
        u2 = block("up2", tape.concat([tape.upsample_to(m, e2.shape[2:]), e2]))
        u1 = block("up1", tape.concat([tape.upsample_to(u2, e1.shape[2:]), e1]))
        return tape.conv2d(tape.concat([u1, x0]), params["head.w"], params["head.b"])


def decoder_arch(image_shape, nbits: int, width: int = 16) -> Sequential:
    c, h, w = image_shape
    return Sequential(
        [
            Conv("conv1", c, width),
            ReLU("relu1"),
            MaxPool("pool1"),
            Conv("conv2", width, 2 * width),
            ReLU("relu2"),
            MaxPool("pool2"),
            Dense("fc1", 2 * width * (h // 4) * (w // 4), 4 * nbits),
            ReLU("relu3"),
            Dense("fc2", 4 * nbits, nbits),
        ],
        image_shape,
    )


def critic_arch(image_shape, width: int = 8) -> Sequential:
    c = image_shape[0]
    return Sequential(
        [
            Conv("conv1", c, width),
            ReLU("relu1"),
            MaxPool("pool1"),
            Conv("conv2", width, 2 * width),
            ReLU("relu2"),
            Conv("conv3", 2 * width, 1),
            GlobalAvgPool("gap"),
        ],
        image_shape,
    )


@dataclass
class StegoTrainConfig:
    w1: float = 2.0
    w2: float = 1.0
    w3: float = 1.5
    w4: float = 0.5
    epochs: int = 10
    batch: int = 32
    lr_encoder: float = 1e-3
    lr_critic: float = 5e-4
    critic_clip: float = 0.01
    # image, perceptual and critic weights rise linearly from 0 over this many epochs
    ramp_epochs: float = 3.0
    nbits: int = 32
    width: int = 16
    seed: int = 0

    def __post_init__(self):
        for k in ("w1", "w2", "w3", "w4"):
            if getattr(self, k) < 0:
                raise ConfigError(f"stego weight {k} must be >= 0")
        if self.epochs < 0 or self.batch < 1:
            raise ConfigError("stego epochs must be >= 0 and batch >= 1")


@dataclass
class StegoNets:
    encoder: ParamSet
    decoder: ParamSet
    critic: ParamSet
    image_shape: tuple[int, int, int]
    nbits: int = 32
    width: int = 16
    trace: list[dict] = field(default_factory=list)

    def __post_init__(self):
        self.image_shape = tuple(self.image_shape)
        self.enc_arch = Encoder(self.image_shape, self.nbits, self.width)
        self.dec_arch = decoder_arch(self.image_shape, self.nbits, self.width)
        self.critic_arch = critic_arch(self.image_shape)

    @classmethod
    def initialize(cls, image_shape, nbits: int = 32, width: int = 16, seed: int = 0) -> StegoNets:
        image_shape = tuple(image_shape)
        enc = Encoder(image_shape, nbits, width).init(derive_rng(seed, "stego-init", "encoder"))
        dec = decoder_arch(image_shape, nbits, width).init(derive_rng(seed, "stego-init", "decoder"))
        cri = critic_arch(image_shape).init(derive_rng(seed, "stego-init", "critic"))
        return cls(enc, dec, cri, image_shape, nbits, width)

    def save(self, path) -> None:
        save_bundle({"encoder": self.encoder, "decoder": self.decoder, "critic": self.critic}, path)

    @classmethod
    def load(cls, path, image_shape, nbits: int = 32, width: int = 16) -> StegoNets:
        b = load_bundle(path)
        nets = cls(b["encoder"], b["decoder"], b["critic"], image_shape, nbits, width)
        nets.encoder.require_conformant(nets.enc_arch.init(np.random.default_rng(0)), "encoder")
        return nets


# -- residual generation ---------------------------------------------------
def _batch_bits(secret, n: int) -> np.ndarray:
    bits = np.asarray(secret.bits if isinstance(secret, SecretBits) else secret, dtype=np.float32)
    return np.broadcast_to(bits, (n, bits.shape[-1])) if bits.ndim == 1 else bits


def encode_residual(nets: StegoNets, image, secret) -> np.ndarray:
    """Residual for a single [C,H,W] image, or a batch when given [N,C,H,W]."""
    img = np.asarray(image, dtype=np.float32)
    single = img.ndim == 3
    batch = img[None] if single else img
    if tuple(batch.shape[1:]) != nets.image_shape:
        raise ConfigError(f"encoder configured for {nets.image_shape}, got image {batch.shape[1:]}")
    bits = _batch_bits(secret, len(batch))
    out = []
    for i in range(0, len(batch), 256):
        chunk = batch[i : i + 256]
        res = nets.enc_arch.forward(Tape(record=False), nets.encoder, Tensor(chunk), bits[i : i + 256])
        out.append(res.data)
    res = np.concatenate(out)
    return res[0] if single else res


def apply_trigger(image, residual) -> np.ndarray:
    """``clamp(image + residual, 0, 1)``."""
    image = np.asarray(image, dtype=np.float32)
    residual = np.asarray(residual, dtype=np.float32)
    if image.shape != residual.shape:
        raise InputError(f"image shape {image.shape} != residual shape {residual.shape}")
    return np.clip(image + residual, 0.0, 1.0)


def sab_trigger_fn(nets: StegoNets, secret: SecretBits):
    """Batch trigger function: per-image residual for the fixed class secret."""

    def trigger(images: np.ndarray) -> np.ndarray:
        return apply_trigger(images, encode_residual(nets, images, secret))

    return trigger


def decode_secret(nets: StegoNets, image) -> np.ndarray:
    """Per-bit logits; a bit decodes to 1 iff its logit is strictly positive."""
    img = np.asarray(image, dtype=np.float32)
    single = img.ndim == 3
    batch = img[None] if single else img
    if tuple(batch.shape[1:]) != nets.image_shape:
        raise InputError(f"decoder configured for {nets.image_shape}, got image {batch.shape[1:]}")
    logits = nets.dec_arch.forward(Tape(record=False), nets.decoder, Tensor(batch)).data
    return logits[0] if single else logits


def bits_from_logits(logits: np.ndarray) -> np.ndarray:
    return (np.asarray(logits) > 0).astype(np.uint8)


# -- losses ------------------------------------------------------------------
def loss_image(p_en, p_org) -> float:
    """Mean squared pixel difference between encoded and original images."""
    a = np.asarray(p_en, dtype=np.float64)
    b = np.asarray(p_org, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def loss_secret(logits, secret) -> float:
    """Mean per-bit binary cross-entropy with logits."""
    z = np.asarray(logits, dtype=np.float64)
    s = np.asarray(secret.bits if isinstance(secret, SecretBits) else secret, dtype=np.float64)
    if z.shape != s.shape:
        raise InputError(f"logits shape {z.shape} != secret shape {s.shape}")
    return float(np.mean(np.maximum(z, 0) - z * s + np.log1p(np.exp(-np.abs(z)))))


GAUSS3 = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]], dtype=np.float64) / 16.0
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()
PERCEPTUAL_FILTERS = (GAUSS3, SOBEL_X, SOBEL_Y)
PERCEPTUAL_SCALES = 3


def _filter_bank(channels: int, dtype) -> Tensor:
    """Depthwise bank: output channel ``f*C + c`` applies filter f to channel c."""
    w = np.zeros((len(PERCEPTUAL_FILTERS) * channels, channels, 3, 3), dtype=dtype)
    for f, k in enumerate(PERCEPTUAL_FILTERS):
        for c in range(channels):
            w[f * channels + c, c] = k
    return Tensor(w)


def perceptual_terms(tape: Tape, a: Tensor, b: Tensor) -> list[Tensor]:
    """MSE between fixed-filter responses at scales 1, 1/2 and 1/4."""
    bank = _filter_bank(a.shape[1], a.data.dtype)
    terms = []
    for s in range(PERCEPTUAL_SCALES):
        if s:
            a, b = tape.avgpool2(a), tape.avgpool2(b)
        terms.append(tape.mse(tape.conv2d(a, bank), tape.conv2d(b, bank)))
    return terms


def perceptual_loss_tensor(tape: Tape, a: Tensor, b: Tensor) -> Tensor:
    terms = perceptual_terms(tape, a, b)
    return tape.weighted_sum(terms, [1.0] * len(terms))


def loss_perceptual(p_en, p_org) -> float:
    a = np.asarray(p_en, dtype=np.float64)
    b = np.asarray(p_org, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a, b = a[None], b[None]
    return float(perceptual_loss_tensor(Tape(record=False), Tensor(a), Tensor(b)).data)


def critic_scores(nets: StegoNets, images) -> np.ndarray:
    return nets.critic_arch.forward(Tape(record=False), nets.critic, Tensor(np.asarray(images))).data[:, 0]


def loss_critic(nets: StegoNets, real_batch, fake_batch) -> tuple[float, float]:
    """(encoder_term, critic_term) with encoder_term = mean critic(real) -
    mean critic(fake) and critic_term its negation."""
    real = np.asarray(real_batch, dtype=np.float32)
    fake = np.asarray(fake_batch, dtype=np.float32)
    if real.shape != fake.shape:
        raise InputError(f"real batch {real.shape} != fake batch {fake.shape}")
    enc = float(np.mean(critic_scores(nets, real), dtype=np.float64) - np.mean(critic_scores(nets, fake), dtype=np.float64))
    return enc, -enc


def joint_loss(terms, weights) -> float:
    """``w1*image + w2*perceptual + w3*secret + w4*critic``."""
    terms, weights = list(terms), list(weights)
    if len(terms) != 4 or len(weights) != 4:
        raise InputError("joint loss takes four terms and four weights")
    if any(w < 0 for w in weights):
        raise InputError(f"weights must be >= 0, got {weights}")
    return float(sum(w * t for w, t in zip(weights, terms)))


# -- training ----------------------------------------------------------------
def _stego_step(nets: StegoNets, images: np.ndarray, bits: np.ndarray, cfg: StegoTrainConfig):
    """One forward/backward of the joint loss; returns (terms, enc grads, dec grads)."""
    tape = Tape()
    x = Tensor(images)
    res = nets.enc_arch.forward(tape, nets.encoder, x, bits)
    enc_img = tape.clamp(tape.add(x, res), 0.0, 1.0)
    l_img = tape.mse(enc_img, x)
    l_per = perceptual_loss_tensor(tape, enc_img, x)
    logits = nets.dec_arch.forward(tape, nets.decoder, enc_img)
    l_sec = tape.bce_with_logits(logits, bits)
    c_real = nets.critic_arch.forward(Tape(record=False), nets.critic, x).data
    c_fake = nets.critic_arch.forward(tape, nets.critic, enc_img)
    mean_fake = tape.mean(c_fake)
    # encoder term = mean critic(real) - mean critic(fake); the real part is constant here
    l_cri = tape.scale(mean_fake, -1.0)
    joint = tape.weighted_sum([l_img, l_per, l_sec, l_cri], [cfg.w1, cfg.w2, cfg.w3, cfg.w4])
    tape.backward(joint)
    enc_term = float(np.mean(c_real, dtype=np.float64)) - float(mean_fake.data)
    terms = {
        "loss_image": float(l_img.data),
        "loss_perceptual": float(l_per.data),
        "loss_secret": float(l_sec.data),
        "loss_critic": enc_term,
        "joint": float(joint.data) + cfg.w4 * float(np.mean(c_real, dtype=np.float64)),
    }
    return terms, tape.grads_for(nets.encoder), tape.grads_for(nets.decoder), enc_img.data


def _critic_step(nets: StegoNets, real: np.ndarray, fake: np.ndarray, opt: Adam, clip: float) -> None:
    tape = Tape()
    c_real = tape.mean(nets.critic_arch.forward(tape, nets.critic, Tensor(real)))
    c_fake = tape.mean(nets.critic_arch.forward(tape, nets.critic, Tensor(fake)))
    tape.backward(tape.sub(c_fake, c_real))
    updated = opt.step(nets.critic, tape.grads_for(nets.critic))
    nets.critic = ParamSet((k, Tensor(np.clip(v.data, -clip, clip))) for k, v in updated.items())


def train_stego(dataset, config: StegoTrainConfig, nets: StegoNets | None = None) -> StegoNets:
    """Alternate one critic step and one encoder/decoder step per batch.

    Secrets are random bit strings per image so the decoder learns to read
    arbitrary payloads.  The trace records the running weights' terms per
    epoch; ``joint`` uses the ramped weights.  Returns the nets with a per-epoch loss trace.
    """
    images = dataset.images if hasattr(dataset, "images") else np.asarray(dataset, dtype=np.float32)
    if len(images) == 0:
        raise InputError("train_stego needs a non-empty dataset")
    if nets is None:
        nets = StegoNets.initialize(images.shape[1:], config.nbits, config.width, config.seed)
    enc_opt = Adam(nets.encoder, config.lr_encoder)
    dec_opt = Adam(nets.decoder, config.lr_encoder)
    cri_opt = Adam(nets.critic, config.lr_critic, betas=(0.5, 0.9))
    steps_per_epoch = -(-len(images) // config.batch)
    ramp_steps = config.ramp_epochs * steps_per_epoch
    step = 0
    for epoch in range(config.epochs):
        rng = derive_rng(config.seed, "stego-train", epoch)
        order = rng.permutation(len(images))
        sums: dict[str, float] = {}
        batches = 0
        for start in range(0, len(order), config.batch):
            idx = order[start : start + config.batch]
            x = images[idx]
            bits = rng.integers(0, 2, size=(len(idx), nets.nbits)).astype(np.float32)
            f = min(1.0, step / ramp_steps) if ramp_steps > 0 else 1.0
            cfg = replace(config, w1=config.w1 * f, w2=config.w2 * f, w4=config.w4 * f)
            terms, g_enc, g_dec, fake = _stego_step(nets, x, bits, cfg)
            step += 1
            if not np.isfinite(terms["joint"]):
                raise TrainingError(f"stego joint loss diverged in epoch {epoch}")
            _critic_step(nets, x, fake, cri_opt, config.critic_clip)
            nets.encoder = enc_opt.step(nets.encoder, g_enc)
            nets.decoder = dec_opt.step(nets.decoder, g_dec)
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        row = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
        nets.trace.append(row)
        log.info("stego epoch %d: %s", epoch, {k: round(v, 5) for k, v in row.items()})
    return nets


def bit_accuracy(nets: StegoNets, images: np.ndarray, seed: int = 0) -> float:
    """Held-out bit accuracy with fresh random secrets."""
    rng = derive_rng(seed, "stego-eval")
    bits = rng.integers(0, 2, size=(len(images), nets.nbits)).astype(np.float32)
    trig = apply_trigger(images, encode_residual(nets, images, bits))
    pred = bits_from_logits(decode_secret(nets, trig))
    return float(np.mean(pred == bits))


def write_trace_csv(nets: StegoNets, path) -> None:
    cols = ["epoch", "loss_image", "loss_perceptual", "loss_secret", "loss_critic", "joint"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in nets.trace:
            w.writerow([row["epoch"]] + [f"{row[c]:.8g}" for c in cols[1:]])
