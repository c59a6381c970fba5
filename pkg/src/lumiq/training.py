"""Two-stage training pipeline.

Stage 1 learns encoder, codebook, decoder, and discriminator on clean
images.  Stage 2 freezes the codebook and decoder core, re-trains a
copy of the encoder on low-light inputs, and alternates per batch
between a light-factor (LQM) update and an enhancer update, with the
discriminator kept adversarial throughout.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tape, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .codebook import Codebook, QuantizeResult, codebook_matching_loss, quantize_nearest
from .data import ImagePair
from .lapm import PromptPyramid
from .losses import (
    DivergenceError,
    LossWeights,
    PerceptualExtractor,
    adversarial_loss,
    feature_matching_loss,
    l1_loss,
    reconstruction_loss,
    total_loss,
    vq_total_loss,
    write_loss_csv,
)
from .lqm import LqmState, gram_matrix, extract_light_factor, light_consistency_loss, lqm_contrastive_loss
from .networks import Decoder, Discriminator, Encoder, NetworkConfig, decode, discriminate, encode


class CompatibilityError(RuntimeError):
    """Checkpoint and config disagree on an architectural size."""


# ---------------------------------------------------------------------------
# optimizer


class OptimizerState:
    """Adam accumulators for one parameter group."""

    def __init__(self, params: list[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: OptimizerState) -> list[Tensor]:
    """Bias-corrected Adam update, in place."""
    if len(params) != len(state.params) or any(a is not b for a, b in zip(params, state.params)):
        raise ValueError("adam_step: params do not match the optimizer state's group")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.data.shape:
            raise ShapeError(f"adam_step: grad shape {g.shape} vs param shape {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / (1.0 - b1 ** t)
        v_hat = state.v[i] / (1.0 - b2 ** t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def _step_group(named_params, state: OptimizerState) -> None:
    """Collect grads for a trainable group, apply Adam, clear grads."""
    params = [p for _, p in named_params]
    grads = [p.grad_array() for p in params]
    adam_step(params, grads, state)
    ad.zero_grads(params)


# ---------------------------------------------------------------------------
# config


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 4
    crop: int = 32
    stage1_iters: int = 2000
    stage2_iters: int = 1000
    lqm_warmup: int = 100
    weights: LossWeights = field(default_factory=LossWeights)
    margin: float = 0.1
    n_prompts: int = 5
    n_codes: int = 64
    code_dim: int = 32
    base_channels: int = 16
    n_down: int = 2
    d_l: int = 16
    lr: float = 1e-3
    use_fusion: bool = True
    use_lqm: bool = True
    use_lapm: bool = True

    def __post_init__(self):
        counts = (self.batch_size, self.crop, self.stage1_iters, self.stage2_iters,
                  self.n_prompts, self.n_codes, self.code_dim, self.base_channels,
                  self.n_down, self.d_l)
        if min(counts) < 1:
            raise ValueError(f"all config counts must be positive: {self}")
        if self.lqm_warmup < 0 or self.margin < 0 or self.lr <= 0:
            raise ValueError(f"bad config values: {self}")

    def network_config(self) -> NetworkConfig:
        return NetworkConfig(base_channels=self.base_channels, n_down=self.n_down,
                             code_dim=self.code_dim)

    def tap_channels(self) -> list[int]:
        return [self.base_channels * (2 ** i) for i in range(self.n_down)]


_BOOL_KEYS = ("use_fusion", "use_lqm", "use_lapm")
_FLOAT_KEYS = ("margin", "lr", "sigma", "gamma", "lambda_lcl")


def fields_of_config_file(cfg: TrainConfig) -> list[tuple[str, object]]:
    """(key, value) pairs in the order the config file uses."""
    out = []
    for f in fields(cfg):
        if f.name == "weights":
            continue
        out.append((f.name, getattr(cfg, f.name)))
    for key in ("sigma", "gamma", "lambda_lcl"):
        out.append((key, getattr(cfg.weights, key)))
    return out


def save_config(cfg: TrainConfig, path) -> None:
    """Flat key=value form, one entry per line."""
    lines = [f"{key}={format_value(value)}" for key, value in fields_of_config_file(cfg)]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.12g}"
    return str(v)


def load_config(path) -> TrainConfig:
    cfg_kw: dict = {}
    weight_kw: dict = {}
    int_keys = {f.name for f in fields(TrainConfig)} - set(_BOOL_KEYS) - set(_FLOAT_KEYS) - {"weights"}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, val = line.split("=", 1)
            key, val = key.strip(), val.strip()
            if key in ("sigma", "gamma", "lambda_lcl"):
                weight_kw[key] = float(val)
            elif key in _BOOL_KEYS:
                cfg_kw[key] = val.lower() == "true"
            elif key in _FLOAT_KEYS:
                cfg_kw[key] = float(val)
            elif key in int_keys:
                cfg_kw[key] = int(val)
            else:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    return TrainConfig(weights=LossWeights(**weight_kw), **cfg_kw)


# ---------------------------------------------------------------------------
# model containers and checkpoints


@dataclass
class Stage1Model:
    encoder: Encoder
    decoder: Decoder
    codebook: Codebook
    disc: Discriminator
    cfg: TrainConfig


@dataclass
class Stage2Model:
    encoder: Encoder  # low-light encoder (trainable copy)
    encoder_ref: Encoder  # frozen stage-1 encoder for clean targets
    decoder: Decoder  # core frozen, fusion convs trainable
    codebook: Codebook  # frozen
    disc: Discriminator
    lqm: LqmState | None
    prompts: PromptPyramid | None
    cfg: TrainConfig


_CONFIG_KEYS = ("seed", "n_codes", "code_dim", "base_channels", "n_down", "n_prompts", "d_l", "crop")


def _config_entries(cfg: TrainConfig) -> dict[str, np.ndarray]:
    return {f"config/{k}": np.asarray(float(getattr(cfg, k))) for k in _CONFIG_KEYS}


def _check_config(entries: dict, cfg: TrainConfig, keys) -> None:
    problems = []
    for k in keys:
        stored = entries.get(f"config/{k}")
        if stored is None:
            problems.append(f"missing config/{k}")
        elif int(stored.reshape(())) != int(getattr(cfg, k)):
            problems.append(f"{k}: checkpoint has {int(stored.reshape(()))}, config wants {getattr(cfg, k)}")
    if problems:
        raise CompatibilityError("; ".join(problems))


def _load_group(entries: dict, named_params) -> None:
    for name, p in named_params:
        if name not in entries:
            raise CompatibilityError(f"checkpoint missing parameter {name}")
        if entries[name].shape != p.data.shape:
            raise CompatibilityError(
                f"{name}: checkpoint shape {entries[name].shape} vs model shape {p.data.shape}"
            )
        p.data[:] = entries[name]


def stage1_entries(model: Stage1Model) -> dict[str, np.ndarray]:
    entries = dict(_config_entries(model.cfg))
    entries["config/stage"] = np.asarray(1.0)
    for name, p in (model.encoder.named_params() + model.decoder.named_params()
                    + model.disc.named_params()):
        entries[name] = p.data
    entries["codebook.codes"] = model.codebook.codes.data
    entries["codebook.usage"] = model.codebook.usage.astype(np.float64)
    return entries


def stage1_from_entries(entries: dict, cfg: TrainConfig) -> Stage1Model:
    _check_config(entries, cfg, ("n_codes", "code_dim", "base_channels", "n_down"))
    rng = np.random.default_rng(0)
    netcfg = cfg.network_config()
    model = Stage1Model(Encoder(netcfg, rng), Decoder(netcfg, rng),
                        Codebook(cfg.n_codes, cfg.code_dim, rng), Discriminator(netcfg, rng), cfg)
    _load_group(entries, model.encoder.named_params() + model.decoder.named_params()
                + model.disc.named_params())
    _load_group(entries, [("codebook.codes", model.codebook.codes)])
    model.codebook.usage[:] = entries["codebook.usage"].astype(np.int64)
    return model


def stage2_entries(model: Stage2Model) -> dict[str, np.ndarray]:
    entries = dict(_config_entries(model.cfg))
    entries["config/stage"] = np.asarray(2.0)
    entries["config/use_fusion"] = np.asarray(float(model.cfg.use_fusion))
    entries["config/use_lqm"] = np.asarray(float(model.cfg.use_lqm))
    entries["config/use_lapm"] = np.asarray(float(model.cfg.use_lapm))
    groups = (model.encoder.named_params("encoder2") + model.encoder_ref.named_params()
              + model.decoder.named_params() + model.disc.named_params())
    if model.lqm is not None:
        groups += model.lqm.named_params()
    if model.prompts is not None:
        groups += model.prompts.named_params()
    for name, p in groups:
        entries[name] = p.data
    entries["codebook.codes"] = model.codebook.codes.data
    entries["codebook.usage"] = model.codebook.usage.astype(np.float64)
    return entries


def stage2_from_entries(entries: dict, cfg: TrainConfig) -> Stage2Model:
    _check_config(entries, cfg, ("n_codes", "code_dim", "base_channels", "n_down", "n_prompts", "d_l"))
    use_lqm = bool(entries.get("config/use_lqm", np.asarray(1.0)).reshape(()))
    use_lapm = bool(entries.get("config/use_lapm", np.asarray(1.0)).reshape(()))
    cfg = replace(cfg, use_lqm=use_lqm, use_lapm=use_lapm)
    rng = np.random.default_rng(0)
    netcfg = cfg.network_config()
    lqm = LqmState(rng, cfg.tap_channels(), d_l=cfg.d_l) if use_lqm else None
    prompts = PromptPyramid(rng, cfg.tap_channels(), n_prompts=cfg.n_prompts) if use_lapm else None
    model = Stage2Model(Encoder(netcfg, rng), Encoder(netcfg, rng), Decoder(netcfg, rng),
                        Codebook(cfg.n_codes, cfg.code_dim, rng), Discriminator(netcfg, rng),
                        lqm, prompts, cfg)
    groups = (model.encoder.named_params("encoder2") + model.encoder_ref.named_params()
              + model.decoder.named_params() + model.disc.named_params())
    if lqm is not None:
        groups += lqm.named_params()
    if prompts is not None:
        groups += prompts.named_params()
    _load_group(entries, groups)
    _load_group(entries, [("codebook.codes", model.codebook.codes)])
    model.codebook.usage[:] = entries["codebook.usage"].astype(np.int64)
    return model


def save_model(model, path) -> None:
    entries = stage1_entries(model) if isinstance(model, Stage1Model) else stage2_entries(model)
    save_checkpoint(entries, path)


def load_model(path, cfg: TrainConfig):
    entries = load_checkpoint(path)
    stage = int(entries.get("config/stage", np.asarray(0.0)).reshape(()))
    if stage == 1:
        return stage1_from_entries(entries, cfg)
    if stage == 2:
        return stage2_from_entries(entries, cfg)
    raise CompatibilityError(f"{path}: unknown or missing stage marker")


def config_from_entries(entries: dict) -> TrainConfig:
    """Rebuild the architectural part of the config stored in a checkpoint."""
    kw = {}
    for k in _CONFIG_KEYS:
        stored = entries.get(f"config/{k}")
        if stored is None:
            raise CompatibilityError(f"checkpoint missing config/{k}")
        kw[k] = int(stored.reshape(()))
    return TrainConfig(**kw)


def load_any(path):
    """Load a checkpoint using the config recorded inside it."""
    return load_model(path, config_from_entries(load_checkpoint(path)))


# ---------------------------------------------------------------------------
# batching helpers


def _crop(rng: np.random.Generator, img: np.ndarray, crop: int) -> np.ndarray:
    _, _, h, w = img.shape
    if h == crop and w == crop:
        return img
    if h < crop or w < crop:
        raise ShapeError(f"image {img.shape} smaller than crop {crop}")
    i = int(rng.integers(0, h - crop + 1))
    j = int(rng.integers(0, w - crop + 1))
    return img[:, :, i : i + crop, j : j + crop]


def _batch_images(rng, images: list[Tensor], batch_size: int, crop: int) -> Tensor:
    idx = rng.integers(0, len(images), size=batch_size)
    crops = [_crop(rng, images[i].data, crop) for i in idx]
    return Tensor(np.concatenate(crops, axis=0))


def _batch_pairs(rng, pairs: list[ImagePair], batch_size: int, crop: int) -> tuple[Tensor, Tensor]:
    idx = rng.integers(0, len(pairs), size=batch_size)
    lows, normals = [], []
    for i in idx:
        _, _, h, w = pairs[i].low.data.shape
        if h == crop and w == crop:
            lows.append(pairs[i].low.data)
            normals.append(pairs[i].normal.data)
        else:
            oi = int(rng.integers(0, h - crop + 1))
            oj = int(rng.integers(0, w - crop + 1))
            lows.append(pairs[i].low.data[:, :, oi : oi + crop, oj : oj + crop])
            normals.append(pairs[i].normal.data[:, :, oi : oi + crop, oj : oj + crop])
    return Tensor(np.concatenate(lows, axis=0)), Tensor(np.concatenate(normals, axis=0))


# ---------------------------------------------------------------------------
# stage 1


def pretrain_vqgan(images: list[Tensor], cfg: TrainConfig, log_hook=None):
    """Train encoder, decoder, codebook, discriminator on clean images.

    Returns (Stage1Model, loss log rows step,l_mae,l_cma,l_adv,l_total).
    """
    if not images:
        raise ValueError("pretrain_vqgan needs a non-empty image list")
    rng = np.random.default_rng(cfg.seed)
    netcfg = cfg.network_config()
    net_rng = np.random.default_rng(rng.integers(0, 2**31))
    model = Stage1Model(Encoder(netcfg, net_rng), Decoder(netcfg, net_rng),
                        Codebook(cfg.n_codes, cfg.code_dim, net_rng),
                        Discriminator(netcfg, net_rng), cfg)
    gen_group = (model.encoder.named_params() + model.decoder.named_params()
                 + [("codebook.codes", model.codebook.codes)])
    disc_group = model.disc.named_params()
    gen_opt = OptimizerState([p for _, p in gen_group], lr=cfg.lr)
    disc_opt = OptimizerState([p for _, p in disc_group], lr=cfg.lr)
    gamma = cfg.weights.gamma
    rows = []
    for step in range(cfg.stage1_iters):
        I_h = _batch_images(rng, images, cfg.batch_size, cfg.crop)

        model.disc.set_frozen(True)
        tape = Tape()
        with tape:
            Z, skips = encode(I_h, model.encoder)
            res = quantize_nearest(Z, model.codebook)
            I_rec = decode(res.quantized, skips, model.decoder)
            l_mae = l1_loss(I_h, I_rec)
            l_cma = codebook_matching_loss(Z, res.lookup, cfg.weights.sigma)
            fake_logits = discriminate(I_rec, model.disc)
            l_adv = ad.mul(adversarial_loss(None, fake_logits, gamma, "generator"), Tensor(gamma))
            try:
                l_total = vq_total_loss(l_mae, l_cma, l_adv)
            except DivergenceError as err:
                raise DivergenceError(f"stage 1 step {step}: {err}") from err
        ad.backward(l_total, tape)
        _step_group(gen_group, gen_opt)

        model.disc.set_frozen(False)
        dtape = Tape()
        with dtape:
            real_logits = discriminate(I_h, model.disc)
            fake_detached = discriminate(Tensor(I_rec.data.copy()), model.disc)
            objective = adversarial_loss(real_logits, fake_detached, gamma, "discriminator")
            disc_loss = ad.mul(objective, Tensor(-1.0))
        if not np.isfinite(disc_loss.data):
            raise DivergenceError(f"stage 1 step {step}: discriminator loss is not finite")
        ad.backward(disc_loss, dtape)
        _step_group(disc_group, disc_opt)

        rows.append((step, l_mae.item(), l_cma.item(), l_adv.item(), l_total.item()))
        if log_hook is not None:
            log_hook(step, rows[-1])
    return model, rows


def reconstruct(image: Tensor, model: Stage1Model, update_usage: bool = False):
    """Clean-path forward pass: encode, match codes, decode.  No grads."""
    Z, skips = encode(image, model.encoder)
    res = quantize_nearest(Z, model.codebook, update_usage=update_usage)
    return decode(res.quantized, skips, model.decoder), res


# ---------------------------------------------------------------------------
# stage 2


def _copy_params(src_named, dst_named) -> None:
    for (ns, ps), (nd, pd) in zip(src_named, dst_named):
        pd.data[:] = ps.data


def _light_factors(skips: list[Tensor], lqm: LqmState) -> list[list]:
    """Per batch item, per level, one light factor from the skip features."""
    b = skips[0].data.shape[0]
    out = [[] for _ in range(b)]
    for level, feat in enumerate(skips):
        _, c, h, w = feat.data.shape
        for n in range(b):
            item = ad.reshape(ad.slice_channels(ad.reshape(feat, (1, b * c, h, w)), n * c, (n + 1) * c),
                              (c, h, w))
            out[n].append(extract_light_factor(gram_matrix(item), lqm))
    return out


def _lqm_pair_loss(f_low: list[list], f_normal: list[list], margin: float) -> Tensor:
    """Contrastive pairs per the batch policy: same-scene (low, normal)
    pairs differ in lighting; normal crops pair as same-lighting."""
    b = len(f_low)
    n_levels = len(f_low[0])
    loss = Tensor(0.0)
    for level in range(n_levels):
        for i in range(b):
            loss = ad.add(loss, lqm_contrastive_loss(
                [(f_low[i][level], 0), (f_normal[i][level], 1)], margin))
        for i in range(b):
            for j in range(i + 1, b):
                loss = ad.add(loss, lqm_contrastive_loss(
                    [(f_normal[i][level], 1), (f_normal[j][level], 1)], margin))
    return loss


def _consistency_sum(f_low: list[list], f_normal: list[list]) -> Tensor:
    """Mean over scenes, summed over levels."""
    b = len(f_low)
    loss = Tensor(0.0)
    for i in range(b):
        for level in range(len(f_low[i])):
            loss = ad.add(loss, light_consistency_loss(f_low[i][level], f_normal[i][level]))
    return ad.div(loss, Tensor(float(b)))


def train_enhancer(pairs: list[ImagePair], stage1: Stage1Model, cfg: TrainConfig,
                   step_hook=None, log_hook=None):
    """Stage-2 alternating training.

    Per iteration: an LQM update on frozen-encoder factors, an enhancer
    update (encoder copy + prompts + fusion convs) with the combined
    objective, then a discriminator update.  Codebook and decoder core
    stay frozen throughout.  step_hook(phase, step, model) fires after
    each sub-step; loss rows are (step, l_adv, l_fml, l_rec, l_lcl, l_total).
    """
    if not pairs:
        raise ValueError("train_enhancer needs a non-empty pair list")
    if stage1.cfg.code_dim != cfg.code_dim or stage1.cfg.n_codes != cfg.n_codes \
            or stage1.cfg.base_channels != cfg.base_channels or stage1.cfg.n_down != cfg.n_down:
        raise CompatibilityError(
            f"stage-1 model sizes (d={stage1.cfg.code_dim}, N={stage1.cfg.n_codes}, "
            f"base={stage1.cfg.base_channels}, n_down={stage1.cfg.n_down}) do not match config "
            f"(d={cfg.code_dim}, N={cfg.n_codes}, base={cfg.base_channels}, n_down={cfg.n_down})"
        )
    rng = np.random.default_rng(cfg.seed + 1)
    netcfg = cfg.network_config()
    net_rng = np.random.default_rng(rng.integers(0, 2**31))

    encoder2 = Encoder(netcfg, net_rng)
    _copy_params(stage1.encoder.named_params(), encoder2.named_params())
    lqm = LqmState(net_rng, cfg.tap_channels(), d_l=cfg.d_l) if cfg.use_lqm else None
    prompts = PromptPyramid(net_rng, cfg.tap_channels(), n_prompts=cfg.n_prompts) if cfg.use_lapm else None
    model = Stage2Model(encoder2, stage1.encoder, stage1.decoder, stage1.codebook,
                        stage1.disc, lqm, prompts, cfg)

    # permanent freezes: clean-path encoder, codebook, decoder core
    model.encoder_ref.set_frozen(True)
    model.codebook.codes.requires_grad = False
    model.decoder.set_core_frozen(True)
    for _, p in model.decoder.fusion_named_params():
        p.requires_grad = cfg.use_fusion

    enhancer_group = model.encoder.named_params("encoder2")
    if cfg.use_fusion:
        enhancer_group = enhancer_group + model.decoder.fusion_named_params()
    if prompts is not None:
        enhancer_group = enhancer_group + prompts.named_params()
    disc_group = model.disc.named_params()
    enh_opt = OptimizerState([p for _, p in enhancer_group], lr=cfg.lr)
    disc_opt = OptimizerState([p for _, p in disc_group], lr=cfg.lr)
    lqm_opt = OptimizerState([p for _, p in lqm.named_params()], lr=cfg.lr) if lqm else None

    px = PerceptualExtractor(seed=cfg.seed + 7)
    gamma = cfg.weights.gamma
    rows = []

    def lqm_update(step: int, I_ll: Tensor, I_nl: Tensor) -> None:
        lqm.set_frozen(False)
        # encoder runs untracked; only the factor maps learn here
        _, skips_ll = encode(I_ll, model.encoder)
        _, skips_nl = encode(I_nl, model.encoder)
        skips_ll = [Tensor(s.data) for s in skips_ll]
        skips_nl = [Tensor(s.data) for s in skips_nl]
        tape = Tape()
        with tape:
            f_low = _light_factors(skips_ll, lqm)
            f_normal = _light_factors(skips_nl, lqm)
            loss = _lqm_pair_loss(f_low, f_normal, cfg.margin)
        if not np.isfinite(loss.data):
            raise DivergenceError(f"stage 2 step {step}: LQM loss is not finite")
        ad.backward(loss, tape)
        _step_group(lqm.named_params(), lqm_opt)
        lqm.set_frozen(True)
        if step_hook is not None:
            step_hook("lqm", step, model)

    total_warmup = cfg.lqm_warmup if lqm else 0
    for w in range(total_warmup):
        I_ll, I_nl = _batch_pairs(rng, pairs, cfg.batch_size, cfg.crop)
        lqm_update(-total_warmup + w, I_ll, I_nl)

    for step in range(cfg.stage2_iters):
        I_ll, I_nl = _batch_pairs(rng, pairs, cfg.batch_size, cfg.crop)

        if lqm is not None:
            lqm_update(step, I_ll, I_nl)

        # enhancer update: encoder copy, prompts, fusion
        model.disc.set_frozen(True)
        with_targets = encode(I_nl, model.encoder_ref)  # untracked: params frozen, inputs constant
        Zq_h = quantize_nearest(with_targets[0], model.codebook, update_usage=False).quantized
        Zq_h = Tensor(Zq_h.data)
        tape = Tape()
        with tape:
            Z_ll, skips_ll = encode(I_ll, model.encoder)
            res = quantize_nearest(Z_ll, model.codebook)
            I_rec = decode(res.quantized, skips_ll, model.decoder, prompts=prompts)
            l_adv = ad.mul(adversarial_loss(None, discriminate(I_rec, model.disc), gamma, "generator"),
                           Tensor(gamma))
            l_fml = feature_matching_loss(Z_ll, Zq_h, cfg.weights.sigma)
            l_rec = reconstruction_loss(I_rec, I_nl, px)
            if lqm is not None:
                _, skips_nl = encode(I_nl, model.encoder)
                l_lcl = _consistency_sum(_light_factors(skips_ll, lqm), _light_factors(skips_nl, lqm))
            else:
                l_lcl = Tensor(0.0)
            try:
                l_total = total_loss(l_adv, l_fml, l_rec, l_lcl, cfg.weights)
            except DivergenceError as err:
                raise DivergenceError(f"stage 2 step {step}: {err}") from err
        ad.backward(l_total, tape)
        _step_group(enhancer_group, enh_opt)
        if step_hook is not None:
            step_hook("enhancer", step, model)

        # discriminator update on detached fakes
        model.disc.set_frozen(False)
        dtape = Tape()
        with dtape:
            real_logits = discriminate(I_nl, model.disc)
            fake_logits = discriminate(Tensor(I_rec.data.copy()), model.disc)
            objective = adversarial_loss(real_logits, fake_logits, gamma, "discriminator")
            disc_loss = ad.mul(objective, Tensor(-1.0))
        if not np.isfinite(disc_loss.data):
            raise DivergenceError(f"stage 2 step {step}: discriminator loss is not finite")
        ad.backward(disc_loss, dtape)
        _step_group(disc_group, disc_opt)
        if step_hook is not None:
            step_hook("disc", step, model)

        rows.append((step, l_adv.item(), l_fml.item(), l_rec.item(), l_lcl.item(), l_total.item()))
        if log_hook is not None:
            log_hook(step, rows[-1])
    return model, rows


def enhance(image: Tensor, model: Stage2Model, update_usage: bool = False):
    """Single deterministic forward pass of the trained enhancer."""
    Z, skips = encode(image, model.encoder)
    res = quantize_nearest(Z, model.codebook, update_usage=update_usage)
    out = decode(res.quantized, skips, model.decoder, prompts=model.prompts)
    return out, res


# ---------------------------------------------------------------------------
# evaluation harnesses


def evaluate_pairs(model: Stage2Model, pairs: list[ImagePair]):
    """Mean enhanced PSNR/SSIM against the normal-light references."""
    from .metrics import psnr, ssim

    ps, ss = [], []
    for pair in pairs:
        out, _ = enhance(pair.low, model)
        ps.append(psnr(out, pair.normal))
        ss.append(ssim(out, pair.normal))
    return float(np.mean(ps)), float(np.mean(ss))


ABLATION_VARIANTS = [
    ("baseline", dict(use_fusion=False, use_lqm=False, use_lapm=False)),
    ("ff", dict(use_fusion=True, use_lqm=False, use_lapm=False)),
    ("ff_lqm", dict(use_fusion=True, use_lqm=True, use_lapm=False)),
    ("ff_lapm", dict(use_fusion=True, use_lqm=False, use_lapm=True)),
    ("full", dict(use_fusion=True, use_lqm=True, use_lapm=True)),
]


def run_ablation(stage1: Stage1Model, train_pairs, eval_pairs, cfg: TrainConfig):
    """Train each component combination from one shared stage-1 model.

    Returns rows (variant, psnr, ssim).
    """
    rows = []
    for name, flags in ABLATION_VARIANTS:
        variant_cfg = replace(cfg, **flags)
        model, _ = train_enhancer(train_pairs, _clone_stage1(stage1), variant_cfg)
        p, s = evaluate_pairs(model, eval_pairs)
        rows.append((name, p, s))
    return rows


def _clone_stage1(model: Stage1Model) -> Stage1Model:
    """Deep copy so each stage-2 run starts from identical weights."""
    clone = copy.deepcopy(model)
    for _, p in (clone.encoder.named_params() + clone.decoder.named_params()
                 + clone.disc.named_params() + [("c", clone.codebook.codes)]):
        p.requires_grad = True
        p.grad = None
    clone.decoder.set_frozen(False)
    clone.disc.set_frozen(False)
    return clone


def run_lambda_sweep(stage1: Stage1Model, train_pairs, eval_pairs, cfg: TrainConfig,
                     lambdas=(1.0, 0.5, 0.001)):
    """Rows (lambda, psnr, ssim) for the consistency-weight grid."""
    rows = []
    for lam in lambdas:
        sweep_cfg = replace(cfg, weights=replace(cfg.weights, lambda_lcl=lam))
        model, _ = train_enhancer(train_pairs, _clone_stage1(stage1), sweep_cfg)
        p, s = evaluate_pairs(model, eval_pairs)
        rows.append((lam, p, s))
    return rows


def run_prompt_sweep(stage1: Stage1Model, train_pairs, eval_pairs, cfg: TrainConfig,
                     counts=(3, 4, 5, 6)):
    """Rows (n_prompts, psnr, ssim) for the prompt-count grid."""
    rows = []
    for n in counts:
        sweep_cfg = replace(cfg, n_prompts=n)
        model, _ = train_enhancer(train_pairs, _clone_stage1(stage1), sweep_cfg)
        p, s = evaluate_pairs(model, eval_pairs)
        rows.append((n, p, s))
    return rows


def write_stage1_log(rows, path) -> None:
    write_loss_csv(path, ["step", "l_mae", "l_cma", "l_adv", "l_total"], rows)


def write_stage2_log(rows, path) -> None:
    write_loss_csv(path, ["step", "l_adv", "l_fml", "l_rec", "l_lcl", "l_total"], rows)
