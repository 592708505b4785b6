"""Gradient-sign attacks on the victim encoder's features.

The optimized objective pushes the adversarial image's features away from
the source image's and toward a target image's. The recorded loss is
cos(adv, source) - lambda * cos(adv, target), so a successful attack drives
it DOWN; the sign update ascends its negation. The iterate stays inside the
L-inf ball of radius epsilon around the source and inside [0, 1].
"""

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import regions, transforms
from .regions import SadConfig
from .tensor_core import (
    DIV_GUARD,
    NormMode,
    Tensor,
    backward,
    cosine_similarity,
    tsum,
)
from .transforms import TransformConfig, derive_rng

# Subkeys for deriving independent RNG streams from one attack seed.
_KEY_INIT = 0
_KEY_TARGET = 1
_KEY_TRANSFORM = 2


class TargetKind(enum.Enum):
    RGM = "rgm"
    BLACK = "black"
    WHITE = "white"
    RANDOM_NOISE = "random-noise"
    SAMPLE_IMAGE = "sample-image"


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    iters: int = 40
    mu: float = 1.0
    lambda_: float = 1.0
    sad: SadConfig = field(default_factory=SadConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)
    target_kind: TargetKind = TargetKind.RGM
    seed: int = 0
    norm_mode: NormMode = NormMode.NORM_PRODUCT
    l1_normalize_grad: bool = False
    record_grad_tensors: bool = False

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.alpha <= 0.0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        # epsilon == 0 is allowed as a no-op budget (sweep anchor); otherwise
        # the step must fit inside the ball.
        if self.epsilon > 0.0 and self.alpha > self.epsilon:
            raise ValueError(f"alpha {self.alpha} exceeds epsilon {self.epsilon}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if self.mu < 0.0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.lambda_ < 0.0:
            raise ValueError(f"lambda_ must be >= 0, got {self.lambda_}")


@dataclass
class AttackResult:
    delta: np.ndarray
    adversarial_image: np.ndarray
    loss_trace: list
    grad_norm_trace: list
    rgm_used: np.ndarray | None
    target_image: np.ndarray | None
    metadata: dict
    grad_trace: list | None = None
    fresh_grad_trace: list | None = None


def rga_loss(y_a, y_s, y_g, lambda_=1.0, mode=NormMode.NORM_PRODUCT):
    """cos(y_a, y_s) - lambda * cos(y_a, y_g), differentiable in y_a."""
    y_a = y_a if isinstance(y_a, Tensor) else Tensor(y_a)
    return sub_scaled(
        cosine_similarity(y_a, _const_like(y_s, y_a), mode),
        cosine_similarity(y_a, _const_like(y_g, y_a), mode),
        lambda_,
    )


def sub_scaled(a, b, scale):
    return a - b * float(scale)


def _const_like(v, like):
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v), dtype=like.data.dtype)


def make_target(kind, x, masks, sad, rng, sample_pool=None):
    """Target image for the guidance term, one of the supported kinds."""
    x = np.asarray(x, dtype=np.float32)
    h, w, _ = x.shape
    if kind is TargetKind.BLACK:
        return np.zeros_like(x)
    if kind is TargetKind.WHITE:
        return np.ones_like(x)
    if kind is TargetKind.RANDOM_NOISE:
        return rng.random((h, w, 3)).astype(np.float32)
    if kind is TargetKind.SAMPLE_IMAGE:
        if not sample_pool:
            raise ValueError("sample-image target requires a nonempty sample pool")
        pick = sample_pool[int(rng.integers(0, len(sample_pool)))]
        pick = np.asarray(pick, dtype=np.float32)
        if pick.shape[:2] != (h, w):
            t = transforms.resize_bilinear(Tensor(pick), h, w)
            pick = t.data
        return pick
    if kind is TargetKind.RGM:
        if not masks:
            raise ValueError("rgm target requires a nonempty mask set")
        return regions.build_rgm(masks, sad)
    raise ValueError(f"unknown target kind {kind!r}")


def _loss_and_cotangent(y_a, y_s, y_g, lambda_, mode):
    """Loss value at the feature point plus d(loss)/d(features)."""
    leaf = Tensor(y_a)
    if y_g is None:
        loss = cosine_similarity(leaf, Tensor(y_s), mode)
    else:
        loss = rga_loss(leaf, Tensor(y_s), Tensor(y_g), lambda_, mode)
    cot = backward(loss, leaf)
    return float(loss.data.reshape(())), cot


def _iteration_gradient(victim, x_bar, cfg, rng_tf, y_s, y_g, lambda_, variant):
    """Mean loss over the diversity copies of the current iterate and its
    gradient with respect to the iterate.

    Copies per variant: "rga" warps once with a fresh random similarity
    transform then takes the intensity-scaled copies; "dim" applies the
    random resize-and-pad; "plain" uses the iterate as is. The gradient is
    assembled by chaining each copy's encoder VJP through the transform
    graph with an inner-product pseudo-loss, which is exact because the
    encoder VJPs enter linearly.
    """
    leaf = Tensor(x_bar)
    if variant == "rga":
        h, w, _ = x_bar.shape
        t = transforms.sample_rst(rng_tf, cfg.transform, w, h)
        warped = transforms.warp(leaf, t)
        copies = transforms.scale_copies(warped, cfg.transform.si_scales)
    elif variant == "dim":
        copies = [transforms.dim_transform(rng_tf, leaf, cfg.transform)]
    elif variant == "plain":
        copies = [leaf]
    else:
        raise ValueError(f"unknown variant {variant!r}")

    loss_sum = 0.0
    pseudo = None
    for u in copies:
        y_a = victim.encode(u.data)
        loss_val, cot = _loss_and_cotangent(y_a, y_s, y_g, lambda_, cfg.norm_mode)
        loss_sum += loss_val
        du = victim.encode_vjp(u.data, cot)
        term = tsum(u * Tensor(du, dtype=u.data.dtype))
        pseudo = term if pseudo is None else pseudo + term
    pseudo = pseudo * (1.0 / len(copies))
    grad = backward(pseudo, leaf)
    return loss_sum / len(copies), grad


def _run_attack(victim, x, cfg, variant, use_rgm):
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"images are H x W x 3, got shape {x.shape}")
    eps = np.float32(cfg.epsilon)
    alpha = np.float32(cfg.alpha)
    mu = np.float32(cfg.mu)
    lower = x - eps
    upper = x + eps

    rng_init = derive_rng(cfg.seed, _KEY_INIT)
    rng_target = derive_rng(cfg.seed, _KEY_TARGET)
    rng_tf = derive_rng(cfg.seed, _KEY_TRANSFORM)

    metadata = {
        "variant": variant,
        "use_rgm": use_rgm,
        "fallback_random_noise": False,
        "degenerate_target_features": False,
    }

    rgm_used = None
    target = None
    y_g = None
    y_s = victim.encode(x)
    if use_rgm:
        kind = cfg.target_kind
        if kind is TargetKind.RGM:
            masks = victim.segment_everything(x)
            if not masks:
                warnings.warn("empty mask set; falling back to a random-noise target",
                              RuntimeWarning, stacklevel=3)
                metadata["fallback_random_noise"] = True
                kind = TargetKind.RANDOM_NOISE
                target = make_target(kind, x, [], cfg.sad, rng_target)
            else:
                target = make_target(kind, x, masks, cfg.sad, rng_target)
                rgm_used = target
        else:
            target = make_target(kind, x, None, cfg.sad, rng_target)
        y_g = victim.encode(target)
        if float(np.linalg.norm(y_g)) < DIV_GUARD:
            # a featureless target gives the guidance term no direction
            warnings.warn("target features are degenerate; dropping the guidance term",
                          RuntimeWarning, stacklevel=3)
            metadata["degenerate_target_features"] = True
            y_g = None

    noise = rng_init.uniform(-cfg.epsilon, cfg.epsilon, size=x.shape).astype(np.float32)
    x_bar = np.clip(x + noise, 0.0, 1.0).astype(np.float32)

    g = np.zeros_like(x)
    loss_trace = []
    grad_norm_trace = []
    grad_trace = [] if cfg.record_grad_tensors else None
    fresh_trace = [] if cfg.record_grad_tensors else None

    for _ in range(cfg.iters):
        loss_val, dloss = _iteration_gradient(
            victim, x_bar, cfg, rng_tf, y_s, y_g, cfg.lambda_, variant
        )
        g_prime = -dloss  # ascend the negated loss: away from source, toward target
        if cfg.l1_normalize_grad:
            g_prime = g_prime / np.float32(max(float(np.abs(g_prime).sum()), DIV_GUARD))
        g = mu * g + g_prime
        x_bar = np.clip(np.clip(x_bar + alpha * np.sign(g), lower, upper), 0.0, 1.0)
        loss_trace.append(loss_val)
        grad_norm_trace.append(float(np.linalg.norm(g)))
        if cfg.record_grad_tensors:
            grad_trace.append(g.copy())
            fresh_trace.append(g_prime.copy())

    delta = x_bar - x
    return AttackResult(
        delta=delta,
        adversarial_image=np.clip(x + delta, 0.0, 1.0).astype(np.float32),
        loss_trace=loss_trace,
        grad_norm_trace=grad_norm_trace,
        rgm_used=rgm_used,
        target_image=target,
        metadata=metadata,
        grad_trace=grad_trace,
        fresh_grad_trace=fresh_trace,
    )


def rga_attack(victim, x, cfg):
    """Full attack: one segmentation query builds the target map, then
    momentum sign steps through random similarity transforms with
    scale-invariant gradient averaging."""
    return _run_attack(victim, x, cfg, variant="rga", use_rgm=True)


def mim_attack(victim, x, cfg, use_rgm=False):
    """Momentum iterative baseline: no input diversity. With use_rgm the
    loss keeps the guidance term, otherwise it is plain feature divergence."""
    return _run_attack(victim, x, cfg, variant="plain", use_rgm=use_rgm)


def dim_attack(victim, x, cfg, use_rgm=False):
    """Diverse-input baseline: resize-and-pad before each encoding."""
    return _run_attack(victim, x, cfg, variant="dim", use_rgm=use_rgm)


def noise_baseline(x, epsilon, rng):
    """Uniform noise in the same budget, no optimization (control condition)."""
    x = np.asarray(x, dtype=np.float32)
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must be in [0, 1], got {epsilon}")
    noise = rng.uniform(-epsilon, epsilon, size=x.shape).astype(np.float32)
    adv = np.clip(x + noise, 0.0, 1.0).astype(np.float32)
    delta = adv - x
    return AttackResult(
        delta=delta,
        adversarial_image=adv,
        loss_trace=[],
        grad_norm_trace=[],
        rgm_used=None,
        target_image=None,
        metadata={"variant": "noise", "use_rgm": False,
                  "fallback_random_noise": False,
                  "degenerate_target_features": False},
    )
