"""Probabilistic segmentation network with a flow-augmented posterior.

Three dense networks share one parameter dictionary:

* prior ``p(z | x)``: image -> (mu, sigma)
* posterior ``q(z0 | x, s)``: image and mask -> (mu, sigma, context); one
  linear head per flow step turns the context into that step's raw flow
  parameters, so every example gets its own flow.
* decoder ``p(s | z, x)``: image features and latent -> per-pixel logits,
  plus a per-pixel gain on the raw image (a skip connection).

Images and masks are handled flattened, ``(B, H*W)``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import metrics
from .autodiff import DomainError, Tensor, backward, concat
from .distributions import DiagonalGaussian, kl_diag_gaussians, log_prob, sample_reparameterized
from .flows import (
    FlowChain,
    PlanarParams,
    RadialParams,
    SingularJacobianError,
    chain_forward,
)
from .synthdata import Dataset, split_folds

logger = logging.getLogger(__name__)

FLOW_TYPES = ("none", "planar", "radial")


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, fold: int, epoch: int, part: str):
        super().__init__(f"fold {fold}: non-finite {part} loss at epoch {epoch}")
        self.fold = fold
        self.epoch = epoch
        self.part = part


@dataclass
class ModelConfig:
    latent_dim: int = 6
    flow_type: str = "none"
    flow_steps: int = 0
    image_size: int = 16
    hidden_width: int = 64
    context_width: int = 16
    learning_rate: float = 1e-4
    batch_size: int = 32
    patience: int = 20
    max_epochs: int = 200
    folds: int = 10
    eval_samples: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.flow_type not in FLOW_TYPES:
            raise ValueError(f"flow_type must be one of {FLOW_TYPES}, got {self.flow_type!r}")
        if self.flow_steps < 0:
            raise ValueError("flow_steps must be >= 0")
        if (self.flow_type == "none") != (self.flow_steps == 0):
            raise ValueError(
                f"flow_type={self.flow_type!r} is inconsistent with flow_steps={self.flow_steps}; "
                "use flow_type=none exactly when flow_steps=0")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.eval_samples < 2:
            raise ValueError("eval_samples must be >= 2 (GED needs sample pairs)")
        for name in ("image_size", "hidden_width", "context_width", "batch_size", "max_epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    @property
    def num_pixels(self) -> int:
        return self.image_size * self.image_size

    @property
    def flow_param_width(self) -> int:
        L = self.latent_dim
        return 2 * L + 1 if self.flow_type == "planar" else L + 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


Params = dict  # ordered name -> Tensor


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in declaration order."""
    P, H, L, C = cfg.num_pixels, cfg.hidden_width, cfg.latent_dim, cfg.context_width
    shapes = [
        ("prior.w1", (P, H)), ("prior.b1", (H,)),
        ("prior.w2", (H, 2 * L)), ("prior.b2", (2 * L,)),
        ("post.w1", (2 * P, H)), ("post.b1", (H,)),
        ("post.w2", (H, 2 * L + C)), ("post.b2", (2 * L + C,)),
    ]
    for k in range(cfg.flow_steps):
        shapes += [(f"flow{k}.w", (C, cfg.flow_param_width)), (f"flow{k}.b", (cfg.flow_param_width,))]
    shapes += [
        ("dec.we", (P, H)), ("dec.be", (H,)),
        ("dec.wh", (H + L, H)), ("dec.bh", (H,)),
        ("dec.wo", (H, P)), ("dec.bo", (P,)),
        ("dec.skip", (P,)),
    ]
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    params: Params = {}
    L = cfg.latent_dim
    for name, shape in param_shapes(cfg):
        if len(shape) == 2:
            val = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), size=shape)
            if name.startswith("flow"):
                val *= 0.1
        else:
            val = np.zeros(shape)
            if name.startswith("flow") and cfg.flow_type == "planar":
                # keep every w away from zero so the u-correction is well scaled
                val[L:2 * L] = rng.normal(0.0, 1.0, size=L)
        params[name] = Tensor(val, requires_grad=True)
    return params


def zero_params(cfg: ModelConfig) -> Params:
    return {name: Tensor(np.zeros(shape), requires_grad=True) for name, shape in param_shapes(cfg)}


def _dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return x @ w + b


def _flat(cfg: ModelConfig, a) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    P = cfg.num_pixels
    if arr.shape[-2:] == (cfg.image_size, cfg.image_size) and arr.ndim >= 2 and arr.shape[-1] != P:
        arr = arr.reshape(arr.shape[:-2] + (P,))
    if arr.shape[-1] != P:
        raise ValueError(f"expected {cfg.image_size}x{cfg.image_size} inputs, got shape {arr.shape}")
    return arr


def prior_forward(params: Params, cfg: ModelConfig, x) -> DiagonalGaussian:
    x = Tensor(_flat(cfg, x))
    L = cfg.latent_dim
    h = _dense(x, params["prior.w1"], params["prior.b1"]).tanh()
    out = _dense(h, params["prior.w2"], params["prior.b2"])
    return DiagonalGaussian.from_raw(out[..., :L], out[..., L:])


def posterior_forward(params: Params, cfg: ModelConfig, x, s) -> tuple[DiagonalGaussian, FlowChain]:
    x = _flat(cfg, x)
    s = _flat(cfg, s)
    L = cfg.latent_dim
    xs = Tensor(np.concatenate([x, s], axis=-1))
    h = _dense(xs, params["post.w1"], params["post.b1"]).tanh()
    out = _dense(h, params["post.w2"], params["post.b2"])
    base = DiagonalGaussian.from_raw(out[..., :L], out[..., L:2 * L])
    context = out[..., 2 * L:].tanh()
    steps = []
    for k in range(cfg.flow_steps):
        raw = _dense(context, params[f"flow{k}.w"], params[f"flow{k}.b"])
        if cfg.flow_type == "planar":
            steps.append(PlanarParams(raw[..., :L], raw[..., L:2 * L], raw[..., 2 * L:]))
        else:
            steps.append(RadialParams(raw[..., :L], raw[..., L:L + 1], raw[..., L + 1:]))
    return base, FlowChain(steps)


def context_vector(params: Params, cfg: ModelConfig, x, s) -> np.ndarray:
    x = _flat(cfg, x)
    s = _flat(cfg, s)
    L = cfg.latent_dim
    h = np.tanh(np.concatenate([x, s], axis=-1) @ params["post.w1"].data + params["post.b1"].data)
    out = h @ params["post.w2"].data + params["post.b2"].data
    return np.tanh(out[..., 2 * L:])


def decode(params: Params, cfg: ModelConfig, x, z) -> Tensor:
    """Per-pixel foreground logits for images ``x`` and latents ``z``."""
    xt = Tensor(_flat(cfg, x))
    feat = _dense(xt, params["dec.we"], params["dec.be"]).tanh()
    h = _dense(concat([feat, z], axis=-1), params["dec.wh"], params["dec.bh"]).tanh()
    return _dense(h, params["dec.wo"], params["dec.bo"]) + xt * params["dec.skip"]


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Elementwise binary cross-entropy, stable for large |logits|."""
    return logits.softplus() - logits * Tensor(target)


def elbo_loss(params: Params, cfg: ModelConfig, x, s, noise, kl: str = "mc"):
    """Single-sample estimate of the flow-corrected negative ELBO.

    ``x``, ``s`` are one example (or a batch) and ``noise`` the standard-normal
    draw(s) for the reparameterized posterior sample.  Returns the batch-mean
    loss Tensor and a dict of batch-mean parts ``recon``, ``kl``, ``logdet``.

    With ``kl="closed"`` the KL term uses the analytic diagonal-Gaussian form,
    which is only available without flow steps.
    """
    x = _flat(cfg, x)
    s = _flat(cfg, s)
    noise = np.asarray(noise, dtype=np.float64)
    if x.ndim == 1:
        x, s, noise = x[None], s[None], noise[None]
    if noise.shape != (x.shape[0], cfg.latent_dim):
        raise ValueError(f"noise must have shape {(x.shape[0], cfg.latent_dim)}, got {noise.shape}")
    prior = prior_forward(params, cfg, x)
    q0, chain = posterior_forward(params, cfg, x, s)
    z0 = sample_reparameterized(q0, noise)
    zk, logdet = chain_forward(chain, z0)
    recon = bce_with_logits(decode(params, cfg, x, zk), s).sum(axis=-1)
    if kl == "mc":
        kl_term = log_prob(q0, z0) - logdet - log_prob(prior, zk)
    elif kl == "closed":
        if cfg.flow_steps:
            raise ValueError("closed-form KL is only defined without flow steps")
        kl_term = kl_diag_gaussians(q0, prior)
    else:
        raise ValueError(f"kl must be 'mc' or 'closed', got {kl!r}")
    loss = (recon + kl_term).mean()
    parts = {
        "recon": float(recon.data.mean()),
        "kl": float(kl_term.data.mean()),
        "logdet": float(logdet.data.mean()),
    }
    return loss, parts


# -- optimisation ----------------------------------------------------------------


class Adam:
    def __init__(self, params: Params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class FoldResult:
    params: Params
    history: list = field(default_factory=list)
    best_epoch: int = 0


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "recon", "kl", "logdet")


def _copy_params(params: Params) -> Params:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def _check_finite(loss: Tensor, parts: dict, fold: int, epoch: int) -> None:
    if np.isfinite(loss.data):
        return
    for name in ("recon", "kl", "logdet"):
        if not np.isfinite(parts[name]):
            raise DivergenceError(fold, epoch, name)
    raise DivergenceError(fold, epoch, "total")


def _flatten_data(cfg: ModelConfig, data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    X = data.images.reshape(len(data), -1).astype(np.float64)
    M = data.masks.reshape(len(data), data.spec.num_annotators, -1).astype(np.float64)
    if X.shape[1] != cfg.num_pixels:
        raise ValueError(
            f"model expects {cfg.image_size}x{cfg.image_size} images, dataset has side {data.spec.size}")
    return X, M


def validation_loss(params: Params, cfg: ModelConfig, X, M, noise) -> float:
    """Mean loss over every (example, annotator) pair with fixed noise."""
    n, a, P = M.shape
    loss, _ = elbo_loss(params, cfg, np.repeat(X, a, axis=0), M.reshape(n * a, P),
                        noise.reshape(n * a, -1))
    return float(loss.data)


def train_fold(
    train: Dataset,
    val: Dataset,
    cfg: ModelConfig,
    fold: int = 0,
    params: Params | None = None,
    epoch_callback: Callable[[dict], None] | None = None,
) -> FoldResult:
    """Fit one model with Adam and early stopping on the validation loss.

    Each step draws one annotator mask per image uniformly at random.  The
    parameters from the best validation epoch are returned.  ``patience <= 0``
    disables early stopping.
    """
    rng = np.random.default_rng([cfg.seed, fold])
    if params is None:
        params = init_params(cfg, rng)
    X, M = _flatten_data(cfg, train)
    Xv, Mv = _flatten_data(cfg, val)
    val_noise = rng.standard_normal((len(val), val.spec.num_annotators, cfg.latent_dim))
    opt = Adam(params, cfg.learning_rate)
    n, a = M.shape[:2]
    best = math.inf
    best_params = _copy_params(params)
    best_epoch = 0
    wait = 0
    history = []
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        sums = np.zeros(4)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            ann = rng.integers(a, size=len(idx))
            noise = rng.standard_normal((len(idx), cfg.latent_dim))
            opt.zero_grad()
            try:
                loss, parts = elbo_loss(params, cfg, X[idx], M[idx, ann], noise)
            except (DomainError, SingularJacobianError):
                raise DivergenceError(fold, epoch, "flow") from None
            _check_finite(loss, parts, fold, epoch)
            backward(loss)
            opt.step()
            sums += len(idx) * np.array([float(loss.data), parts["recon"], parts["kl"], parts["logdet"]])
        sums /= n
        vloss = validation_loss(params, cfg, Xv, Mv, val_noise)
        if not np.isfinite(vloss):
            raise DivergenceError(fold, epoch, "validation")
        row = dict(zip(HISTORY_COLUMNS, (epoch, sums[0], vloss, sums[1], sums[2], sums[3])))
        history.append(row)
        if epoch_callback is not None:
            epoch_callback(row)
        if vloss < best:
            best, best_epoch, wait = vloss, epoch, 0
            best_params = _copy_params(params)
        else:
            wait += 1
            if cfg.patience > 0 and wait >= cfg.patience:
                logger.info("fold %d: early stop at epoch %d (best %d)", fold, epoch, best_epoch)
                break
    return FoldResult(best_params, history, best_epoch)


@dataclass
class CrossValidationResult:
    folds: list
    test_indices: np.ndarray
    splits: list


def train(data: Dataset, cfg: ModelConfig) -> CrossValidationResult:
    """k-fold training; a fixed ~10% of the data is held out for testing."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    splits, test = split_folds(data, cfg.folds, cfg.seed)
    results = []
    for k, (tr, va) in enumerate(splits):
        results.append(train_fold(data.subset(tr), data.subset(va), cfg, fold=k))
    return CrossValidationResult(results, test, splits)


# -- inference -------------------------------------------------------------------


def sample_probabilities(params: Params, cfg: ModelConfig, x, n: int, rng: np.random.Generator,
                         noise: np.ndarray | None = None) -> np.ndarray:
    """Foreground probability maps for ``n`` prior samples, shape (n, H*W)."""
    if n < 1:
        raise ValueError("need at least one sample")
    x = _flat(cfg, x).reshape(1, -1)
    prior = prior_forward(params, cfg, x)
    if noise is None:
        noise = rng.standard_normal((n, cfg.latent_dim))
    z = prior.mu.data + prior.sigma.data * noise
    logits = decode(params, cfg, np.repeat(x, n, axis=0), Tensor(z))
    return logits.sigmoid().data


def predict_samples(params: Params, cfg: ModelConfig, x, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` binary masks (n, H, W) decoded from prior samples."""
    probs = sample_probabilities(params, cfg, x, n, rng)
    return (probs > 0.5).astype(np.uint8).reshape(n, cfg.image_size, cfg.image_size)


def mean_std_maps(params: Params, cfg: ModelConfig, x, n: int, rng: np.random.Generator):
    """Per-pixel mean and population std of ``n`` sampled probability maps."""
    if n < 2:
        raise ValueError("mean/std maps need at least two samples")
    probs = sample_probabilities(params, cfg, x, n, rng)
    shape = (cfg.image_size, cfg.image_size)
    return probs.mean(axis=0).reshape(shape), probs.std(axis=0).reshape(shape)


def prior_variance_score(params: Params, cfg: ModelConfig, x) -> np.ndarray | float:
    """Mean latent prior variance; one value per image when given a batch."""
    arr = _flat(cfg, x)
    prior = prior_forward(params, cfg, arr)
    score = (prior.sigma.data**2).mean(axis=-1)
    return float(score) if arr.ndim == 1 else score


def evaluate(params: Params, cfg: ModelConfig, data: Dataset, indices, rng: np.random.Generator,
             iou_mode: str = "auto") -> dict:
    """Test-set metrics for one trained model, averaged over images.

    ``ged_excl`` skips images where the excluding GED is undefined.
    ``iou_mode`` is ``hungarian`` (multi-annotator), ``average`` (single
    annotator) or ``auto``.
    """
    a = data.spec.num_annotators
    if iou_mode == "auto":
        iou_mode = "hungarian" if a > 1 else "average"
    if iou_mode == "average" and a != 1:
        raise ValueError(f"average IoU requires one annotator, dataset has {a}")
    if iou_mode == "hungarian" and cfg.eval_samples % a:
        raise ValueError(f"eval_samples={cfg.eval_samples} must be a multiple of {a} annotators")
    incl, excl, ious = [], [], []
    for i in indices:
        ex = data[int(i)]
        Y = predict_samples(params, cfg, ex.image, cfg.eval_samples, rng)
        S = ex.masks
        incl.append(metrics.ged_squared(S, Y, metrics.EmptyPolicy.INCLUDE_AS_ONE))
        try:
            excl.append(metrics.ged_squared(S, Y, metrics.EmptyPolicy.EXCLUDE))
        except metrics.UndefinedMetricError:
            pass
        if iou_mode == "hungarian":
            ious.append(metrics.hungarian_matched_iou(S, Y))
        else:
            ious.append(metrics.average_iou(S, Y))
    key = "iou_hungarian" if iou_mode == "hungarian" else "iou_avg"
    return {
        "ged_incl": float(np.mean(incl)),
        "ged_excl": float(np.mean(excl)) if excl else float("nan"),
        key: float(np.mean(ious)),
    }


def summarize_folds(per_fold: list[dict]) -> dict:
    """Mean and population std of each metric across folds."""
    out = {}
    for key in per_fold[0]:
        vals = np.array([f[key] for f in per_fold], dtype=np.float64)
        out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


# -- checkpoints -------------------------------------------------------------------

CHECKPOINT_MAGIC = b"FLOWSEG-CKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: Params, cfg: ModelConfig) -> None:
    """Header line, JSON config/parameter table line, then raw <f8 tensors."""
    table = [[name, list(shape)] for name, shape in param_shapes(cfg)]
    header = json.dumps({"config": cfg.to_dict(), "params": table}, sort_keys=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(header.encode() + b"\n")
        for name, shape in param_shapes(cfg):
            arr = params[name].data
            if arr.shape != shape:
                raise ValueError(f"parameter {name} has shape {arr.shape}, expected {shape}")
            fh.write(arr.astype("<f8").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[Params, ModelConfig]:
    raw = Path(path).read_bytes()
    first, _, rest = raw.partition(b"\n")
    magic, _, version = first.partition(b" ")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if int(version or 0) != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version.decode()}")
    header, _, body = rest.partition(b"\n")
    meta = json.loads(header)
    cfg = ModelConfig.from_dict(meta["config"])
    expected = param_shapes(cfg)
    if [[n, list(s)] for n, s in expected] != meta["params"]:
        raise CheckpointError(f"{path}: parameter table does not match its config")
    total = sum(int(np.prod(s)) for _, s in expected) * 8
    if len(body) != total:
        raise CheckpointError(f"{path}: expected {total} bytes of parameters, found {len(body)}")
    params: Params = {}
    off = 0
    for name, shape in expected:
        count = int(np.prod(shape))
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off).reshape(shape)
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True)
        off += 8 * count
    return params, cfg


__all__ = [
    "ModelConfig",
    "DivergenceError",
    "param_shapes",
    "init_params",
    "zero_params",
    "prior_forward",
    "posterior_forward",
    "context_vector",
    "decode",
    "elbo_loss",
    "validation_loss",
    "Adam",
    "train_fold",
    "train",
    "FoldResult",
    "CrossValidationResult",
    "sample_probabilities",
    "predict_samples",
    "mean_std_maps",
    "prior_variance_score",
    "evaluate",
    "summarize_folds",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
    "HISTORY_COLUMNS",
]
