"""Encoders, decoder, the full training objective and the training loop."""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import ModelConfig, RunConfig
from .datagen import Dataset, ground_truth_mask
from .distributions import (LOG_2PI, DiagGaussian, kl_to_standard, reparameterize,
                            total_correlation_terms)
from .invhead import InvertibleHead, l3_loss, predict
from .maskpool import Aggregator, MaskMatrix, aggregate, geometric_tau, sample_mask, sparsity_loss
from .nn import MLP, Adam, prefixed
from .numcore import DomainError, NumericalError, Rng, ShapeError, Tensor, as_tensor, concat, sigmoid, softplus, square

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CVAECKPT"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CorrVAE:
    """Property encoder q(w|x), object encoder q(z|x), decoder p(x|w,z),
    mask pooling layer and invertible property head."""

    def __init__(self, cfg: ModelConfig, d_x: int, property_names, rng: Rng,
                 gt_mask: np.ndarray | None = None):
        self.cfg = cfg
        self.d_x = d_x
        self.property_names = tuple(property_names)
        self.m = len(self.property_names)
        l, dz, H = cfg.l, cfg.d_z, cfg.hidden
        self.property_encoder = MLP([d_x, H, H, 2 * l], rng.child(1), "relu", zero_last=True)
        self.object_encoder = MLP([d_x, H, H, 2 * dz], rng.child(2), "relu", zero_last=True)
        self.decoder = MLP([l + dz, H, H, d_x], rng.child(3), "relu", zero_last=True)
        self.mask = MaskMatrix.init(l, self.m, logit=cfg.mask_init_logit)
        self.aggregator = Aggregator(l, self.m, rng.child(4), hidden=cfg.agg_hidden,
                                     linear=cfg.aggregator == "linear")
        self.head = InvertibleHead(self.m, rng.child(5), hidden=cfg.head_hidden,
                                   n_hidden=cfg.head_layers, c=cfg.head_c,
                                   activation=cfg.head_activation)
        self.gt_mask = (ground_truth_mask(self.property_names, l) if gt_mask is None
                        else np.asarray(gt_mask, dtype=np.float64))
        # warm-start the power iteration so the first step is already normalized
        self.head.normalize(50)

    @property
    def l(self) -> int:
        return self.cfg.l

    @property
    def d_z(self) -> int:
        return self.cfg.d_z

    @property
    def fixed_mask(self) -> bool:
        return self.cfg.mask_mode == "ground_truth"

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(prefixed("property_encoder", self.property_encoder.parameters()))
        params.update(prefixed("object_encoder", self.object_encoder.parameters()))
        params.update(prefixed("decoder", self.decoder.parameters()))
        if not self.fixed_mask:
            params["mask.logits"] = self.mask.logits
        params.update(prefixed("aggregator", self.aggregator.parameters()))
        params.update(prefixed("head", self.head.parameters()))
        return params

    # -- forward pieces ----------------------------------------------------
    def encode(self, x) -> tuple[DiagGaussian, DiagGaussian]:
        x = as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.d_x:
            raise ShapeError(f"x must be (batch, {self.d_x}), got {x.shape}")
        if x.data.min() < 0 or x.data.max() > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        hw = self.property_encoder(x)
        hz = self.object_encoder(x)
        l, dz = self.l, self.d_z
        return (DiagGaussian(hw[:, :l], hw[:, l:]), DiagGaussian(hz[:, :dz], hz[:, dz:]))

    def decode_logits(self, w, z) -> Tensor:
        w, z = as_tensor(w), as_tensor(z)
        if w.shape[-1] != self.l or z.shape[-1] != self.d_z:
            raise ShapeError(f"decoder expects widths ({self.l}, {self.d_z}), got "
                             f"({w.shape[-1]}, {z.shape[-1]})")
        return self.decoder(concat([w, z], axis=1))

    def decode(self, w, z) -> np.ndarray:
        """Per-pixel Bernoulli probabilities."""
        return sigmoid(self.decode_logits(w, z)).data

    def current_mask(self, rng: Rng | None = None) -> Tensor | np.ndarray:
        """Training mask (relaxed sample) when rng is given, else the hard mask."""
        if self.fixed_mask:
            return self.gt_mask
        if rng is None:
            return self.mask.hard_mask()
        return sample_mask(self.mask, rng)

    def hard_mask(self) -> np.ndarray:
        return self.gt_mask.copy() if self.fixed_mask else self.mask.hard_mask()

    def bridge(self, w, mask=None) -> Tensor:
        return aggregate(w, self.hard_mask() if mask is None else mask, self.aggregator)

    def predict_properties(self, w, mask=None) -> Tensor:
        return predict(self.head, self.bridge(w, mask))

    def predict_from_images(self, x: np.ndarray) -> np.ndarray:
        qw, _ = self.encode(x)
        return self.predict_properties(qw.mu.data).data


@dataclass
class LossBreakdown:
    recon: Tensor
    prop_nll: Tensor
    kl: Tensor
    tc_zw: Tensor
    tc_w: Tensor
    l3: Tensor
    mask_l1: Tensor
    total: Tensor

    def floats(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name).item() for f in fields(self)}


LOSS_FIELDS = tuple(f.name for f in fields(LossBreakdown))


def _term(name: str, fn: Callable[[], Tensor]) -> Tensor:
    try:
        return fn()
    except (NumericalError, DomainError) as exc:
        raise TrainingError(f"non-finite value in loss term {name!r}: {exc}") from exc


def gaussian_nll(pred: Tensor, y) -> Tensor:
    """Batch mean of -sum_i log N(y_i | pred_i, 1)."""
    per_row = square(as_tensor(y) - pred).sum(axis=1) * 0.5 + 0.5 * pred.shape[1] * LOG_2PI
    return per_row.mean()


def objective(model: CorrVAE, x, y, rng: Rng, loss_cfg, dataset_size: int) -> LossBreakdown:
    """Full loss for one minibatch; assumes ``model.head.normalize`` ran this step.

    prop_nll and l3 both score the properties from the sampled w through the
    same sampled mask. With unit noise they coincide in value; they are kept
    as separate terms so each can be weighted and logged on its own.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape[0] < 2:
        raise ValueError("objective needs a batch of at least 2 (total correlation)")
    if y.shape != (x.shape[0], model.m):
        raise ShapeError(f"y must be ({x.shape[0]}, {model.m}), got {y.shape}")
    qw, qz = model.encode(x)
    b = x.shape[0]
    w = reparameterize(qw, rng.normal((b, model.l)))
    z = reparameterize(qz, rng.normal((b, model.d_z)))
    M = model.current_mask(rng)

    def recon_term():
        logits = model.decode_logits(w, z)
        return (softplus(logits) - x * logits).sum(axis=1).mean()

    recon = _term("recon", recon_term)
    prop_nll = _term("prop_nll", lambda: gaussian_nll(predict(model.head, aggregate(w, M, model.aggregator)), y))
    kl = _term("kl", lambda: kl_to_standard(qw) + kl_to_standard(qz))
    tc_zw, tc_w = _term("tc", lambda: total_correlation_terms(w, z, qw, qz, dataset_size))
    l3 = _term("l3", lambda: l3_loss(model.head, aggregate(w, M, model.aggregator), y))
    mask_l1 = Tensor(0.0) if model.fixed_mask else sparsity_loss(model.mask)
    total = _term("total", lambda: (recon + prop_nll + kl + tc_zw * loss_cfg.rho1 + tc_w * loss_cfg.rho2
                                    + l3 * loss_cfg.lambda3 + mask_l1 * loss_cfg.lambda_mask))
    return LossBreakdown(recon, prop_nll, kl, tc_zw, tc_w, l3, mask_l1, total)


# -- training --------------------------------------------------------------
METRIC_COLUMNS = ("epoch", "tau") + LOSS_FIELDS + ("max_spectral_norm",)


@dataclass
class TrainResult:
    model: CorrVAE
    metrics: list[dict]
    checkpoint: Path | None = None


def build_model(cfg: RunConfig, dataset: Dataset) -> CorrVAE:
    return CorrVAE(cfg.model, dataset.N * dataset.N, dataset.property_names,
                   Rng(cfg.train.seed, 0))


def train(dataset: Dataset, cfg: RunConfig, out_dir: str | Path | None = None,
          model: CorrVAE | None = None, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam training with a geometric temperature anneal.

    Writes ``metrics.csv`` (one row per epoch) and ``model.ckpt`` under
    ``out_dir`` when given. Deterministic for a fixed ``cfg.train.seed``.
    """
    tc = cfg.train
    model = model or build_model(cfg, dataset)
    x_all = dataset.flat_images()
    y_all = dataset.properties
    n = len(dataset)
    if n < tc.batch_size:
        raise ValueError(f"dataset of {n} is smaller than one batch of {tc.batch_size}")
    steps_per_epoch = n // tc.batch_size
    total_steps = steps_per_epoch * tc.epochs
    lr_overrides = {"mask.": tc.lr_mask} if tc.lr_mask > 0 else None
    opt = Adam(model.parameters(), lr=tc.lr, lr_overrides=lr_overrides)
    data_rng = Rng(tc.seed, 1)

    out_path = Path(out_dir) if out_dir else None
    metrics: list[dict] = []
    step = 0
    for epoch in range(tc.epochs):
        perm = data_rng.child(epoch).permutation(n)
        sums = dict.fromkeys(LOSS_FIELDS, 0.0)
        max_sn = 0.0
        for b in range(steps_per_epoch):
            idx = perm[b * tc.batch_size:(b + 1) * tc.batch_size]
            model.mask.tau = geometric_tau(step, total_steps, tc.tau_start, tc.tau_end)
            model.head.normalize(tc.power_iters)
            max_sn = max(max_sn, max(model.head.spectral_norms()))
            loss = objective(model, x_all[idx], y_all[idx], Rng(tc.seed, 2, step), cfg.loss, n)
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            for k, v in loss.floats().items():
                sums[k] += v
            step += 1
        row = {"epoch": epoch, "tau": model.mask.tau}
        row.update({k: v / steps_per_epoch for k, v in sums.items()})
        row["max_spectral_norm"] = max_sn
        metrics.append(row)
        log.info("epoch %d total %.4f recon %.3f prop %.5f l3 %.5f", epoch, row["total"],
                 row["recon"], row["prop_nll"], row["l3"])
        if on_epoch:
            on_epoch(row)

    model.head.normalize(tc.certify_iters)
    model.mask.hard = True
    ckpt = None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
        write_metrics(metrics, out_path / "metrics.csv")
        # the output location is not part of the run's identity
        settings = {k: v for k, v in cfg.to_flat().items() if k != "out"}
        ckpt = save_checkpoint(model, out_path / "model.ckpt", extra={"config": settings})
    return TrainResult(model, metrics, ckpt)


def write_metrics(metrics: list[dict], path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for row in metrics:
            writer.writerow([row[c] if c == "epoch" else repr(float(row[c])) for c in METRIC_COLUMNS])
    return path


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


# -- checkpoints -----------------------------------------------------------
def _state(model: CorrVAE) -> dict[str, np.ndarray]:
    state = {k: p.data for k, p in model.parameters().items()}
    state["mask.logits"] = model.mask.logits.data
    for i, u in enumerate(model.head.u):
        state[f"head.power_u.{i}"] = u
    state["head.sigma_hat"] = np.array(model.head.sigmas)
    state["head.noise_cov"] = model.head.sigma
    state["gt_mask"] = model.gt_mask
    return state


def save_checkpoint(model: CorrVAE, path: str | Path, extra: dict | None = None) -> Path:
    """Versioned header (JSON) followed by named little-endian float64 blobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "version": CKPT_VERSION,
        "package_version": __version__,
        "model": asdict(model.cfg),
        "d_x": model.d_x,
        "property_names": list(model.property_names),
        "tau": model.mask.tau,
        "spectral_norms": model.head.spectral_norms(),
    }
    header.update(extra or {})
    blob = json.dumps(header, sort_keys=True).encode()
    state = _state(model)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype="<f8")
            key = name.encode()
            fh.write(struct.pack("<H", len(key)) + key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path} is not a CorrVAE checkpoint")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 16
    header = json.loads(raw[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    state = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + klen].decode()
        off += klen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=off).reshape(shape).copy()
        off += 8 * size
    return header, state


def load_checkpoint(path: str | Path) -> CorrVAE:
    header, state = read_checkpoint(path)
    cfg = ModelConfig(**header["model"])
    model = CorrVAE(cfg, header["d_x"], header["property_names"], Rng(0), gt_mask=state["gt_mask"])
    params = model.parameters()
    for name, p in params.items():
        if state[name].shape != p.shape:
            raise ValueError(f"checkpoint tensor {name} has shape {state[name].shape}, expected {p.shape}")
        p.data = state[name]
    model.mask.logits.data = state["mask.logits"]
    model.head.u = [state[f"head.power_u.{i}"] for i in range(len(model.head.layers))]
    model.head.sigma = state["head.noise_cov"]
    model.head.freeze(list(state["head.sigma_hat"]))
    model.mask.tau = header["tau"]
    model.mask.hard = True
    return model
