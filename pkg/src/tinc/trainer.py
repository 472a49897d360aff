"""Pretraining harness.

Builds the encoder/projector (and optional time head), then runs the SSL
loop: sample same-eye visit pairs, augment, forward both views, apply the
configured loss, backpropagate, and update with decoupled weight decay under
a cosine-with-warmup schedule. All randomness is derived statelessly from
(seed, purpose, epoch, batch), so any step boundary is an exact resume point.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from tinc import augment, checkpoint, cohort, losses, nn, optim
from tinc.errors import DivergenceError, ValidationError

logger = logging.getLogger(__name__)

METHODS = ("vicreg", "tinc", "barlow_twins", "vicreg_timehead")
PAIR_MODES = ("two_visit", "same_scan")

_INIT_TAG = 10
_EPOCH_TAG = 11
_BATCH_TAG = 12
_SAME_SCAN_TAG = 13


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "small_cnn"
    representation_dim: int = 64
    projector_dims: tuple = (128, 128, 128)
    time_head_hidden: int = 64
    input_size: tuple = (64, 64)

    def validate(self):
        if self.encoder not in ("small_cnn", "mlp"):
            raise ValidationError(f"unknown encoder {self.encoder!r}")
        dims = (self.representation_dim, self.time_head_hidden,
                *self.projector_dims, *self.input_size)
        if any(d < 1 for d in dims):
            raise ValidationError(f"model dimensions must be positive, got {self}")
        if len(self.projector_dims) != 3:
            raise ValidationError(
                f"projector_dims must be (hidden, hidden, out), got "
                f"{self.projector_dims}")
        return self

    @property
    def embedding_dim(self):
        return self.projector_dims[-1]

    def to_dict(self):
        return {"encoder": self.encoder,
                "representation_dim": self.representation_dim,
                "projector_dims": list(self.projector_dims),
                "time_head_hidden": self.time_head_hidden,
                "input_size": list(self.input_size)}

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["projector_dims"] = tuple(data["projector_dims"])
        data["input_size"] = tuple(data["input_size"])
        return cls(**data)


@dataclass(frozen=True)
class TrainConfig:
    method: str = "tinc"
    batch_size: int = 64
    base_lr: float = 2e-3
    weight_decay: float = 1e-6
    epochs: int = 20
    warmup_epochs: int = 10
    seed: int = 0
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    gap_range_days: tuple = cohort.DEFAULT_GAP_RANGE
    pair_mode: str = "two_visit"
    time_head_weight: float = 1.0
    max_steps: Optional[int] = None
    checkpoint_every: int = 0
    force_zero_dv: bool = False

    def validate(self):
        if self.method not in METHODS:
            raise ValidationError(
                f"unknown method {self.method!r}; valid methods: {METHODS}")
        if self.pair_mode not in PAIR_MODES:
            raise ValidationError(f"unknown pair_mode {self.pair_mode!r}")
        if self.batch_size < 2:
            raise ValidationError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ValidationError(
                f"warmup_epochs ({self.warmup_epochs}) must be < epochs "
                f"({self.epochs})")
        self.loss.validate()
        return self

    def resolved_loss(self):
        """The method determines the similarity variant of the pair loss."""
        if self.method == "tinc":
            if self.loss.similarity_variant == "mse":
                return dataclasses.replace(self.loss, similarity_variant="tinc")
            return self.loss
        return dataclasses.replace(self.loss, similarity_variant="mse")

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["loss"] = dataclasses.asdict(self.loss)
        out["gap_range_days"] = list(self.gap_range_days)
        return out

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["loss"] = losses.LossConfig(**data["loss"])
        data["gap_range_days"] = tuple(data["gap_range_days"])
        return cls(**data)


class TincModel:
    """Encoder + projector (+ optional time head) with shared weights."""

    def __init__(self, model_cfg, seed, with_time_head=False):
        model_cfg.validate()
        self.config = model_cfg
        rng = np.random.default_rng(np.random.SeedSequence((seed, _INIT_TAG)))
        self.encoder = nn.build_encoder(model_cfg.encoder, rng,
                                        model_cfg.input_size,
                                        model_cfg.representation_dim)
        self.projector = nn.build_projector(model_cfg.representation_dim,
                                            model_cfg.projector_dims, rng)
        self.time_head = None
        if with_time_head:
            self.time_head = nn.build_time_head(model_cfg.embedding_dim,
                                                model_cfg.time_head_hidden, rng)

    def parameters(self):
        params = self.encoder.parameters() + self.projector.parameters()
        if self.time_head is not None:
            params += self.time_head.parameters()
        return params

    def _modules(self):
        mods = [self.encoder, self.projector]
        if self.time_head is not None:
            mods.append(self.time_head)
        return mods

    def forward(self, images, training):
        """Images (n, H, W) -> representations (n, r), embeddings (n, d)."""
        x = np.ascontiguousarray(images, dtype=np.float64)[:, None, :, :]
        y, enc_cache = self.encoder.forward(x, training)
        z, proj_cache = self.projector.forward(y, training)
        return y, z, (enc_cache, proj_cache)

    def backward(self, gz, cache, gy_extra=None):
        enc_cache, proj_cache = cache
        gy = self.projector.backward(gz, proj_cache)
        if gy_extra is not None:
            gy = gy + gy_extra
        self.encoder.backward(gy, enc_cache)

    def zero_grad(self):
        for p in self.parameters():
            p.grad[...] = 0.0

    def tensors(self):
        out = {f"param/{p.name}": p.value for p in self.parameters()}
        for module in self._modules():
            for name, buf in module.buffers():
                out[f"buffer/{name}"] = buf
        return out

    def load_tensors(self, tensors):
        for p in self.parameters():
            src = tensors[f"param/{p.name}"]
            if src.shape != p.value.shape:
                raise ValidationError(
                    f"checkpoint incompatible: {p.name} has shape {src.shape}, "
                    f"model expects {p.value.shape}")
            p.value[...] = src
        for module in self._modules():
            for layer in getattr(module, "layers", []):
                if isinstance(layer, nn.BatchNorm1d):
                    layer.set_buffers(tensors[f"buffer/{layer.name}.running_mean"],
                                      tensors[f"buffer/{layer.name}.running_var"])


def embedding_std(z):
    """Mean per-dimension (unbiased) std; the collapse indicator logged per epoch."""
    return float(np.mean(np.std(z, axis=0, ddof=1)))


def _epoch_chunks(n, batch_size):
    """Chunk sizes covering n pairs; a would-be trailing singleton is absorbed
    into the previous chunk so batch statistics stay defined."""
    if n < 2:
        raise ValidationError(f"need at least 2 eligible eyes, got {n}")
    sizes = []
    left = n
    while left > 0:
        take = min(batch_size, left)
        if left - take == 1:
            take += 1
        sizes.append(take)
        left -= take
    return sizes


def _same_scan_batch(manifest, keys, by_key, seed, augmenter):
    """Two independent augmentations of one scan per eye; dv = 0."""
    rng = np.random.default_rng(seed)
    x1, x2 = [], []
    patient_ids = []
    for key in keys:
        patient, eye, _ = by_key[key]
        visit = eye.visits[rng.integers(len(eye.visits))]
        scan = visit.scans[rng.integers(len(visit.scans))]
        path = str(manifest.resolve(scan))
        rng1, rng2 = rng.spawn(2)
        x1.append(augmenter(path, rng1))
        x2.append(augmenter(path, rng2))
        patient_ids.append(patient.id)
    n = len(keys)
    zeros = np.zeros(n)
    return cohort.PairBatch(x1=np.stack(x1), x2=np.stack(x2), dv=zeros.copy(),
                            delta_signed=zeros.copy(), patient_ids=patient_ids,
                            eye_ids=list(keys), day1=np.zeros(n, dtype=np.int64),
                            day2=np.zeros(n, dtype=np.int64))


@dataclass
class PretrainResult:
    model: TincModel
    optimizer: optim.AdamW
    log: list
    global_step: int
    checkpoint_path: Optional[Path]
    config: dict


def _method_step(method, loss_cfg, time_head_weight, model, batch, training=True):
    """Forward both views, compute the loss, and return grads w.r.t. z.

    Returns (breakdown, extra, grads, caches, embeddings) where ``extra`` is
    the method-specific fourth term (None for plain methods). Time-head
    parameter gradients accumulate in place during the call.
    """
    y1, z1, cache1 = model.forward(batch.x1, training)
    y2, z2, cache2 = model.forward(batch.x2, training)
    if not (np.all(np.isfinite(z1)) and np.all(np.isfinite(z2))):
        raise DivergenceError("divergence detected: non-finite embeddings")
    if method in ("vicreg", "tinc"):
        dv = batch.dv if loss_cfg.similarity_variant != "mse" else None
        breakdown = losses.vicreg_loss(z1, z2, loss_cfg, dv=dv)
        inputs = {"z1": z1, "z2": z2}
        if dv is not None:
            inputs["dv"] = dv
        grads = losses.loss_gradient("vicreg", inputs, loss_cfg)
        extra = None
    elif method == "barlow_twins":
        breakdown = losses.barlow_twins_loss(z1, z2, loss_cfg.lambda_bt)
        grads = losses.loss_gradient("barlow_twins", {"z1": z1, "z2": z2}, loss_cfg)
        extra = breakdown.extra
    elif method == "vicreg_timehead":
        breakdown = losses.vicreg_loss(z1, z2, loss_cfg)
        grads = losses.loss_gradient("vicreg", {"z1": z1, "z2": z2}, loss_cfg)
        concat = np.concatenate([z1, z2], axis=1)
        raw, head_cache = model.time_head.forward(concat, training)
        pred = raw[:, 0]
        extra = losses.time_head_loss(pred, batch.delta_signed)
        gpred = time_head_weight * losses.loss_gradient(
            "time_head", {"pred": pred, "target": batch.delta_signed})["pred"]
        gconcat = model.time_head.backward(gpred[:, None], head_cache)
        d = z1.shape[1]
        grads = {"z1": grads["z1"] + gconcat[:, :d],
                 "z2": grads["z2"] + gconcat[:, d:]}
        breakdown = dataclasses.replace(breakdown,
                                        total=breakdown.total
                                        + time_head_weight * extra,
                                        extra=extra)
    else:
        raise ValidationError(f"unknown method {method!r}")
    return breakdown, extra, grads, (cache1, cache2), (z1, z2)


def pretrain(manifest, train_cfg, model_cfg, out_dir=None, augment_policy=None,
             resume_from=None):
    """Run SSL pretraining; returns a PretrainResult with the per-epoch log.

    With ``out_dir`` set, writes losses.jsonl and checkpoint.bin (plus
    periodic checkpoints when checkpoint_every > 0). ``resume_from`` loads a
    checkpoint written by this function and continues from its exact step.
    """
    train_cfg.validate()
    model_cfg.validate()
    loss_cfg = train_cfg.resolved_loss()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    if augment_policy is None:
        augment_policy = augment.ssl_policy(model_cfg.input_size)
    loader = augment.ScanLoader()
    augmenter = augment.make_pair_augmenter(augment_policy, loader)

    if train_cfg.pair_mode == "two_visit":
        pool = cohort.eligible_eyes(manifest, train_cfg.gap_range_days)
        if not pool:
            raise ValidationError(
                f"no eye has a visit pair with gap in {train_cfg.gap_range_days}")
    else:
        pool = [(cohort.eye_id(p.id, e.laterality), p, e, None)
                for p, e in manifest.iter_eyes()]
    keys = [key for key, _, _, _ in pool]
    by_key = {key: (p, e, pairs) for key, p, e, pairs in pool}

    chunks = _epoch_chunks(len(keys), train_cfg.batch_size)
    steps_per_epoch = len(chunks)
    total_steps = train_cfg.epochs * steps_per_epoch
    stop_step = total_steps
    if train_cfg.max_steps is not None:
        stop_step = min(stop_step, train_cfg.max_steps)
    warmup_steps = train_cfg.warmup_epochs * steps_per_epoch

    model = TincModel(model_cfg, train_cfg.seed,
                      with_time_head=train_cfg.method == "vicreg_timehead")
    optimizer = optim.AdamW(model.parameters(),
                            weight_decay=train_cfg.weight_decay)
    config_snapshot = {"train": train_cfg.to_dict(), "model": model_cfg.to_dict()}

    start_step = 0
    log = []
    acc = None
    if resume_from is not None:
        tensors, saved_cfg, start_step = checkpoint.load_checkpoint(resume_from)
        if saved_cfg["train"] != config_snapshot["train"] or \
                saved_cfg["model"] != config_snapshot["model"]:
            raise ValidationError(
                f"{resume_from}: checkpoint config does not match this run")
        model.load_tensors(tensors)
        optimizer.load_state_tensors(tensors)
        log = list(saved_cfg.get("log", []))
        acc = saved_cfg.get("epoch_acc")

    def save(path, step):
        tensors = dict(model.tensors())
        tensors.update(optimizer.state_tensors())
        snap = dict(config_snapshot)
        snap["log"] = log
        snap["epoch_acc"] = acc
        checkpoint.save_checkpoint(path, tensors, snap, step)

    final_path = out_dir / "checkpoint.bin" if out_dir is not None else None

    step = start_step
    while step < stop_step:
        epoch, bi = divmod(step, steps_per_epoch)
        if bi == 0 and acc is None:
            acc = {"invariance": 0.0, "variance": 0.0, "covariance": 0.0,
                   "total": 0.0, "extra": 0.0, "has_extra": False, "count": 0}
        order_rng = np.random.default_rng(
            np.random.SeedSequence((train_cfg.seed, _EPOCH_TAG, epoch)))
        order = [keys[i] for i in order_rng.permutation(len(keys))]
        lo = sum(chunks[:bi])
        chunk = order[lo:lo + chunks[bi]]

        if train_cfg.pair_mode == "two_visit":
            batch = cohort.sample_pair_batch(
                manifest, len(chunk), train_cfg.gap_range_days,
                seed=np.random.SeedSequence((train_cfg.seed, _BATCH_TAG, epoch, bi)),
                augmenter=augmenter,
                dv_bounds=(train_cfg.loss.dv_min_days, train_cfg.loss.dv_max_days),
                eyes=chunk)
        else:
            batch = _same_scan_batch(
                manifest, chunk, by_key,
                np.random.SeedSequence((train_cfg.seed, _SAME_SCAN_TAG, epoch, bi)),
                augmenter)
        if train_cfg.force_zero_dv:
            batch.dv[...] = 0.0

        model.zero_grad()
        breakdown, extra, grads, caches, (z1, z2) = _method_step(
            train_cfg.method, loss_cfg, train_cfg.time_head_weight, model, batch)
        if not np.isfinite(breakdown.total):
            if final_path is not None and step > start_step:
                logger.error("divergence at step %d; last good checkpoint kept",
                             step)
            raise DivergenceError(
                f"divergence detected at step {step}: non-finite loss")

        lr = optim.lr_schedule(step, max(total_steps, 1), warmup_steps,
                               train_cfg.base_lr)
        model.backward(grads["z1"], caches[0])
        model.backward(grads["z2"], caches[1])
        optimizer.step(lr)

        acc["invariance"] += breakdown.invariance
        acc["variance"] += breakdown.variance
        acc["covariance"] += breakdown.covariance
        acc["total"] += breakdown.total
        if extra is not None:
            acc["extra"] += extra
            acc["has_extra"] = True
        acc["count"] += 1
        step += 1

        if bi == steps_per_epoch - 1:
            n = acc["count"]
            record = {
                "epoch": epoch,
                "invariance": acc["invariance"] / n,
                "variance": acc["variance"] / n,
                "covariance": acc["covariance"] / n,
                "extra": acc["extra"] / n if acc["has_extra"] else None,
                "total": acc["total"] / n,
                "lr": lr,
                "embed_std": embedding_std(np.concatenate([z1, z2], axis=0)),
            }
            log.append(record)
            acc = None
            if out_dir is not None and train_cfg.checkpoint_every > 0 \
                    and (epoch + 1) % train_cfg.checkpoint_every == 0:
                save(out_dir / f"checkpoint_epoch{epoch + 1:04d}.bin", step)

    if final_path is not None:
        save(final_path, step)
        write_loss_log(out_dir / "losses.jsonl", log)
    return PretrainResult(model=model, optimizer=optimizer, log=log,
                          global_step=step, checkpoint_path=final_path,
                          config=config_snapshot)


def write_loss_log(path, log):
    with open(path, "w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_loss_log(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_model(checkpoint_path, with_time_head=None):
    """Rebuild a TincModel (eval-ready) from a checkpoint file."""
    tensors, config, step = checkpoint.load_checkpoint(checkpoint_path)
    train_cfg = TrainConfig.from_dict(config["train"])
    model_cfg = ModelConfig.from_dict(config["model"])
    if with_time_head is None:
        with_time_head = train_cfg.method == "vicreg_timehead"
    model = TincModel(model_cfg, train_cfg.seed, with_time_head=with_time_head)
    model.load_tensors(tensors)
    return model, train_cfg, model_cfg, step


def encode_images(model, images, batch_size=128):
    """Eval-mode representations and embeddings for a stack of images."""
    ys, zs = [], []
    for i in range(0, len(images), batch_size):
        y, z, _ = model.forward(images[i:i + batch_size], training=False)
        ys.append(y)
        zs.append(z)
    return np.concatenate(ys, axis=0), np.concatenate(zs, axis=0)


_GRADCHECK_TAG = 14


def gradcheck_model(seed=0, method="vicreg", step=1e-5, tolerance=1e-4):
    """Finite-difference check of the full forward/backward on a tiny model.

    Builds an mlp encoder (r=8) with a 6-dim projector, runs one method step
    on a random 4-pair batch, and compares every parameter gradient against
    central differences of the total loss. Returns an FDReport-style object
    with .worst and .passed. Only smooth losses are checked here; the hinge
    variants are covered at the loss level with kink exclusion.
    """
    if method not in ("vicreg", "barlow_twins", "vicreg_timehead"):
        raise ValidationError(f"gradcheck_model supports smooth methods, "
                              f"got {method!r}")
    model_cfg = ModelConfig(encoder="mlp", representation_dim=8,
                            projector_dims=(8, 8, 6), time_head_hidden=5,
                            input_size=(6, 6))
    model = TincModel(model_cfg, seed,
                      with_time_head=(method == "vicreg_timehead"))
    rng = np.random.default_rng(np.random.SeedSequence((seed, _GRADCHECK_TAG)))
    n = 4
    batch = cohort.PairBatch(
        x1=rng.uniform(0.0, 1.0, (n, *model_cfg.input_size)),
        x2=rng.uniform(0.0, 1.0, (n, *model_cfg.input_size)),
        dv=rng.uniform(0.0, 1.0, n),
        delta_signed=rng.uniform(-1.0, 1.0, n),
        patient_ids=["p"] * n, eye_ids=["p_L"] * n,
        day1=np.zeros(n, dtype=np.int64), day2=np.zeros(n, dtype=np.int64))
    loss_cfg = losses.LossConfig()

    def total():
        breakdown, _, _, _, _ = _method_step(method, loss_cfg, 1.0, model,
                                             batch, training=True)
        return breakdown.total

    model.zero_grad()
    _, _, grads, caches, _ = _method_step(method, loss_cfg, 1.0, model, batch,
                                          training=True)
    model.backward(grads["z2"], caches[1])
    model.backward(grads["z1"], caches[0])
    analytic = {p.name: p.grad.copy() for p in model.parameters()}

    max_rel = {}
    checked = {}
    for param in model.parameters():
        flat = param.value.reshape(-1)
        gflat = analytic[param.name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = total()
            flat[i] = keep - step
            lo = total()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * step)
            scale = max(abs(numeric), abs(gflat[i]), 1.0)
            worst = max(worst, abs(numeric - gflat[i]) / scale)
        max_rel[param.name] = worst
        checked[param.name] = flat.size
    return losses.FDReport(loss_id=f"model/{method}", step=step,
                           tolerance=tolerance, max_rel_error=max_rel,
                           checked=checked, excluded={})
