"""Downstream evaluation.

Exact rank-based AUROC and average-precision PRAUC, volume-level max
aggregation, collapse diagnostics (per-dim std and effective rank), the
linear probe and fine-tuning protocols on the conversion task, and the
time-gap decodability probe.

Test labels are consumed only by the metric functions; probe and fine-tune
fitting see train/val data exclusively.
"""

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from tinc import augment, cohort, nn, optim, trainer
from tinc.errors import ValidationError

_PROBE_INIT_TAG = 20
_PROBE_ORDER_TAG = 21
_FT_AUG_TAG = 22
_DV_PROBE_TAG = 23


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _check_scores(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValidationError(
            f"scores and labels must be matching 1-d arrays, got "
            f"{scores.shape} vs {labels.shape}")
    if not np.all(np.isfinite(scores)):
        raise ValidationError("scores contain non-finite values")
    return scores, labels.astype(bool)


def average_ranks(values):
    """1-based ranks with ties sharing the mean rank of their block."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels):
    """P(score+ > score-) + 0.5 P(equal), exactly, via tie-averaged ranks."""
    scores, labels = _check_scores(scores, labels)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUROC undefined: both classes must be present")
    ranks = average_ranks(scores)
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def prauc(scores, labels):
    """Average precision; equal scores are processed as one group."""
    scores, labels = _check_scores(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise ValidationError("PRAUC undefined: no positive labels")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        group_tp = int(y[i:j + 1].sum())
        tp += group_tp
        seen += j - i + 1
        if group_tp:
            ap += (group_tp / n_pos) * (tp / seen)
        i = j + 1
    return float(ap)


def volume_score(scores):
    """Volume-level score: the maximum over its member scan scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValidationError("volume_score of an empty group")
    return float(scores.max())


def spearman(a, b):
    """Spearman rank correlation (average ranks, then Pearson)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValidationError(f"need two matching 1-d arrays, got "
                              f"{a.shape} vs {b.shape}")
    ra = average_ranks(a)
    rb = average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra * ra).sum() * (rb * rb).sum())
    if denom == 0.0:
        return 0.0
    return float((ra * rb).sum() / denom)


@dataclass(frozen=True)
class CollapseReport:
    per_dim_std: np.ndarray
    mean_std: float
    effective_rank: float

    def to_dict(self):
        return {"per_dim_std": [float(v) for v in self.per_dim_std],
                "mean_std": self.mean_std,
                "effective_rank": self.effective_rank}


def collapse_diagnostics(z):
    """Per-dim unbiased std and the effective rank of the centered embedding.

    Effective rank is exp of the Shannon entropy of the normalized singular
    values; a fully collapsed batch scores 1.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 2:
        raise ValidationError(f"need an (n >= 2, d) embedding batch, got {z.shape}")
    per_dim = z.std(axis=0, ddof=1)
    centered = z - z.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    total = sv.sum()
    if total <= 0.0:
        erank = 1.0
    else:
        p = sv / total
        p = p[p > 0]
        erank = float(np.exp(-np.sum(p * np.log(p))))
    return CollapseReport(per_dim_std=per_dim, mean_std=float(per_dim.mean()),
                          effective_rank=erank)


# ---------------------------------------------------------------------------
# Supervised head plumbing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    lr: float = 1e-4
    epochs: int = 10
    batch_size: int = 128
    pos_weight: float = 5.0
    seed: int = 0


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 1e-4
    epochs: int = 30
    batch_size: int = 64
    pos_weight: float = 5.0
    weight_decay: float = 1e-6
    augment: bool = True
    seed: int = 0


@dataclass(frozen=True)
class MetricsReport:
    scan_auroc: float
    scan_prauc: float
    volume_auroc: float
    volume_prauc: float
    val_auroc: float
    best_epoch: int

    def to_dict(self):
        return dataclasses.asdict(self)


def weighted_bce(logits, labels, weights):
    """Mean weighted binary cross-entropy on logits (stable softplus form)."""
    logits = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    softplus = np.logaddexp(0.0, logits)
    return float(np.mean(weights * (softplus - y * logits)))


def weighted_bce_grad(logits, labels, weights):
    y = np.asarray(labels, dtype=np.float64)
    p = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    return weights * (p - y) / len(y)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


@dataclass
class SupervisedSplit:
    """Scans of one split with features or images attached lazily."""

    records: list
    labels: np.ndarray
    volume_ids: list


def split_supervised(manifest, splits, window_days=cohort.DEFAULT_WINDOW_DAYS):
    """Partition the supervised dataset into train/val/test record lists."""
    dataset = cohort.build_supervised_dataset(manifest, window_days)
    parts = {"train": [], "val": [], "test": []}
    for record in dataset:
        name = splits.split_of(record.eye_id)
        if name is not None:
            parts[name].append(record)
    out = {}
    for name, records in parts.items():
        labels = np.array([r.label for r in records], dtype=bool)
        out[name] = SupervisedSplit(records=records, labels=labels,
                                    volume_ids=[r.volume_id for r in records])
    return out


def _scan_level_metrics(scores, labels):
    return auroc(scores, labels), prauc(scores, labels)


def _volume_level_metrics(scores, labels, volume_ids):
    groups = {}
    for score, label, vid in zip(scores, labels, volume_ids):
        entry = groups.setdefault(vid, ([], label))
        entry[0].append(score)
        if entry[1] != label:
            raise ValidationError(f"volume {vid} mixes labels")
    vol_scores = np.array([volume_score(np.array(v[0])) for v in groups.values()])
    vol_labels = np.array([v[1] for v in groups.values()], dtype=bool)
    return auroc(vol_scores, vol_labels), prauc(vol_scores, vol_labels)


def load_split_images(manifest, records, input_size, loader=None):
    loader = loader or augment.ScanLoader()
    images = [augment.eval_transform(loader(manifest.resolve(r.path)), input_size)
              for r in records]
    return np.stack(images) if images else np.zeros((0, *input_size))


def _check_split_sizes(parts):
    for name in ("train", "val", "test"):
        labels = parts[name].labels
        if labels.size == 0 or labels.all() or not labels.any():
            raise ValidationError(
                f"{name} split needs both classes for probe/fine-tune, got "
                f"{int(labels.sum())} positives of {labels.size}")


def linear_probe(model, manifest, splits, probe_cfg=None, loader=None,
                 features=None):
    """Class-weighted linear head on frozen eval-mode representations.

    Representations are cached once per split; the head trains with the
    adaptive optimizer and the best epoch is chosen by validation AUROC.
    ``features`` optionally injects precomputed (train, val, test) feature
    matrices (used by tests and to share encoder passes across probes).
    """
    probe_cfg = probe_cfg or ProbeConfig()
    parts = split_supervised(manifest, splits)
    _check_split_sizes(parts)
    input_size = model.config.input_size
    if features is None:
        loader = loader or augment.ScanLoader()
        features = {}
        for name in ("train", "val", "test"):
            images = load_split_images(manifest, parts[name].records,
                                       input_size, loader)
            features[name] = trainer.encode_images(model, images)[0]
    feats = {name: np.asarray(features[name], dtype=np.float64)
             for name in ("train", "val", "test")}

    head, best_epoch, val_auroc = _fit_linear_head(
        feats["train"], parts["train"].labels,
        feats["val"], parts["val"].labels, probe_cfg)

    w, b = head
    test_scores = sigmoid(feats["test"] @ w + b)
    scan_a, scan_p = _scan_level_metrics(test_scores, parts["test"].labels)
    vol_a, vol_p = _volume_level_metrics(test_scores, parts["test"].labels,
                                         parts["test"].volume_ids)
    return MetricsReport(scan_auroc=scan_a, scan_prauc=scan_p,
                         volume_auroc=vol_a, volume_prauc=vol_p,
                         val_auroc=val_auroc, best_epoch=best_epoch)


def _fit_linear_head(x_train, y_train, x_val, y_val, cfg):
    """Train the weighted-BCE linear head; select the best epoch by val AUROC."""
    n, d = x_train.shape
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _PROBE_INIT_TAG)))
    w = rng.normal(0.0, 0.01, d)
    b = 0.0
    weights = np.where(y_train, cfg.pos_weight, 1.0)
    state = optim.init_adam_state([w, np.zeros(1)])
    best = (None, -1, -np.inf)
    for epoch in range(cfg.epochs):
        order_rng = np.random.default_rng(
            np.random.SeedSequence((cfg.seed, _PROBE_ORDER_TAG, epoch)))
        order = order_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            logits = x_train[idx] @ w + b
            g = weighted_bce_grad(logits, y_train[idx], weights[idx])
            gw = x_train[idx].T @ g
            gb = np.array([g.sum()])
            barr = np.array([b])
            optim.optimizer_step([w, barr], [gw, gb], state, cfg.lr, 0.0)
            b = float(barr[0])
        val_scores = sigmoid(x_val @ w + b)
        score = auroc(val_scores, y_val)
        if score > best[2]:
            best = ((w.copy(), b), epoch, score)
    if best[0] is None:
        best = ((w.copy(), b), cfg.epochs - 1, -np.inf)
    return best


def finetune(model, manifest, splits, ft_cfg=None, loader=None):
    """Fine-tune encoder plus linear head with weight decay and light
    augmentation; same selection rule as the probe."""
    ft_cfg = ft_cfg or FinetuneConfig()
    parts = split_supervised(manifest, splits)
    _check_split_sizes(parts)
    input_size = model.config.input_size
    loader = loader or augment.ScanLoader()

    raw_train = [np.asarray(loader(manifest.resolve(r.path)))
                 for r in parts["train"].records]
    x_val = load_split_images(manifest, parts["val"].records, input_size, loader)
    x_test = load_split_images(manifest, parts["test"].records, input_size, loader)
    y_train = parts["train"].labels
    weights = np.where(y_train, ft_cfg.pos_weight, 1.0)

    rng = np.random.default_rng(np.random.SeedSequence((ft_cfg.seed,
                                                        _PROBE_INIT_TAG)))
    head = nn.Linear("head.fc", model.config.representation_dim, 1, rng)
    params = model.encoder.parameters() + head.parameters()
    optimizer = optim.AdamW(params, weight_decay=ft_cfg.weight_decay)
    policy = augment.supervised_policy(input_size)

    def forward_train(images):
        x = np.ascontiguousarray(images, dtype=np.float64)[:, None, :, :]
        y, enc_cache = model.encoder.forward(x, True)
        logits, head_cache = head.forward(y, True)
        return logits[:, 0], (enc_cache, head_cache)

    def predict(images):
        y, _ = trainer.encode_images(model, images)
        return sigmoid((y @ head.weight.value.T + head.bias.value)[:, 0])

    def snapshot():
        return [p.value.copy() for p in params]

    def restore(values):
        for p, v in zip(params, values):
            p.value[...] = v

    n = len(raw_train)
    best = (snapshot(), -1, auroc(predict(x_val), parts["val"].labels)
            if ft_cfg.epochs == 0 else -np.inf)
    for epoch in range(ft_cfg.epochs):
        order_rng = np.random.default_rng(
            np.random.SeedSequence((ft_cfg.seed, _PROBE_ORDER_TAG, epoch)))
        order = order_rng.permutation(n)
        for ci, lo in enumerate(range(0, n, ft_cfg.batch_size)):
            idx = order[lo:lo + ft_cfg.batch_size]
            if len(idx) < 2:
                continue
            batch = []
            for k, i in enumerate(idx):
                if ft_cfg.augment:
                    arng = np.random.default_rng(np.random.SeedSequence(
                        (ft_cfg.seed, _FT_AUG_TAG, epoch, ci, k)))
                    batch.append(augment.supervised_augment(raw_train[i], arng,
                                                            policy))
                else:
                    batch.append(augment.eval_transform(raw_train[i], input_size))
            logits, caches = forward_train(np.stack(batch))
            g = weighted_bce_grad(logits, y_train[idx], weights[idx])
            for p in params:
                p.grad[...] = 0.0
            enc_cache, head_cache = caches
            gy = head.backward(g[:, None], head_cache)
            model.encoder.backward(gy, enc_cache)
            optimizer.step(ft_cfg.lr)
        score = auroc(predict(x_val), parts["val"].labels)
        if score > best[2]:
            best = (snapshot(), epoch, score)
    restore(best[0])
    test_scores = predict(x_test)
    scan_a, scan_p = _scan_level_metrics(test_scores, parts["test"].labels)
    vol_a, vol_p = _volume_level_metrics(test_scores, parts["test"].labels,
                                         parts["test"].volume_ids)
    return MetricsReport(scan_auroc=scan_a, scan_prauc=scan_p,
                         volume_auroc=vol_a, volume_prauc=vol_p,
                         val_auroc=best[2], best_epoch=best[1])


def dv_probe(model, manifest, n_pairs=500, seed=0,
             gap_range_days=cohort.DEFAULT_GAP_RANGE,
             dv_bounds=cohort.DEFAULT_DV_BOUNDS, loader=None):
    """Spearman correlation between embedding pair distance and scaled gap.

    Pairs come from an independent probe stream; views go through the
    deterministic eval transform (no augmentation).
    """
    if n_pairs < 10:
        raise ValidationError(f"dv probe needs >= 10 pairs, got {n_pairs}")
    loader = loader or augment.ScanLoader()
    input_size = model.config.input_size

    def eval_augmenter(path, rng):
        return augment.eval_transform(loader(path), input_size)

    batch = cohort.sample_pair_batch(
        manifest, n_pairs, gap_range_days,
        seed=np.random.SeedSequence((seed, _DV_PROBE_TAG)),
        augmenter=eval_augmenter, dv_bounds=dv_bounds)
    _, z1 = trainer.encode_images(model, batch.x1)
    _, z2 = trainer.encode_images(model, batch.x2)
    dist = np.sum((z1 - z2) ** 2, axis=1)
    return spearman(dist, batch.dv)
