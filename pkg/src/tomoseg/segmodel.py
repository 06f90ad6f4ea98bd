"""Per-slice segmenter: fixed convolutional feature bank + softmax classifier.

The feature bank turns a u16 slice into 9 per-pixel features (raw intensity
rescaled to [0,1], Gaussian blurs at sigma 1/2/4/8, gradient magnitude at
sigma 1/2, local standard deviation and median over a radius-2 window).
A multinomial logistic model over those features plus a bias is trained
with mini-batch Adam on randomly tiled slices.  This keeps every gradient
exactly checkable while exposing the same train/predict surface a heavier
slice model would have.

Training follows a fixed sampling protocol: every ``slice_stride``-th
axial slice participates, the selected slices are split once 70/30 into
train/validation at the slice level, and each epoch draws one random tile
per training slice.  Pixels within a tile are sampled with inverse class
frequency weights (capped) so rare classes are not drowned out.
"""

import abc
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import scipy.ndimage as ndi

from .core import CLASS_NAMES, GrayVolume, LabelVolume, ViewAxis, extract_slice, restack, \
    rng_for_seed, slice_count
from .errors import ConfigError, FormatError, ModelError, ShapeError, TrainingError

FEATURE_VERSION = "fb1"
N_FEATURES = 9
_BLUR_SIGMAS = (1.0, 2.0, 4.0, 8.0)
_GRAD_SIGMAS = (1.0, 2.0)
_TEXTURE_RADIUS = 2
_WEIGHT_CAP = 10.0
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


class SliceSegmenter(abc.ABC):
    """Anything that labels a 2D u16 slice pixel by pixel."""

    n_classes: int

    @abc.abstractmethod
    def predict(self, img: np.ndarray) -> np.ndarray:
        """Label image of the same shape, values < n_classes."""


def _require_2d(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2D image, got shape {img.shape}")
    return img


def extract_features(img: np.ndarray) -> np.ndarray:
    """Per-pixel feature array of shape (H, W, 9), float32, reflected borders."""
    img = _require_2d(img)
    f = img.astype(np.float32) / np.float32(65535.0)
    feats = [f]
    for sigma in _BLUR_SIGMAS:
        feats.append(ndi.gaussian_filter(f, sigma, mode="reflect", truncate=3.0))
    for sigma in _GRAD_SIGMAS:
        gx = ndi.gaussian_filter(f, sigma, order=(0, 1), mode="reflect", truncate=3.0)
        gy = ndi.gaussian_filter(f, sigma, order=(1, 0), mode="reflect", truncate=3.0)
        feats.append(np.hypot(gx, gy))
    size = 2 * _TEXTURE_RADIUS + 1
    mean = ndi.uniform_filter(f, size, mode="reflect")
    mean_sq = ndi.uniform_filter(f * f, size, mode="reflect")
    feats.append(np.sqrt(np.clip(mean_sq - mean * mean, 0.0, None)))
    feats.append(ndi.median_filter(img, size=size, mode="reflect").astype(np.float32)
                 / np.float32(65535.0))
    return np.stack(feats, axis=-1)


@dataclass
class SoftmaxModel(SliceSegmenter):
    """Multinomial logistic model over the feature bank (plus bias column).

    ``class_subset`` lists the label-volume ids this model classifies, in
    output order; predictions return those ids.  ``batch_size`` pixels are
    drawn per tile step (0 means every tile pixel).
    """

    class_subset: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    learning_rate: float = 1e-4
    epochs: int = 150
    batch_size: int = 2048
    l2: float = 1e-4
    weights: np.ndarray = None
    feature_version: str = FEATURE_VERSION
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.class_subset = tuple(int(c) for c in self.class_subset)
        if not self.class_subset:
            raise ConfigError("class_subset must not be empty")
        if len(set(self.class_subset)) != len(self.class_subset):
            raise ConfigError(f"class_subset has duplicates: {self.class_subset}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 0:
            raise ConfigError(f"batch_size must be non-negative, got {self.batch_size}")
        if self.l2 < 0:
            raise ConfigError(f"l2 must be non-negative, got {self.l2}")
        if self.feature_version != FEATURE_VERSION:
            raise FormatError(f"unsupported feature version {self.feature_version!r}")
        if self.weights is None:
            self.weights = np.zeros((len(self.class_subset), N_FEATURES + 1))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (len(self.class_subset), N_FEATURES + 1):
            raise FormatError(
                f"weights shape {self.weights.shape} != "
                f"({len(self.class_subset)}, {N_FEATURES + 1})"
            )

    @property
    def n_classes(self) -> int:
        return len(self.class_subset)

    def predict_proba(self, features: np.ndarray) -> np.ndarray:
        """Softmax probabilities for an (N, 9) feature matrix; rows sum to 1."""
        if not np.isfinite(self.weights).all():
            raise ModelError("model weights are not finite")
        x = np.asarray(features, dtype=np.float64)
        logits = x @ self.weights[:, :-1].T + self.weights[:, -1]
        logits -= logits.max(axis=1, keepdims=True)
        np.exp(logits, out=logits)
        logits /= logits.sum(axis=1, keepdims=True)
        return logits

    def predict(self, img: np.ndarray) -> np.ndarray:
        return predict_slice(self, img)


@dataclass(frozen=True)
class TrainProtocol:
    """Tile-sampling schedule; tiles clamp to the slice extent when larger."""

    tile_size: int = 400
    slice_stride: int = 3
    val_fraction: float = 0.30
    tiles_per_slice_per_epoch: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.tile_size < 1:
            raise ConfigError(f"tile_size must be >= 1, got {self.tile_size}")
        if self.slice_stride < 1:
            raise ConfigError(f"slice_stride must be >= 1, got {self.slice_stride}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.tiles_per_slice_per_epoch < 1:
            raise ConfigError("tiles_per_slice_per_epoch must be >= 1")


def softmax_loss_and_grad(weights: np.ndarray, x: np.ndarray, y: np.ndarray,
                          l2: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean cross-entropy (+ L2 on non-bias weights) and its exact gradient.

    x is (N, n_features), y holds class indices, weights is
    (n_classes, n_features+1) with the bias in the last column.
    """
    weights = np.asarray(weights, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    xb = np.concatenate([x, np.ones((n, 1))], axis=1)
    logits = xb @ weights.T
    logits -= logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    loss = float((log_z - logits[np.arange(n), y]).mean())
    probs = np.exp(logits - log_z[:, None])
    probs[np.arange(n), y] -= 1.0
    grad = probs.T @ xb / n
    reg = weights.copy()
    reg[:, -1] = 0.0  # bias is not penalized
    loss += 0.5 * l2 * float((reg * reg).sum())
    grad += l2 * reg
    return loss, grad


def _selected_slices(stacks, stride: int) -> list[tuple[int, int]]:
    pairs = []
    for s, (gray, _) in enumerate(stacks):
        for z in range(0, slice_count(gray, ViewAxis.XY), stride):
            pairs.append((s, z))
    return pairs


def train(model: SoftmaxModel, stacks, proto: TrainProtocol,
          class_subset=None) -> tuple[SoftmaxModel, list[dict]]:
    """Fit the model on (GrayVolume, LabelVolume) stacks; returns (model, history).

    History holds one record per epoch: the mean tile loss and the
    validation macro IoU over classes present in the validation labels.
    Pixels whose label is outside ``class_subset`` are excluded from
    sampling (masked stages rely on this).
    """
    if not stacks:
        raise TrainingError("need at least one training stack")
    if class_subset is None:
        class_subset = model.class_subset
    class_subset = tuple(int(c) for c in class_subset)
    if not class_subset:
        raise TrainingError("class_subset must not be empty")
    if class_subset != model.class_subset:
        raise ConfigError(
            f"class_subset {class_subset} does not match model {model.class_subset}"
        )
    for gray, lab in stacks:
        if gray.dims != lab.dims:
            raise ShapeError(f"gray dims {gray.dims} != label dims {lab.dims}")

    pairs = _selected_slices(stacks, proto.slice_stride)
    rng = rng_for_seed(proto.seed, 101)
    order = rng.permutation(len(pairs))
    n_val = int(round(proto.val_fraction * len(pairs))) if len(pairs) > 1 else 0
    val_pairs = [pairs[i] for i in order[:n_val]]
    train_pairs = [pairs[i] for i in order[n_val:]]
    if not train_pairs:
        raise TrainingError("no training slices left after the validation split")

    id_to_idx = np.full(256, -1, dtype=np.int64)  # labels are u8
    for idx, cid in enumerate(class_subset):
        id_to_idx[cid] = idx

    def slice_xy(stack_idx: int, z: int):
        gray, lab = stacks[stack_idx]
        img = extract_slice(gray, ViewAxis.XY, z)
        gt = extract_slice(lab, ViewAxis.XY, z)
        return extract_features(img), id_to_idx[gt]

    cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}

    def cached(pair):
        if pair not in cache:
            cache[pair] = slice_xy(*pair)
        return cache[pair]

    present = np.zeros(len(class_subset), dtype=np.int64)
    for pair in train_pairs:
        _, gt_idx = cached(pair)
        present += np.bincount(gt_idx[gt_idx >= 0].ravel(), minlength=len(class_subset))
    for idx, cid in enumerate(class_subset):
        if present[idx] == 0:
            raise TrainingError(f"class {cid} absent from all training labels")

    weights = model.weights.copy()
    m = np.zeros_like(weights)
    v = np.zeros_like(weights)
    step = 0
    sampler = rng_for_seed(proto.seed, 202)
    history = []
    for epoch in range(model.epochs):
        losses = []
        for pair in train_pairs:
            feats, gt_idx = cached(pair)
            h, w = gt_idx.shape
            th, tw = min(proto.tile_size, h), min(proto.tile_size, w)
            for _ in range(proto.tiles_per_slice_per_epoch):
                ti = int(sampler.integers(0, h - th + 1))
                tj = int(sampler.integers(0, w - tw + 1))
                x = feats[ti:ti + th, tj:tj + tw].reshape(-1, N_FEATURES)
                y = gt_idx[ti:ti + th, tj:tj + tw].ravel()
                valid = np.flatnonzero(y >= 0)
                if valid.size == 0:
                    continue
                x, y = x[valid], y[valid]
                if model.batch_size and model.batch_size < y.size:
                    freq = np.bincount(y, minlength=len(class_subset)).astype(np.float64)
                    cls_w = np.zeros(len(class_subset))
                    nz = freq > 0
                    cls_w[nz] = np.minimum(freq[nz].max() / freq[nz], _WEIGHT_CAP)
                    p = cls_w[y]
                    p /= p.sum()
                    pick = sampler.choice(y.size, size=model.batch_size, replace=True, p=p)
                    x, y = x[pick], y[pick]
                loss, grad = softmax_loss_and_grad(weights, x, y, model.l2)
                step += 1
                m = _ADAM_BETA1 * m + (1 - _ADAM_BETA1) * grad
                v = _ADAM_BETA2 * v + (1 - _ADAM_BETA2) * grad * grad
                m_hat = m / (1 - _ADAM_BETA1 ** step)
                v_hat = v / (1 - _ADAM_BETA2 ** step)
                weights -= model.learning_rate * m_hat / (np.sqrt(v_hat) + _ADAM_EPS)
                losses.append(loss)
        fitted = replace(model, weights=weights.copy(),
                         metadata={**model.metadata, "trained_epochs": epoch + 1})
        history.append({
            "epoch": epoch + 1,
            "train_loss": float(np.mean(losses)) if losses else float("nan"),
            "val_iou": _validation_iou(fitted, cached, val_pairs),
        })
    if model.epochs == 0:
        return replace(model, weights=weights.copy()), history
    return fitted, history


def _validation_iou(model: SoftmaxModel, cached, val_pairs) -> float:
    if not val_pairs:
        return float("nan")
    k = model.n_classes
    inter = np.zeros(k, dtype=np.int64)
    union = np.zeros(k, dtype=np.int64)
    gt_count = np.zeros(k, dtype=np.int64)
    for pair in val_pairs:
        feats, gt_idx = cached(pair)
        pred = model.predict_proba(feats.reshape(-1, N_FEATURES)).argmax(axis=1)
        gt = gt_idx.ravel()
        ok = gt >= 0
        pred, gt = pred[ok], gt[ok]
        for c in range(k):
            p, g = pred == c, gt == c
            inter[c] += int((p & g).sum())
            union[c] += int((p | g).sum())
            gt_count[c] += int(g.sum())
    seen = gt_count > 0
    if not seen.any():
        return float("nan")
    per_class = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return float(per_class[seen].mean())


def predict_slice(model: SoftmaxModel, img: np.ndarray) -> np.ndarray:
    """Argmax labels for one slice; ties resolve to the lower class index."""
    img = _require_2d(img)
    feats = extract_features(img).reshape(-1, N_FEATURES)
    idx = model.predict_proba(feats).argmax(axis=1)
    out = np.asarray(model.class_subset, dtype=np.uint8)[idx]
    return out.reshape(img.shape)


def predict_volume(model: SoftmaxModel, vol: GrayVolume, axis: ViewAxis,
                   jobs: int = 1) -> LabelVolume:
    """Predict every slice along ``axis`` and restack into volume coordinates."""
    n = slice_count(vol, axis)

    def one(i: int) -> np.ndarray:
        return predict_slice(model, extract_slice(vol, axis, i))

    if jobs and jobs > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            slices = list(pool.map(one, range(n)))
    else:
        slices = [one(i) for i in range(n)]
    return LabelVolume(restack(slices, axis), vol.voxel_size_um, CLASS_NAMES)


def save_model(model: SoftmaxModel, path) -> None:
    doc = {
        "format": "softmax-featbank",
        "feature_version": model.feature_version,
        "n_classes": model.n_classes,
        "class_subset": list(model.class_subset),
        "weights": model.weights.tolist(),
        "hyperparameters": {
            "learning_rate": model.learning_rate,
            "epochs": model.epochs,
            "batch_size": model.batch_size,
            "l2": model.l2,
        },
        "metadata": model.metadata,
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_model(path) -> SoftmaxModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"unreadable model file {path}: {e}") from e
    if doc.get("format") != "softmax-featbank":
        raise FormatError(f"{path}: not a model file")
    if doc.get("feature_version") != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature version {doc.get('feature_version')!r}")
    hp = doc.get("hyperparameters", {})
    model = SoftmaxModel(
        class_subset=tuple(doc["class_subset"]),
        learning_rate=float(hp.get("learning_rate", 1e-4)),
        epochs=int(hp.get("epochs", 150)),
        batch_size=int(hp.get("batch_size", 2048)),
        l2=float(hp.get("l2", 1e-4)),
        weights=np.asarray(doc["weights"], dtype=np.float64),
        metadata=dict(doc.get("metadata", {})),
    )
    if model.n_classes != int(doc["n_classes"]):
        raise FormatError(f"{path}: n_classes inconsistent with class_subset")
    return model
