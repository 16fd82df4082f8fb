"""Single-branch (weight-shared) network, two-branch fusion baselines, training.

The single-branch model is three blocks applied to either modality with the
same tensors:

    block 1: Linear -> BatchNorm -> ReLU -> Dropout
    block 2: Linear -> L2Norm
    block 3: Linear (class logits)

Two-branch baselines fuse the modalities early (concatenated inputs), in the
middle (concatenated block-1 outputs) or late (two full stacks whose output
probabilities are averaged).
"""

from __future__ import annotations

import hashlib
import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from . import netcore
from .data import PairedDataset
from .errors import AvailabilityError, ConfigError, CorruptionError, DataError, FormatError, ShapeError
from .netcore import AdamState, BatchNorm, Dropout, L2Norm, Linear, ReLU, Sequential, SoftmaxCrossEntropy
from .switch import MOD_A, SwitchStrategy, plan_epoch

log = logging.getLogger(__name__)

ARCHITECTURES = ("single_branch", "two_branch")
FUSIONS = ("none", "early", "mid", "late")
FUSION_SPACES = ("prob", "logit")

DEFAULT_EPOCHS = 50
DEFAULT_BATCH_SIZE = 256

MODEL_MAGIC = b"SBMD"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHBBIIIfQ")


def default_layer_dim(input_dim):
    """Hidden width used for the two modality pairs studied: 512 -> 2048, 768 -> 768."""
    return 2048 if input_dim == 512 else input_dim


@dataclass
class ModelConfig:
    input_dim: int
    layer_dim: int
    num_classes: int
    p_drop: float = 0.5
    architecture: str = "single_branch"
    fusion: str = "none"
    seed: int = 0

    def __post_init__(self):
        if min(self.input_dim, self.layer_dim, self.num_classes) < 1:
            raise ConfigError("input_dim, layer_dim and num_classes must all be >= 1")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1), got {self.p_drop}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.fusion not in FUSIONS:
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if (self.fusion == "none") != (self.architecture == "single_branch"):
            raise ConfigError("fusion must be 'none' exactly when the architecture is single_branch")
        # stored as f32 on disk; keep the in-memory value identical
        self.p_drop = float(np.float32(self.p_drop))


def _block1(din, dout, p_drop, rng):
    return Sequential([Linear(din, dout, rng), BatchNorm(dout), ReLU(), Dropout(p_drop)])


def _block2(din, dout, rng):
    return Sequential([Linear(din, dout, rng), L2Norm()])


def _block3(din, num_classes, rng):
    return Sequential([Linear(din, num_classes, rng)])


def _stack(din, cfg, rng):
    return [
        _block1(din, cfg.layer_dim, cfg.p_drop, rng),
        _block2(cfg.layer_dim, cfg.layer_dim, rng),
        _block3(cfg.layer_dim, cfg.num_classes, rng),
    ]


class Model:
    """A network as named groups of blocks.

    ``groups`` maps ``"trunk"`` (single branch, early fusion), ``"a"``/``"b"``
    (per-modality branches) and ``"head"`` (mid fusion) to block lists.
    """

    def __init__(self, config: ModelConfig, groups: dict):
        self.config = config
        self.groups = groups
        self.trained_epochs = 0

    @property
    def is_single_branch(self):
        return self.config.architecture == "single_branch"

    @property
    def fusion(self):
        return self.config.fusion

    @property
    def trunk(self):
        return self.groups["trunk"]

    def layers(self):
        for gname, blocks in self.groups.items():
            for bi, block in enumerate(blocks):
                for li, layer in block.named_layers():
                    yield f"{gname}.{bi}.{li}", layer

    def parameters(self) -> dict:
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.params.items()}

    def gradients(self) -> dict:
        return {f"{name}.{k}": layer.grads[k] for name, layer in self.layers() for k in layer.params}

    def buffers(self) -> dict:
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.buffers().items()}

    def tensors(self) -> dict:
        out = self.parameters()
        out.update(self.buffers())
        return out

    def set_tensor(self, name, value):
        prefix, key = name.rsplit(".", 1)
        layer = dict(self.layers())[prefix]
        if key in layer.params:
            target = layer.params[key]
        else:
            target = getattr(layer, key)
        if target.shape != value.shape:
            raise CorruptionError(f"tensor {name}: stored shape {value.shape}, expected {target.shape}")
        target[...] = value

    def snap_to_float32(self):
        """Round every tensor onto the float32 grid in place (storage precision)."""
        for arr in self.tensors().values():
            arr[...] = arr.astype(np.float32)

    def num_parameters(self, include_norm=False):
        """Weights and biases of the fully connected layers.

        Batchnorm gain/shift are excluded unless ``include_norm`` is set.
        """
        total = 0
        for _, layer in self.layers():
            if isinstance(layer, Linear) or (include_norm and layer.params):
                total += sum(v.size for v in layer.params.values())
        return total

    def __repr__(self):
        c = self.config
        return f"Model({c.architecture}/{c.fusion}, {c.input_dim}->{c.layer_dim}->{c.num_classes})"


def build_model(config: ModelConfig) -> Model:
    if config.architecture == "two_branch":
        return build_two_branch(config, config.fusion)
    rng = np.random.default_rng(config.seed)
    model = Model(config, {"trunk": _stack(config.input_dim, config, rng)})
    model.snap_to_float32()
    return model


def build_two_branch(config: ModelConfig, fusion: str) -> Model:
    if fusion not in ("early", "mid", "late"):
        raise ConfigError(f"two-branch fusion must be early, mid or late, got {fusion!r}")
    cfg = ModelConfig(
        config.input_dim, config.layer_dim, config.num_classes, config.p_drop,
        architecture="two_branch", fusion=fusion, seed=config.seed,
    )
    rng = np.random.default_rng(cfg.seed)
    d, hidden = cfg.input_dim, cfg.layer_dim
    if fusion == "early":
        groups = {"trunk": _stack(2 * d, cfg, rng)}
    elif fusion == "mid":
        groups = {
            "a": [_block1(d, hidden, cfg.p_drop, rng)],
            "b": [_block1(d, hidden, cfg.p_drop, rng)],
            "head": [_block2(2 * hidden, hidden, rng), _block3(hidden, cfg.num_classes, rng)],
        }
    else:
        groups = {"a": _stack(d, cfg, rng), "b": _stack(d, cfg, rng)}
    model = Model(cfg, groups)
    model.snap_to_float32()
    return model


# -- forward / backward -----------------------------------------------------


@dataclass
class ForwardOutput:
    logits: np.ndarray
    probs: np.ndarray
    embedding: np.ndarray | None


def _run_blocks(blocks, x, train, rng):
    h = x
    emb = None
    for i, block in enumerate(blocks):
        h = block.forward(h, train=train, rng=rng)
        if i == len(blocks) - 2:
            emb = h
    return h, emb


def _back_blocks(blocks, dy):
    for block in reversed(blocks):
        dy = block.backward(dy)
    return dy


def _check_width(x, width, what):
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{what}: expected batch of width {width}, got shape {x.shape}")


def forward(model: Model, batch, train=False, rng=None) -> ForwardOutput:
    """Run the network on one batch.

    Single-branch models and late-fusion branches take a matrix; early and
    mid fusion take an ``(x_a, x_b)`` pair. For late fusion a pair returns
    the averaged probabilities of both branches and the branch-A embedding.
    """
    d = model.config.input_dim
    if model.is_single_branch:
        _check_width(batch, d, "single-branch forward")
        logits, emb = _run_blocks(model.trunk, batch, train, rng)
        return ForwardOutput(logits, netcore.softmax(logits), emb)

    x_a, x_b = batch
    _check_width(x_a, d, "modality A")
    _check_width(x_b, d, "modality B")
    if model.fusion == "early":
        logits, emb = _run_blocks(model.trunk, np.hstack([x_a, x_b]), train, rng)
    elif model.fusion == "mid":
        h_a = model.groups["a"][0].forward(x_a, train=train, rng=rng)
        h_b = model.groups["b"][0].forward(x_b, train=train, rng=rng)
        logits, emb = _run_blocks(model.groups["head"], np.hstack([h_a, h_b]), train, rng)
    else:
        out_a = branch_forward(model, "A", x_a, train, rng)
        out_b = branch_forward(model, "B", x_b, train, rng)
        probs = 0.5 * (out_a.probs + out_b.probs)
        return ForwardOutput(0.5 * (out_a.logits + out_b.logits), probs, out_a.embedding)
    return ForwardOutput(logits, netcore.softmax(logits), emb)


def branch_forward(model: Model, modality, x, train=False, rng=None) -> ForwardOutput:
    """One modality through its own path (the shared trunk for single-branch)."""
    if model.is_single_branch:
        blocks = model.trunk
    elif model.fusion == "late":
        blocks = model.groups[modality.lower()]
    else:
        raise ConfigError(f"{model.fusion}-fusion models have no per-modality output")
    _check_width(x, model.config.input_dim, f"modality {modality}")
    logits, emb = _run_blocks(blocks, x, train, rng)
    return ForwardOutput(logits, netcore.softmax(logits), emb)


# -- training ---------------------------------------------------------------


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)

    def __len__(self):
        return len(self.epochs)

    def __iter__(self):
        return iter(self.epochs)

    @property
    def final(self):
        return self.epochs[-1] if self.epochs else None


def _merge_singletons(batches):
    """Fold a trailing one-row batch into its predecessor (batchnorm needs >= 2 rows)."""
    out = list(batches)
    if len(out) >= 2 and out[-1][0].size == 1:
        idx, mod = out.pop()
        pidx, pmod = out[-1]
        out[-1] = (np.concatenate([pidx, idx]), np.concatenate([pmod, mod]))
    return out


def _step_single(model, x, labels, loss_fn, rng):
    logits, _ = _run_blocks(model.trunk, x, True, rng)
    loss, probs = loss_fn.forward(logits, labels)
    _back_blocks(model.trunk, loss_fn.backward())
    return loss, probs


def _step_two_branch(model, x_a, x_b, avail_a, avail_b, labels, loss_fn, rng):
    fusion = model.fusion
    if fusion == "early":
        logits, _ = _run_blocks(model.trunk, np.hstack([x_a, x_b]), True, rng)
        loss, probs = loss_fn.forward(logits, labels)
        _back_blocks(model.trunk, loss_fn.backward())
        return loss
    if fusion == "mid":
        a0, b0 = model.groups["a"][0], model.groups["b"][0]
        head = model.groups["head"]
        h = np.hstack([a0.forward(x_a, train=True, rng=rng), b0.forward(x_b, train=True, rng=rng)])
        logits, _ = _run_blocks(head, h, True, rng)
        loss, _ = loss_fn.forward(logits, labels)
        dh = _back_blocks(head, loss_fn.backward())
        width = model.config.layer_dim
        a0.backward(dh[:, :width])
        b0.backward(dh[:, width:])
        return loss

    # late fusion: each branch learns from its own modality; zero grads where skipped
    total = 0.0
    for key, x, avail in (("a", x_a, avail_a), ("b", x_b, avail_b)):
        blocks = model.groups[key]
        rows = np.flatnonzero(avail)
        if rows.size < 2:
            for block in blocks:
                for layer in block:
                    for k, v in layer.params.items():
                        layer.grads[k] = np.zeros_like(v)
            continue
        logits, _ = _run_blocks(blocks, x[rows], True, rng)
        loss, _ = loss_fn.forward(logits, labels[rows])
        _back_blocks(blocks, 0.5 * loss_fn.backward())
        total += 0.5 * loss
    return total


def train(
    model: Model,
    dataset: PairedDataset,
    strategy="S1",
    epochs=DEFAULT_EPOCHS,
    batch_size=DEFAULT_BATCH_SIZE,
    optimizer: OptimizerConfig | None = None,
    seed=0,
) -> TrainingLog:
    """Mini-batch Adam on cross-entropy. Deterministic given ``seed``.

    Single-branch models draw an epoch plan from the switching ``strategy``;
    two-branch models consume aligned pairs (missing vectors are zeros).
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    d = model.config.input_dim
    if dataset.dim_a != d or dataset.dim_b != d:
        raise ShapeError(f"dataset widths ({dataset.dim_a}, {dataset.dim_b}) do not match model input_dim {d}")
    if dataset.num_classes != model.config.num_classes:
        raise ShapeError(f"dataset has {dataset.num_classes} classes, model expects {model.config.num_classes}")
    history = TrainingLog()
    if epochs <= 0:
        return history

    opt = optimizer or OptimizerConfig()
    state = AdamState(lr=opt.lr, beta1=opt.beta1, beta2=opt.beta2, epsilon=opt.epsilon)
    strategy = SwitchStrategy.parse(strategy)
    loss_fn = SoftmaxCrossEntropy()
    params = model.parameters()
    labels = dataset.labels
    n = len(dataset)

    for epoch in range(epochs):
        drop_rng = np.random.default_rng([int(seed), epoch, 1])
        if model.is_single_branch:
            plan = plan_epoch(dataset.avail_a, dataset.avail_b, strategy, batch_size, epoch, seed, ids=dataset.ids)
            batches = _merge_singletons((b.index, b.modality) for b in plan)
        else:
            order = np.random.default_rng([int(seed), epoch, 2]).permutation(n)
            batches = _merge_singletons(
                (order[s:s + batch_size], np.zeros(min(batch_size, n - s), dtype=np.int8))
                for s in range(0, n, batch_size)
            )

        loss_sum = 0.0
        usage = {"A": 0, "B": 0}
        for idx, mod in batches:
            y = labels[idx]
            if model.is_single_branch:
                use_a = (mod == MOD_A)[:, None]
                x = np.where(use_a, dataset.x_a[idx], dataset.x_b[idx])
                loss, _ = _step_single(model, x, y, loss_fn, drop_rng)
                n_a = int((mod == MOD_A).sum())
                usage["A"] += n_a
                usage["B"] += idx.size - n_a
            else:
                loss = _step_two_branch(
                    model, dataset.x_a[idx], dataset.x_b[idx],
                    dataset.avail_a[idx], dataset.avail_b[idx], y, loss_fn, drop_rng,
                )
                usage["A"] += int(dataset.avail_a[idx].sum())
                usage["B"] += int(dataset.avail_b[idx].sum())
            netcore.adam_step(params, model.gradients(), state)
            loss_sum += loss * idx.size

        preds = predict_dataset(model, dataset)
        entry = {
            "epoch": model.trained_epochs + 1,
            "loss": loss_sum / n,
            "train_accuracy": float((preds.predicted == labels).mean()),
            "modality_usage": usage,
        }
        model.trained_epochs += 1
        history.epochs.append(entry)
        log.debug("epoch %d loss %.5f acc %.4f", entry["epoch"], entry["loss"], entry["train_accuracy"])

    model.snap_to_float32()
    return history


# -- prediction ---------------------------------------------------------------


@dataclass
class Prediction:
    instance_id: int | None
    probs: np.ndarray
    predicted_class: int
    modality_used: str


@dataclass
class Predictions:
    ids: np.ndarray
    probs: np.ndarray
    predicted: np.ndarray
    modality_used: np.ndarray

    def __len__(self):
        return self.ids.shape[0]

    def __getitem__(self, i):
        return Prediction(int(self.ids[i]), self.probs[i], int(self.predicted[i]), str(self.modality_used[i]))


def _fuse(out_a, out_b, fusion_space):
    if fusion_space == "prob":
        return 0.5 * (out_a.probs + out_b.probs)
    if fusion_space == "logit":
        return netcore.softmax(0.5 * (out_a.logits + out_b.logits))
    raise ConfigError(f"fusion_space must be 'prob' or 'logit', got {fusion_space!r}")


def predict_arrays(model: Model, x_a, x_b, avail_a, avail_b, fusion_space="prob"):
    """Vectorised inference with late fusion and single-modality fallback.

    Returns ``(probs, modality_used)``; ``modality_used`` holds ``"A"``,
    ``"B"`` or ``"fused"`` per row.
    """
    avail_a = np.asarray(avail_a, dtype=bool)
    avail_b = np.asarray(avail_b, dtype=bool)
    if not (avail_a | avail_b).all():
        raise AvailabilityError("prediction needs at least one available modality per instance")
    n = avail_a.size
    both = avail_a & avail_b
    used = np.where(both, "fused", np.where(avail_a, "A", "B")).astype(object)
    probs = np.empty((n, model.config.num_classes))

    if model.is_single_branch or model.fusion == "late":
        ra, rb = np.flatnonzero(avail_a), np.flatnonzero(avail_b)
        out_a = branch_forward(model, "A", x_a[ra]) if ra.size else None
        out_b = branch_forward(model, "B", x_b[rb]) if rb.size else None
        only_a, only_b = avail_a & ~avail_b, avail_b & ~avail_a
        if out_a is not None:
            probs[ra[only_a[ra]]] = out_a.probs[only_a[ra]]
        if out_b is not None:
            probs[rb[only_b[rb]]] = out_b.probs[only_b[rb]]
        if both.any():
            sel_a, sel_b = both[ra], both[rb]
            pa = ForwardOutput(out_a.logits[sel_a], out_a.probs[sel_a], None)
            pb = ForwardOutput(out_b.logits[sel_b], out_b.probs[sel_b], None)
            probs[both] = _fuse(pa, pb, fusion_space)
        return probs, used

    # early / mid fusion see a zero vector in place of a missing modality
    xa = np.where(avail_a[:, None], x_a, 0.0)
    xb = np.where(avail_b[:, None], x_b, 0.0)
    probs[:] = forward(model, (xa, xb)).probs
    return probs, used


def predict_dataset(model: Model, ds: PairedDataset, fusion_space="prob") -> Predictions:
    probs, used = predict_arrays(model, ds.x_a, ds.x_b, ds.avail_a, ds.avail_b, fusion_space)
    return Predictions(ds.ids, probs, probs.argmax(axis=1), used)


def predict(model: Model, x_a=None, x_b=None, instance_id=None, fusion_space="prob") -> Prediction:
    """Predict one instance; pass ``None`` for a missing modality."""
    if x_a is None and x_b is None:
        raise AvailabilityError("prediction needs at least one available modality")
    d = model.config.input_dim
    row_a = np.zeros((1, d)) if x_a is None else np.asarray(x_a, dtype=float).reshape(1, -1)
    row_b = np.zeros((1, d)) if x_b is None else np.asarray(x_b, dtype=float).reshape(1, -1)
    probs, used = predict_arrays(model, row_a, row_b, [x_a is not None], [x_b is not None], fusion_space)
    return Prediction(instance_id, probs[0], int(probs[0].argmax()), str(used[0]))


# -- persistence ------------------------------------------------------------


def model_to_bytes(model: Model) -> bytes:
    c = model.config
    buf = io.BytesIO()
    buf.write(_MODEL_HEADER.pack(
        MODEL_MAGIC, MODEL_VERSION, ARCHITECTURES.index(c.architecture), FUSIONS.index(c.fusion),
        c.input_dim, c.layer_dim, c.num_classes, c.p_drop, c.seed,
    ))
    for name, arr in model.tensors().items():
        mat = np.atleast_2d(arr)
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<II", *mat.shape))
        buf.write(mat.astype("<f4").tobytes())
    return buf.getvalue()


def model_sha(model: Model) -> str:
    return hashlib.sha256(model_to_bytes(model)).hexdigest()


def model_from_bytes(raw: bytes) -> Model:
    if len(raw) < 4 or raw[:4] != MODEL_MAGIC:
        raise FormatError(f"not a model file: magic {raw[:4]!r}, expected 'SBMD'")
    if len(raw) < _MODEL_HEADER.size:
        raise CorruptionError("model file truncated inside the header")
    _, version, arch, fusion, din, hidden, ncls, p_drop, seed = _MODEL_HEADER.unpack_from(raw)
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported model version {version}, expected {MODEL_VERSION}")
    if arch >= len(ARCHITECTURES) or fusion >= len(FUSIONS):
        raise FormatError(f"unknown architecture/fusion tags ({arch}, {fusion})")
    try:
        config = ModelConfig(din, hidden, ncls, float(p_drop), ARCHITECTURES[arch], FUSIONS[fusion], seed)
    except ConfigError as exc:
        raise CorruptionError(f"invalid config block: {exc}") from None
    model = build_model(config)
    expected = model.tensors()

    pos = _MODEL_HEADER.size
    seen = set()
    while pos < len(raw):
        try:
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode("utf-8")
            if len(name.encode()) != nlen:
                raise struct.error("short name")
            pos += nlen
            rows, cols = struct.unpack_from("<II", raw, pos)
            pos += 8
        except (struct.error, UnicodeDecodeError):
            raise CorruptionError(f"model file truncated at byte {pos}") from None
        nbytes = 4 * rows * cols
        if pos + nbytes > len(raw):
            raise CorruptionError(f"model file truncated inside tensor {name!r}")
        if name not in expected:
            raise CorruptionError(f"unexpected tensor {name!r} for {config.architecture}/{config.fusion}")
        if rows * cols != expected[name].size:
            raise CorruptionError(f"tensor {name!r} holds {rows}x{cols} values, expected {expected[name].shape}")
        values = np.frombuffer(raw, dtype="<f4", count=rows * cols, offset=pos).astype(np.float64)
        pos += nbytes
        model.set_tensor(name, values.reshape(expected[name].shape))
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise CorruptionError(f"model file is missing tensors: {sorted(missing)[:3]}")
    return model


def save_model(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
