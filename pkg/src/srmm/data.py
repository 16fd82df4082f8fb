"""Embedding banks, paired multimodal datasets, masking and corruption.

A bank holds one modality's vectors keyed by instance id. Two banks are
joined into a :class:`PairedDataset` whose rows are instances with an
availability flag per modality. Unavailable vectors are stored as zeros.
"""

from __future__ import annotations

import csv
import hashlib
import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    AvailabilityError,
    ConfigError,
    CorruptionError,
    DataError,
    FormatError,
    IntegrityError,
    StratificationError,
)

BANK_MAGIC = b"SBEB"
BANK_VERSION = 1
_BANK_HEADER = struct.Struct("<4sHBBQII")

MODALITIES = ("A", "B")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary printable parts."""
    digest = hashlib.sha256(":".join(repr(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _record_dtype(dim):
    return np.dtype([("id", "<u8"), ("label", "<u4"), ("vec", "<f4", (dim,))])


@dataclass(eq=False)
class EmbeddingBank:
    ids: np.ndarray
    labels: np.ndarray
    vectors: np.ndarray
    num_classes: int
    modality_tag: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.vectors = np.asarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.ids.shape[0]:
            raise CorruptionError(f"bank vectors shape {self.vectors.shape} does not match {self.ids.shape[0]} ids")
        if self.labels.shape != self.ids.shape:
            raise CorruptionError("bank labels and ids differ in length")
        uniq, counts = np.unique(self.ids, return_counts=True)
        if (counts > 1).any():
            raise IntegrityError(f"duplicate instance_id {uniq[counts > 1][0]} in bank")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise IntegrityError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return self.ids.shape[0]

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingBank):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.modality_tag == other.modality_tag
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.labels, other.labels)
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


def _is_csv(path):
    return os.fspath(path).lower().endswith(".csv")


def write_bank(bank: EmbeddingBank, path) -> None:
    if _is_csv(path):
        _write_bank_csv(bank, path)
        return
    header = _BANK_HEADER.pack(BANK_MAGIC, BANK_VERSION, bank.modality_tag, 0, len(bank), bank.dim, bank.num_classes)
    records = np.empty(len(bank), dtype=_record_dtype(bank.dim))
    records["id"] = bank.ids
    records["label"] = bank.labels
    records["vec"] = bank.vectors
    with open(path, "wb") as f:
        f.write(header)
        f.write(records.tobytes())


def read_bank(path) -> EmbeddingBank:
    if _is_csv(path):
        return _read_bank_csv(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _BANK_HEADER.size:
        raise CorruptionError(f"{path}: file shorter than the {_BANK_HEADER.size}-byte header")
    magic, version, tag, _reserved, n, dim, num_classes = _BANK_HEADER.unpack_from(raw)
    if magic != BANK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {BANK_MAGIC.decode()!r}")
    if version != BANK_VERSION:
        raise FormatError(f"{path}: unsupported bank version {version}")
    dtype = _record_dtype(dim)
    payload = len(raw) - _BANK_HEADER.size
    if payload != n * dtype.itemsize:
        raise CorruptionError(
            f"{path}: header declares {n} records of {dtype.itemsize} bytes, payload holds {payload} bytes"
        )
    records = np.frombuffer(raw, dtype=dtype, count=n, offset=_BANK_HEADER.size)
    return EmbeddingBank(
        ids=records["id"].astype(np.int64),
        labels=records["label"].astype(np.int64),
        vectors=records["vec"].copy(),
        num_classes=num_classes,
        modality_tag=tag,
    )


def _write_bank_csv(bank, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["id", "label"] + [f"v{j}" for j in range(bank.dim)])
        for i, lab, vec in zip(bank.ids, bank.labels, bank.vectors):
            # float32 -> python float is exact, and repr round-trips
            w.writerow([int(i), int(lab)] + [repr(float(v)) for v in vec])


def _read_bank_csv(path, num_classes=None):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][:2] != ["id", "label"]:
        raise FormatError(f"{path}: CSV bank must start with header 'id,label,v0,...'")
    dim = len(rows[0]) - 2
    ids, labels, vecs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 2:
            raise CorruptionError(f"{path}:{lineno}: expected {dim} vector entries, found {len(row) - 2}")
        try:
            ids.append(int(row[0]))
            labels.append(int(row[1]))
            vecs.append([float(v) for v in row[2:]])
        except ValueError as exc:
            raise CorruptionError(f"{path}:{lineno}: {exc}") from None
    labels = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if labels.size else 0
    return EmbeddingBank(
        ids=np.array(ids, dtype=np.int64),
        labels=labels,
        vectors=np.array(vecs, dtype=np.float32).reshape(len(ids), dim),
        num_classes=num_classes,
    )


# -- paired datasets ---------------------------------------------------------


@dataclass(eq=False)
class PairedDataset:
    """Instance-aligned view over two modalities.

    ``base_avail_*`` remember which vectors existed before any masking, so
    applying the same mask twice selects the same subset.
    """

    ids: np.ndarray
    labels: np.ndarray
    x_a: np.ndarray
    x_b: np.ndarray
    avail_a: np.ndarray
    avail_b: np.ndarray
    num_classes: int
    base_avail_a: np.ndarray = field(default=None, repr=False)
    base_avail_b: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.avail_a = np.asarray(self.avail_a, dtype=bool)
        self.avail_b = np.asarray(self.avail_b, dtype=bool)
        if self.base_avail_a is None:
            self.base_avail_a = self.avail_a.copy()
        if self.base_avail_b is None:
            self.base_avail_b = self.avail_b.copy()
        if not (self.avail_a | self.avail_b).all():
            bad = self.ids[~(self.avail_a | self.avail_b)][0]
            raise AvailabilityError(f"instance {bad} has no available modality")

    def __len__(self):
        return self.ids.shape[0]

    @property
    def dim_a(self):
        return self.x_a.shape[1]

    @property
    def dim_b(self):
        return self.x_b.shape[1]

    def vectors(self, modality):
        return self.x_a if modality == "A" else self.x_b

    def avail(self, modality):
        return self.avail_a if modality == "A" else self.avail_b

    def subset(self, index) -> PairedDataset:
        index = np.asarray(index)
        return PairedDataset(
            ids=self.ids[index],
            labels=self.labels[index],
            x_a=self.x_a[index],
            x_b=self.x_b[index],
            avail_a=self.avail_a[index],
            avail_b=self.avail_b[index],
            num_classes=self.num_classes,
            base_avail_a=self.base_avail_a[index],
            base_avail_b=self.base_avail_b[index],
        )

    def swapped(self) -> PairedDataset:
        return PairedDataset(
            ids=self.ids, labels=self.labels, x_a=self.x_b, x_b=self.x_a,
            avail_a=self.avail_b, avail_b=self.avail_a, num_classes=self.num_classes,
            base_avail_a=self.base_avail_b, base_avail_b=self.base_avail_a,
        )

    def with_modality(self, modality, vectors=None, avail=None) -> PairedDataset:
        key = modality.lower()
        changes = {}
        if vectors is not None:
            changes[f"x_{key}"] = vectors
        if avail is not None:
            changes[f"avail_{key}"] = avail
        return replace(self, **changes)

    def counts(self):
        both = int((self.avail_a & self.avail_b).sum())
        return {
            "both": both,
            "a_only": int(self.avail_a.sum()) - both,
            "b_only": int(self.avail_b.sum()) - both,
        }

    def fingerprint(self):
        h = hashlib.sha256()
        for arr in (self.ids, self.labels, self.x_a, self.x_b, self.avail_a, self.avail_b):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def pair_banks(bank_a: EmbeddingBank, bank_b: EmbeddingBank) -> PairedDataset:
    """Join two banks on instance id; ids present in one bank only stay single-modality."""
    if bank_a.num_classes != bank_b.num_classes:
        raise DataError(f"banks disagree on class count: {bank_a.num_classes} vs {bank_b.num_classes}")
    ids = np.union1d(bank_a.ids, bank_b.ids)
    if ids.size == 0:
        raise DataError("pairing produced an empty dataset")
    n = ids.size
    labels = np.full(n, -1, dtype=np.int64)
    out = {}
    for key, bank in (("a", bank_a), ("b", bank_b)):
        pos = np.searchsorted(ids, bank.ids)
        x = np.zeros((n, bank.dim))
        x[pos] = bank.vectors
        avail = np.zeros(n, dtype=bool)
        avail[pos] = True
        seen = labels[pos]
        clash = (seen >= 0) & (seen != bank.labels)
        if clash.any():
            k = np.flatnonzero(clash)[0]
            raise IntegrityError(
                f"instance {bank.ids[k]} labeled {seen[k]} in bank A and {bank.labels[k]} in bank B"
            )
        labels[pos] = bank.labels
        out[key] = (x, avail)
    return PairedDataset(
        ids=ids, labels=labels, x_a=out["a"][0], x_b=out["b"][0],
        avail_a=out["a"][1], avail_b=out["b"][1], num_classes=bank_a.num_classes,
    )


def dataset_to_banks(ds: PairedDataset) -> tuple[EmbeddingBank, EmbeddingBank]:
    """Inverse of :func:`pair_banks` for the currently available vectors."""
    banks = []
    for tag, (x, avail) in enumerate(((ds.x_a, ds.avail_a), (ds.x_b, ds.avail_b))):
        banks.append(EmbeddingBank(ds.ids[avail], ds.labels[avail], x[avail], ds.num_classes, tag))
    return banks[0], banks[1]


# -- synthetic data -----------------------------------------------------------


def _unit_rows(x):
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def gen_synthetic(
    num_classes, dim_a, dim_b, per_class, sigma_a, sigma_b, cross_modal_correlation, seed,
    centroid_alignment=1.0,
):
    """Two-modality Gaussian clusters around unit-norm class centroids.

    A fixed map ``P`` carries modality A into B's space (the identity when the
    widths match, a scaled Gaussian matrix otherwise). B's centroid for class
    ``c`` is ``normalize(alpha * P mu_A(c) + sqrt(1 - alpha^2) * g_c)`` with
    ``alpha = centroid_alignment``, mimicking extractors that embed both
    modalities in one aligned space. B's per-instance noise is
    ``sqrt(1 - rho^2) * own + rho * P noise_A``.
    """
    if min(num_classes, dim_a, dim_b, per_class) < 1:
        raise ConfigError("class count, dimensions and per-class count must be >= 1")
    if sigma_a < 0 or sigma_b < 0:
        raise ConfigError("noise scales must be non-negative")
    rho = float(cross_modal_correlation)
    alpha = float(centroid_alignment)
    for name, v in (("cross-modal correlation", rho), ("centroid alignment", alpha)):
        if not -1.0 <= v <= 1.0:
            raise ConfigError(f"{name} must lie in [-1, 1], got {v}")
    rng = np.random.default_rng(seed)
    if dim_a == dim_b:
        proj = np.eye(dim_a)
    else:
        proj = rng.standard_normal((dim_a, dim_b)) / np.sqrt(dim_a)
    mu_a = _unit_rows(rng.standard_normal((num_classes, dim_a)))
    own_b = _unit_rows(rng.standard_normal((num_classes, dim_b)))
    mu_b = _unit_rows(alpha * _unit_rows(mu_a @ proj) + np.sqrt(1.0 - alpha**2) * own_b)

    n = num_classes * per_class
    labels = np.repeat(np.arange(num_classes), per_class)
    z_a = rng.standard_normal((n, dim_a))
    z_b = np.sqrt(1.0 - rho**2) * rng.standard_normal((n, dim_b)) + rho * (z_a @ proj)
    x_a = _unit_rows(mu_a[labels] + sigma_a * z_a)
    x_b = _unit_rows(mu_b[labels] + sigma_b * z_b)
    ids = np.arange(n, dtype=np.int64)
    return (
        EmbeddingBank(ids, labels, x_a, num_classes, modality_tag=0),
        EmbeddingBank(ids, labels, x_b, num_classes, modality_tag=1),
    )


# -- masking, corruption, splitting ------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    target_modality: str
    availability: float
    seed: int = 0
    phase: str = "test"

    def __post_init__(self):
        if self.target_modality not in MODALITIES:
            raise ConfigError(f"mask target must be one of {MODALITIES}, got {self.target_modality!r}")
        if not 0.0 <= self.availability <= 1.0:
            raise ConfigError(f"availability must lie in [0, 1], got {self.availability}")


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float
    mu: float = 0.0
    fraction_corrupted: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError(f"noise sigma must be >= 0, got {self.sigma}")
        if not 0.0 <= self.fraction_corrupted <= 1.0:
            raise ConfigError(f"corrupted fraction must lie in [0, 1], got {self.fraction_corrupted}")


def _seeded_order(ids, seed, salt):
    """Permutation of ``ids`` positions, a pure function of (seed, salt, id set)."""
    rng = np.random.default_rng(derive_seed(seed, salt))
    keys = rng.permutation(ids.size)
    order = np.argsort(ids, kind="stable")
    return order[keys]


def apply_mask(ds: PairedDataset, spec: MaskSpec) -> PairedDataset:
    """Keep the target modality on exactly ``round(availability * N)`` instances.

    ``N`` counts instances that originally had the target modality; the
    retained subset is drawn uniformly from them with ``spec.seed``.
    """
    m = spec.target_modality
    base = ds.base_avail_a if m == "A" else ds.base_avail_b
    holders = np.flatnonzero(base)
    keep_n = int(round(spec.availability * holders.size))
    order = _seeded_order(ds.ids[holders], spec.seed, "mask")
    keep = np.zeros(len(ds), dtype=bool)
    keep[holders[order[:keep_n]]] = True

    current = ds.avail(m)
    other = ds.avail("B" if m == "A" else "A")
    new_avail = current & keep
    stranded = current & ~new_avail & ~other
    if stranded.any():
        raise AvailabilityError(
            f"masking modality {m} would leave instance {ds.ids[stranded][0]} with no modality"
        )
    if np.array_equal(new_avail, current):
        return ds
    x = ds.vectors(m).copy()
    x[~new_avail] = 0.0
    return ds.with_modality(m, vectors=x, avail=new_avail)


def corrupt(ds: PairedDataset, spec: NoiseSpec, target_modality="both") -> PairedDataset:
    """Add i.i.d. Gaussian noise to the target modality's available vectors.

    Vectors are not re-normalized and availability flags are unchanged.
    """
    targets = MODALITIES if target_modality == "both" else (target_modality,)
    if spec.sigma == 0.0 and spec.mu == 0.0:
        return ds
    out = ds
    for m in targets:
        holders = np.flatnonzero(ds.avail(m))
        n_hit = int(round(spec.fraction_corrupted * holders.size))
        order = _seeded_order(ds.ids[holders], spec.seed, f"corrupt-select-{m}")
        hit = np.sort(holders[order[:n_hit]])
        rng = np.random.default_rng(derive_seed(spec.seed, f"corrupt-noise-{m}"))
        x = ds.vectors(m).copy()
        x[hit] += rng.normal(spec.mu, spec.sigma, size=(hit.size, x.shape[1]))
        out = out.with_modality(m, vectors=x)
    return out


def split(ds: PairedDataset, train_fraction, seed) -> tuple[PairedDataset, PairedDataset]:
    """Class-stratified train/test split."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    train_idx, test_idx = [], []
    for c in np.unique(ds.labels):
        members = np.flatnonzero(ds.labels == c)
        if members.size < 2:
            raise StratificationError(f"class {c} has {members.size} instance(s); stratified split needs >= 2")
        members = rng.permutation(members)
        k = min(max(int(round(train_fraction * members.size)), 1), members.size - 1)
        train_idx.append(members[:k])
        test_idx.append(members[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return ds.subset(train_idx), ds.subset(test_idx)
