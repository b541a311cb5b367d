"""Datasets, the known/unknown split protocol, and benchmark generation.

A `DomainDataset` is an immutable, ordered collection of examples from one
domain (source or target).  `make_osda_split` implements the alphabetical
split protocol, `relabel_for_training` produces the training view of a
split (source restricted to known classes, target unlabeled with hidden
ground truth), `synth_osda_benchmark` builds the desk-scale Gaussian-cluster
benchmark, and `load_image_folder` ingests an Office-style directory tree.
"""

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)

# Sentinel used for hidden target ground truth of unknown-class examples
# and for rejected predictions.
UNKNOWN = -1

SOURCE = "source"
TARGET = "target"


@dataclass(frozen=True)
class Example:
    """One input instance with an optional class label."""

    data: torch.Tensor
    label: int | None
    domain_tag: str


@dataclass(frozen=True)
class OsdaSplit:
    """Partition of class indices into known (L_s) and unknown (L_unk)."""

    known_classes: tuple[int, ...]
    unknown_classes: tuple[int, ...]

    @property
    def num_known(self):
        return len(self.known_classes)


class DomainDataset:
    """Ordered, immutable collection of examples sharing one domain tag.

    `data` is a stacked tensor of shape (N, *sample_shape).  `labels` holds
    one class index per example (indices into `class_names`), or None for
    unlabeled data.  `eval_labels`, when present, is the hidden ground
    truth of a relabeled target set; training code must never read it --
    use `hidden_eval_labels` from evaluation paths only.
    """

    def __init__(self, name, data, labels, class_names, domain_tag,
                 eval_labels=None):
        data = torch.as_tensor(data, dtype=torch.float32)
        if data.ndim < 2:
            raise ValueError("data must be (N, *sample_shape), got shape %s"
                             % (tuple(data.shape),))
        if not torch.isfinite(data).all():
            raise ValueError("dataset %r contains non-finite values" % name)
        if domain_tag not in (SOURCE, TARGET):
            raise ValueError("domain_tag must be 'source' or 'target', got %r"
                             % (domain_tag,))
        n = data.shape[0]
        if labels is not None:
            labels = [int(v) for v in labels]
            if len(labels) != n:
                raise ValueError("labels length %d != data length %d"
                                 % (len(labels), n))
            for v in labels:
                if not 0 <= v < len(class_names):
                    raise ValueError("label %d out of range for %d classes"
                                     % (v, len(class_names)))
        elif domain_tag == SOURCE:
            raise ValueError("source datasets must be labeled")
        if eval_labels is not None:
            eval_labels = [int(v) for v in eval_labels]
            if len(eval_labels) != n:
                raise ValueError("eval_labels length mismatch")
        self.name = name
        self.data = data
        self.labels = labels
        self.class_names = list(class_names)
        self.domain_tag = domain_tag
        self._eval_labels = eval_labels

    def __len__(self):
        return self.data.shape[0]

    @property
    def sample_shape(self):
        return tuple(self.data.shape[1:])

    def example(self, i):
        label = self.labels[i] if self.labels is not None else None
        return Example(self.data[i], label, self.domain_tag)

    @property
    def examples(self):
        return [self.example(i) for i in range(len(self))]

    def label_tensor(self):
        if self.labels is None:
            raise ValueError("dataset %r is unlabeled" % self.name)
        return torch.tensor(self.labels, dtype=torch.long)

    def subset(self, indices, name=None):
        labels = ([self.labels[i] for i in indices]
                  if self.labels is not None else None)
        ev = ([self._eval_labels[i] for i in indices]
              if self._eval_labels is not None else None)
        return DomainDataset(name or self.name, self.data[list(indices)],
                             labels, self.class_names, self.domain_tag,
                             eval_labels=ev)

    def __eq__(self, other):
        if not isinstance(other, DomainDataset):
            return NotImplemented
        return (self.name == other.name
                and self.domain_tag == other.domain_tag
                and self.class_names == other.class_names
                and self.labels == other.labels
                and self._eval_labels == other._eval_labels
                and self.data.shape == other.data.shape
                and torch.equal(self.data, other.data))


def has_hidden_labels(ds):
    return ds._eval_labels is not None


def hidden_eval_labels(ds):
    """Hidden ground truth of a relabeled target set (evaluation only).

    Returns a long tensor of compact known indices with UNKNOWN for
    unknown-class examples.  Training code must not call this.
    """
    if ds._eval_labels is None:
        raise ValueError("dataset %r carries no hidden ground truth"
                         % ds.name)
    return torch.tensor(ds._eval_labels, dtype=torch.long)


def make_osda_split(class_names, known_count):
    """Split class indices: the lexicographically-first `known_count` names
    become the known set, the rest the unknown set."""
    if len(set(class_names)) != len(class_names):
        raise ValueError("class names must be unique")
    if not 0 < known_count < len(class_names):
        raise ValueError("known_count must be in (0, %d), got %d"
                         % (len(class_names), known_count))
    order = sorted(range(len(class_names)), key=lambda i: class_names[i])
    return OsdaSplit(known_classes=tuple(order[:known_count]),
                     unknown_classes=tuple(order[known_count:]))


def _check_split(ds, split):
    covered = sorted(split.known_classes + split.unknown_classes)
    if covered != list(range(len(ds.class_names))):
        raise ValueError("split does not cover the %d classes of %r"
                         % (len(ds.class_names), ds.name))


def relabel_for_training(ds, split):
    """Produce the training view of `ds` under `split`.

    Source: unknown-class examples are dropped, labels remapped to the
    compact range [0, |L_s|).  Target: all examples kept, labels hidden;
    ground truth (compact index or UNKNOWN) is retained in a field read
    only by evaluation code.
    """
    _check_split(ds, split)
    compact = {orig: k for k, orig in enumerate(split.known_classes)}
    known_names = [ds.class_names[i] for i in split.known_classes]
    if ds.domain_tag == SOURCE:
        keep = [i for i, lab in enumerate(ds.labels) if lab in compact]
        data = ds.data[keep]
        labels = [compact[ds.labels[i]] for i in keep]
        return DomainDataset(ds.name, data.reshape((len(keep),) + ds.sample_shape),
                             labels, known_names, SOURCE)
    if ds.labels is None:
        raise ValueError("target dataset %r has no ground truth to hide"
                         % ds.name)
    ev = [compact.get(lab, UNKNOWN) for lab in ds.labels]
    return DomainDataset(ds.name, ds.data, None, known_names, TARGET,
                         eval_labels=ev)


@dataclass
class SynthConfig:
    """Gaussian-cluster OSDA benchmark: known clusters on an inner circle,
    unknown clusters on an outer circle at interleaved angles; the target
    domain is the same layout rotated and translated."""

    known_k: int = 4
    unknown_k: int = 3
    dim: int = 2
    per_class: int = 100
    shift_angle: float = 30.0
    shift_offset: float = 1.0
    noise_sigma: float = 0.5
    seed: int = 0
    known_radius: float = 5.0
    unknown_radius: float = 10.0
    # When set, samples are squashed to [0,1] and reshaped to (C,H,W);
    # requires dim == C*H*W.  Lets image-only code paths (augmentation,
    # CNN extractor) run at desk scale.
    image_shape: tuple[int, int, int] | None = None


def _synth_class_names(cfg):
    return (["known_%02d" % i for i in range(cfg.known_k)]
            + ["unknown_%02d" % i for i in range(cfg.unknown_k)])


def synth_osda_benchmark(cfg):
    """Generate (source, target, split) for the synthetic benchmark.

    Deterministic for a fixed cfg.seed.  Source holds the known clusters;
    target holds the same clusters under the configured rotation and
    translation plus the unknown clusters.
    """
    if cfg.known_k < 2 or cfg.unknown_k < 1:
        raise ValueError("need known_k >= 2 and unknown_k >= 1")
    if cfg.dim < 2 or cfg.per_class < 10:
        raise ValueError("need dim >= 2 and per_class >= 10")
    if cfg.noise_sigma <= 0:
        raise ValueError("noise_sigma must be > 0")
    if cfg.image_shape is not None and int(np.prod(cfg.image_shape)) != cfg.dim:
        raise ValueError("image_shape %s incompatible with dim %d"
                         % (cfg.image_shape, cfg.dim))

    rng = np.random.default_rng(cfg.seed)
    names = _synth_class_names(cfg)

    def mean_at(radius, angle):
        m = np.zeros(cfg.dim)
        m[0] = radius * np.cos(angle)
        m[1] = radius * np.sin(angle)
        return m

    known_means = [mean_at(cfg.known_radius, 2 * np.pi * i / cfg.known_k)
                   for i in range(cfg.known_k)]
    unknown_means = [mean_at(cfg.unknown_radius,
                             2 * np.pi * (i + 0.5) / cfg.unknown_k)
                     for i in range(cfg.unknown_k)]

    theta = np.deg2rad(cfg.shift_angle)
    rot = np.eye(cfg.dim)
    rot[0, 0] = rot[1, 1] = np.cos(theta)
    rot[0, 1] = -np.sin(theta)
    rot[1, 0] = np.sin(theta)
    offset = np.zeros(cfg.dim)
    offset[0] = cfg.shift_offset

    def sample(mean, n):
        return mean + cfg.noise_sigma * rng.standard_normal((n, cfg.dim))

    src_rows, src_labels = [], []
    for k, m in enumerate(known_means):
        src_rows.append(sample(m, cfg.per_class))
        src_labels.extend([k] * cfg.per_class)
    tgt_rows, tgt_labels = [], []
    for k, m in enumerate(known_means):
        tgt_rows.append(sample(rot @ m + offset, cfg.per_class))
        tgt_labels.extend([k] * cfg.per_class)
    for j, m in enumerate(unknown_means):
        tgt_rows.append(sample(rot @ m + offset, cfg.per_class))
        tgt_labels.extend([cfg.known_k + j] * cfg.per_class)

    src = np.concatenate(src_rows).astype(np.float32)
    tgt = np.concatenate(tgt_rows).astype(np.float32)

    if cfg.image_shape is not None:
        bound = cfg.unknown_radius + abs(cfg.shift_offset) + 6 * cfg.noise_sigma
        src = np.clip(0.5 + src / (2 * bound), 0.0, 1.0)
        tgt = np.clip(0.5 + tgt / (2 * bound), 0.0, 1.0)
        src = src.reshape((-1,) + tuple(cfg.image_shape))
        tgt = tgt.reshape((-1,) + tuple(cfg.image_shape))

    source = DomainDataset("synth_source", src, src_labels, names, SOURCE)
    target = DomainDataset("synth_target", tgt, tgt_labels, names, TARGET)
    split = make_osda_split(names, cfg.known_k)
    return source, target, split


def save_dataset_csv(ds, path):
    """Write a dataset as CSV with header dim0..dimN,label,domain.

    Image-shaped data is flattened; pass the shape back to
    `load_dataset_csv` to restore it.
    """
    flat = ds.data.reshape(len(ds), -1).numpy()
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["dim%d" % i for i in range(flat.shape[1])]
                   + ["label", "domain"])
        for i in range(len(ds)):
            lab = (ds.class_names[ds.labels[i]]
                   if ds.labels is not None else "")
            w.writerow(["%.8g" % v for v in flat[i]] + [lab, ds.domain_tag])


def load_dataset_csv(path, name=None, image_shape=None):
    path = Path(path)
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if len(rows) < 2:
        raise ValueError("empty dataset file %s" % path)
    header = rows[0]
    ndim = header.index("label")
    feats, raw_labels, domains = [], [], []
    for row in rows[1:]:
        feats.append([float(v) for v in row[:ndim]])
        raw_labels.append(row[ndim])
        domains.append(row[ndim + 1])
    if len(set(domains)) != 1:
        raise ValueError("mixed domain tags in %s" % path)
    data = np.asarray(feats, dtype=np.float32)
    if image_shape is not None:
        data = data.reshape((-1,) + tuple(image_shape))
    class_names = sorted(set(raw_labels) - {""})
    index = {c: i for i, c in enumerate(class_names)}
    labels = None
    if all(raw_labels):
        labels = [index[v] for v in raw_labels]
    return DomainDataset(name or path.stem, data, labels, class_names,
                         domains[0])


@dataclass
class LoadReport:
    """Per-folder ingestion outcome: decoded count and skipped files."""

    loaded: int = 0
    skipped: list = field(default_factory=list)


def load_image_folder(root, image_size, domain_tag, name=None):
    """Ingest `root/<class_name>/<image files>` as a DomainDataset.

    Class names are the sorted subdirectory names.  Images are decoded as
    RGB, resized to image_size x image_size (bilinear), scaled to [0,1],
    and stored channels-first.  Unreadable files are skipped with a logged
    warning and counted in the attached `load_report`.
    """
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise ValueError("image folder root %s does not exist" % root)
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError("image folder root %s has no class directories"
                         % root)
    class_names = [d.name for d in class_dirs]
    report = LoadReport()
    tensors, labels = [], []
    for label, d in enumerate(class_dirs):
        for fp in sorted(d.iterdir()):
            if not fp.is_file():
                continue
            try:
                with Image.open(fp) as im:
                    im = im.convert("RGB").resize(
                        (image_size, image_size), Image.BILINEAR)
                    arr = np.asarray(im, dtype=np.float32) / 255.0
            except Exception as exc:
                log.warning("skipping unreadable image %s: %s", fp, exc)
                report.skipped.append(str(fp))
                continue
            tensors.append(torch.from_numpy(arr).permute(2, 0, 1))
            labels.append(label)
    if not tensors:
        raise ValueError("no decodable images under %s" % root)
    report.loaded = len(tensors)
    ds = DomainDataset(name or root.name, torch.stack(tensors), labels,
                       class_names, domain_tag)
    ds.load_report = report
    return ds
