"""Synthetic triplet benchmark with controllable correspondence noise.

Each clean triplet is built from a latent integer attribute vector `a`:
the reference embeds `a`, the modification embeds a sparse delta, and the
target gallery entry embeds `a + delta` plus optional Gaussian
"unmentioned discrepancy" noise. Corrupted records either describe only
part of the delta (`partial`) or point at a wrong gallery entry
(`mismatch`); ground-truth labels are kept for diagnostics.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

NOISE_LABELS = ("clean", "partial", "mismatch")
ATTR_LEVELS = 5  # latent attributes take values in [0, ATTR_LEVELS)
# embed attributes centered so random pairs are near-orthogonal instead of
# sharing one large mean component
_ATTR_CENTER = (ATTR_LEVELS - 1) / 2.0


@dataclass
class GenConfig:
    n_triplets: int = 2000
    n_gallery: int = 2500
    d_in: int = 16
    n_attrs: int = 8
    sigma: float = 0.0
    partial_fraction: float = 0.5
    unmentioned_noise_std: float = 0.1
    seed: int = 0

    def validate(self):
        if self.n_triplets < 1:
            raise ConfigError("n_triplets must be >= 1")
        if self.n_gallery < self.n_triplets:
            raise ConfigError("n_gallery must be >= n_triplets")
        if self.d_in < self.n_attrs:
            raise ConfigError("d_in must be >= n_attrs")
        if self.n_attrs < 2:
            raise ConfigError("n_attrs must be >= 2 (partial noise needs |delta| >= 2)")
        if not 0.0 <= self.sigma <= 1.0:
            raise ConfigError(f"sigma={self.sigma} outside [0, 1]")
        if not 0.0 <= self.partial_fraction <= 1.0:
            raise ConfigError(f"partial_fraction={self.partial_fraction} outside [0, 1]")
        if self.unmentioned_noise_std < 0.0:
            raise ConfigError("unmentioned_noise_std must be >= 0")


@dataclass
class TripletRecord:
    id: int
    ref_vec: np.ndarray
    mod_vec: np.ndarray
    target_id: int
    noise_label: str
    # latent diagnostics, not part of the wire format
    attrs: np.ndarray | None = field(default=None, repr=False)
    described_delta: np.ndarray | None = field(default=None, repr=False)
    original_target_id: int | None = field(default=None, repr=False)


@dataclass
class GalleryEntry:
    id: int
    vec: np.ndarray
    attributes: np.ndarray | None = field(default=None, repr=False)


def _attribute_projection(rng, d_in, n_attrs):
    # near-orthonormal columns so attribute geometry survives embedding
    g = rng.standard_normal((d_in, d_in))
    q, _ = np.linalg.qr(g)
    return q[:, :n_attrs]


def _distinct_attribute_vectors(rng, n, n_attrs):
    seen = set()
    out = []
    while len(out) < n:
        a = rng.integers(0, ATTR_LEVELS, size=n_attrs)
        key = tuple(int(x) for x in a)
        if key not in seen:
            seen.add(key)
            out.append(a.astype(np.float64))
    return out


def generate(cfg: GenConfig):
    """Build (records, gallery) deterministically from cfg.seed."""
    cfg.validate()
    if ATTR_LEVELS**cfg.n_attrs < 2 * cfg.n_gallery:
        raise ConfigError("attribute space too small for distinct gallery entries")
    rng = np.random.default_rng(cfg.seed)
    proj = _attribute_projection(rng, cfg.d_in, cfg.n_attrs)

    target_attrs = _distinct_attribute_vectors(rng, cfg.n_gallery, cfg.n_attrs)
    gallery = []
    for gid, attrs in enumerate(target_attrs):
        vec = proj @ (attrs - _ATTR_CENTER)
        if cfg.unmentioned_noise_std > 0:
            vec = vec + rng.normal(0.0, cfg.unmentioned_noise_std, size=cfg.d_in)
        gallery.append(GalleryEntry(id=gid, vec=vec, attributes=attrs))

    # triplet i targets gallery entry i; remaining entries are distractors
    records = []
    for i in range(cfg.n_triplets):
        tgt = gallery[i].attributes
        support_size = int(rng.integers(2, min(3, cfg.n_attrs) + 1))
        support = rng.choice(cfg.n_attrs, size=support_size, replace=False)
        delta = np.zeros(cfg.n_attrs)
        for k in support:
            step = 0.0
            while step == 0.0:
                step = float(rng.integers(-2, 3))
            delta[k] = step
        a = tgt - delta
        records.append(
            TripletRecord(
                id=i,
                ref_vec=proj @ (a - _ATTR_CENTER),
                mod_vec=proj @ delta,
                target_id=i,
                noise_label="clean",
                attrs=a,
                described_delta=delta.copy(),
                original_target_id=i,
            )
        )

    n_noisy = int(np.floor(cfg.sigma * cfg.n_triplets))
    noisy_ids = rng.choice(cfg.n_triplets, size=n_noisy, replace=False)
    n_partial = int(round(cfg.partial_fraction * n_noisy))
    for pos, rid in enumerate(noisy_ids):
        rec = records[int(rid)]
        if pos < n_partial:
            # describe only a nonempty strict subset of the true delta
            support = np.flatnonzero(rec.described_delta)
            keep = int(rng.integers(1, len(support)))
            kept = rng.choice(support, size=keep, replace=False)
            sub = np.zeros(cfg.n_attrs)
            for k in kept:
                sub[k] = rec.described_delta[k]
            rec.mod_vec = proj @ sub
            rec.described_delta = sub
            rec.noise_label = "partial"
        else:
            wrong = int(rng.integers(0, cfg.n_gallery - 1))
            if wrong >= rec.target_id:
                wrong += 1
            rec.target_id = wrong
            rec.noise_label = "mismatch"
    return records, gallery


def split(records, fraction: float, seed: int):
    """Seeded disjoint/exhaustive split; the test side keeps only clean records."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction={fraction} outside (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    clean_positions = [i for i in order if records[i].noise_label == "clean"]
    n_test = int(np.floor(fraction * len(clean_positions)))
    test_set = set(clean_positions[:n_test])
    train = [records[i] for i in order if i not in test_set]
    test = [records[i] for i in sorted(test_set)]
    if not test:
        warnings.warn("test split is empty (no clean records available)")
    return train, test


def _fmt(vec):
    return "[" + ", ".join(f"{x:.17g}" for x in vec) + "]"


def write_dataset(records, path):
    with open(path, "w", newline="\n") as fh:
        for r in records:
            fh.write(
                '{"id": %d, "ref": %s, "mod": %s, "target_id": %d, "noise_label": "%s"}\n'
                % (r.id, _fmt(r.ref_vec), _fmt(r.mod_vec), r.target_id, r.noise_label)
            )


def write_gallery(gallery, path):
    with open(path, "w", newline="\n") as fh:
        for g in gallery:
            fh.write('{"id": %d, "vec": %s}\n' % (g.id, _fmt(g.vec)))


def read_dataset(path):
    records = []
    try:
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                if obj["noise_label"] not in NOISE_LABELS:
                    raise FormatError(f"unknown noise_label {obj['noise_label']!r}")
                records.append(
                    TripletRecord(
                        id=int(obj["id"]),
                        ref_vec=np.asarray(obj["ref"], dtype=np.float64),
                        mod_vec=np.asarray(obj["mod"], dtype=np.float64),
                        target_id=int(obj["target_id"]),
                        noise_label=obj["noise_label"],
                    )
                )
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"bad dataset file {path}: {exc}") from exc
    return records


def read_gallery(path):
    gallery = []
    try:
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                gallery.append(
                    GalleryEntry(id=int(obj["id"]), vec=np.asarray(obj["vec"], dtype=np.float64))
                )
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise FormatError(f"bad gallery file {path}: {exc}") from exc
    return gallery
