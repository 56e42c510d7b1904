"""Synthetic few-shot classification tasks for the frozen dual encoder.

Each class is a Gaussian prototype patch matrix whose rows share a
strong class direction (aligned rows survive the encoder's attention
averaging, so class deltas stay large relative to the feature-space
component all classes share); samples are the prototype plus scaled
Gaussian noise. Class identity rows for the text branch are calibrated
against the frozen encoder so that the zero-shot branch is informative:
the per-class deviations of the prototypes' image features are
orthogonalized against the shared feature directions (the mean image
feature and the text branch's natural offset), normalized, and mapped
back into identity-row space by a fixed linear probe of the text branch
plus a few fixed-point refinement steps. Without this alignment a
randomly initialized encoder pair gives chance-level zero-shot accuracy
and the difficulty weighting degenerates.

Everything is deterministic per (encoder config, task seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from hashlib import sha256

import numpy as np

from .encoder import FrozenEncoder

CONTRAST = 4.0
WITHIN_CLASS_SPREAD = 0.5
REFINE_STEPS = 4
_DELTA_FLOOR = 1e-9

Sample = tuple[np.ndarray, int]


@dataclass
class FewShotTask:
    """A base-to-new split with few-shot training data.

    Train samples cover the base classes only, `shots` per class; both
    test splits are disjoint from training and from each other.
    """

    num_classes: int
    shots: int
    seed: int
    base_classes: tuple[int, ...]
    new_classes: tuple[int, ...]
    class_identities: np.ndarray
    prototypes: np.ndarray
    train: list[Sample]
    base_test: list[Sample]
    new_test: list[Sample]

    def __post_init__(self):
        if set(self.base_classes) & set(self.new_classes):
            raise ValueError("base and new classes must be disjoint")
        labels = [y for _, y in self.train]
        if any(y not in self.base_classes for y in labels):
            raise ValueError("train labels must come from the base classes")
        for c in self.base_classes:
            if labels.count(c) != self.shots:
                raise ValueError(f"class {c} has {labels.count(c)} train samples, "
                                 f"expected {self.shots}")

    def fingerprint(self) -> str:
        """Content hash over all arrays (determinism checks)."""
        h = sha256()
        h.update(self.class_identities.tobytes())
        h.update(self.prototypes.tobytes())
        for split in (self.train, self.base_test, self.new_test):
            for image, label in split:
                h.update(image.tobytes())
                h.update(label.to_bytes(4, "little"))
        return h.hexdigest()


def _calibrate_identities(encoder: FrozenEncoder,
                          prototypes: np.ndarray) -> np.ndarray:
    """Identity rows whose text features align with per-class image
    feature deviations (see module docstring)."""
    cfg = encoder.config
    num_classes = prototypes.shape[0]
    feats = np.stack([encoder.image_feature(p) for p in prototypes])

    # linear probe of the text branch around a zero identity row
    w0 = encoder.text_feature_identity(np.zeros(cfg.text_dim))
    probe = np.zeros((cfg.embed_dim, cfg.text_dim))
    for j in range(cfg.text_dim):
        basis = np.zeros(cfg.text_dim)
        basis[j] = 1.0
        probe[:, j] = encoder.text_feature_identity(basis) - w0

    # class deviations, orthogonal to the directions all classes share
    mean_feat = feats.mean(axis=0)
    u1 = mean_feat / np.linalg.norm(mean_feat)
    u2 = w0 - (w0 @ u1) * u1
    u2 = u2 / np.linalg.norm(u2)
    deltas = feats - mean_feat
    deltas -= np.outer(deltas @ u1, u1)
    deltas -= np.outer(deltas @ u2, u2)
    norms = np.linalg.norm(deltas, axis=1)
    if np.any(norms < _DELTA_FLOOR):
        raise ValueError("degenerate class prototypes: feature deviations "
                         "collapse onto the shared directions")
    deltas /= norms[:, None]

    targets = w0 + CONTRAST * np.linalg.norm(w0) * deltas
    identities = np.zeros((num_classes, cfg.text_dim))
    for c in range(num_classes):
        row = np.linalg.lstsq(probe, targets[c] - w0, rcond=None)[0]
        for _ in range(REFINE_STEPS):
            residual = targets[c] - encoder.text_feature_identity(row)
            row = row + np.linalg.lstsq(probe, residual, rcond=None)[0]
        identities[c] = row
    return identities


def generate_task(encoder: FrozenEncoder, num_classes: int, shots: int,
                  noise_scale: float, seed: int,
                  test_per_class: int = 16) -> FewShotTask:
    """Deterministically generate a base-to-new few-shot task.

    Classes split evenly: the first half are base classes (training and
    base-test), the second half new (new-test only).
    """
    if num_classes < 4 or num_classes % 2 != 0:
        raise ValueError(f"num_classes must be even and >= 4, got {num_classes}")
    if shots < 1 or test_per_class < 1:
        raise ValueError("shots and test_per_class must be positive")
    if noise_scale < 0:
        raise ValueError("noise_scale must be nonnegative")

    cfg = encoder.config
    rng = np.random.default_rng(seed)
    directions = rng.standard_normal((num_classes, cfg.visual_dim))
    prototypes = directions[:, None, :] + WITHIN_CLASS_SPREAD * \
        rng.standard_normal((num_classes, cfg.visual_tokens, cfg.visual_dim))
    identities = _calibrate_identities(encoder, prototypes)

    base = tuple(range(num_classes // 2))
    new = tuple(range(num_classes // 2, num_classes))

    def draw(class_ids, count):
        samples: list[Sample] = []
        for c in class_ids:
            for _ in range(count):
                noise = rng.standard_normal(prototypes[c].shape)
                samples.append((prototypes[c] + noise_scale * noise, c))
        return samples

    return FewShotTask(
        num_classes=num_classes, shots=shots, seed=seed,
        base_classes=base, new_classes=new,
        class_identities=identities, prototypes=prototypes,
        train=draw(base, shots),
        base_test=draw(base, test_per_class),
        new_test=draw(new, test_per_class),
    )
