"""Raw/mask pairing, 4D -> 2D slicing and patient-wise splitting.

File naming: ``<stem>_raw.nii[.gz]`` pairs with ``<stem>_mask.nii[.gz]``;
the patient id is the part of the stem before the first underscore (the
whole stem when there is none).  A manifest CSV with rows
``raw_path,mask_path,patient_id`` overrides the convention.
"""
from __future__ import annotations

import csv
import logging
import math
import os
import re
from pathlib import Path

import numpy as np

from .nifti import Volume
from .types import SlicePair, normalize_minmax

log = logging.getLogger(__name__)

_NAME = re.compile(r"^(?P<stem>.+)_(?P<kind>raw|mask)\.nii(?:\.gz)?$")


class PairList(list):
    """List of ``(raw_path, mask_path, patient_id)`` with a ``skipped`` report."""

    def __init__(self, pairs=(), skipped=()):
        super().__init__(pairs)
        self.skipped = list(skipped)


def patient_from_stem(stem: str) -> str:
    return stem.split("_", 1)[0]


def clean_pairs(directory) -> PairList:
    """Keep only raw files with a matching mask (and vice versa)."""
    directory = Path(directory)
    try:
        names = sorted(os.listdir(directory))
    except OSError as exc:
        raise OSError(f"cannot read directory {directory}: {exc}") from exc
    raws, masks, skipped = {}, {}, []
    for name in names:
        m = _NAME.match(name)
        if not m:
            continue
        (raws if m["kind"] == "raw" else masks)[m["stem"]] = str(directory / name)
    pairs = []
    for stem in sorted(set(raws) | set(masks)):
        if stem in raws and stem in masks:
            pairs.append((raws[stem], masks[stem], patient_from_stem(stem)))
        else:
            skipped.append(raws.get(stem) or masks[stem])
    if skipped:
        log.info("skipping %d files without a partner: %s", len(skipped), skipped)
    return PairList(pairs, skipped)


def read_manifest(path) -> PairList:
    base = Path(path).parent
    pairs = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#") or row[0] == "raw_path":
                continue
            raw, mask, pid = (c.strip() for c in row[:3])
            pairs.append((str(base / raw), str(base / mask), pid))
    return PairList(pairs)


def write_manifest(path, pairs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["raw_path", "mask_path", "patient_id"])
        for row in pairs:
            w.writerow(row)


def extract_and_slice(raw: Volume, mask: Volume, patient_id: str = "", time_policy: str = "all",
                      drop_empty: bool = False, normalize: bool = True) -> list[SlicePair]:
    """Split a 3D/4D raw volume into axial 2D slices paired with the mask.

    ``time_policy`` is ``"all"`` (every frame) or ``"first"``.  Masks are
    binarized at ``> 0``.
    """
    r = np.asarray(raw.voxels)
    mk = np.asarray(mask.voxels)
    if r.ndim == 3:
        r = r[..., None]
    if mk.ndim == 4:
        if mk.shape[3] != 1:
            raise ValueError("mask must be a single 3D volume")
        mk = mk[..., 0]
    if r.ndim != 4 or mk.ndim != 3:
        raise ValueError(f"unsupported volume ranks: raw {raw.extents}, mask {mask.extents}")
    if r.shape[:3] != mk.shape:
        raise ValueError(f"spatial extents differ: raw {r.shape[:3]} vs mask {mk.shape}")
    if time_policy == "all":
        frames = range(r.shape[3])
    elif time_policy == "first":
        frames = range(1)
    else:
        raise ValueError(f"unknown time policy {time_policy!r}")
    binary = (mk > 0).astype(np.float32)
    out = []
    for t in frames:
        for z in range(r.shape[2]):
            m = binary[:, :, z]
            if drop_empty and not m.any():
                continue
            img = r[:, :, z, t].astype(np.float32)
            out.append(SlicePair(normalize_minmax(img) if normalize else img, m, patient_id, t, z))
    return out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_by_patient(pairs, seed: int = 0, val_fraction: float = 0.1, test_fraction: float = 0.1):
    """Partition by patient: test first, then validation, rest training.

    Subset sizes are fractions of the patient count rounded half up, at
    least one patient each.
    """
    patients = sorted({p.patient_id for p in pairs})
    if len(patients) < 3:
        raise ValueError(f"need at least 3 patients to split, got {len(patients)}")
    order = np.random.default_rng(seed).permutation(len(patients))
    shuffled = [patients[i] for i in order]
    n_test = max(1, _round_half_up(test_fraction * len(patients)))
    n_val = max(1, _round_half_up(val_fraction * len(patients)))
    if n_test + n_val >= len(patients):
        n_test = n_val = 1
    test_ids = set(shuffled[:n_test])
    val_ids = set(shuffled[n_test:n_test + n_val])
    train, val, test = [], [], []
    for p in pairs:
        (test if p.patient_id in test_ids else val if p.patient_id in val_ids else train).append(p)
    return train, val, test


def load_directory(directory, manifest=None, time_policy="all", drop_empty=False):
    """Read every matched raw/mask pair into slices."""
    from .nifti import read_nifti

    pairs = read_manifest(manifest) if manifest else clean_pairs(directory)
    slices = []
    for raw_path, mask_path, pid in pairs:
        slices += extract_and_slice(read_nifti(raw_path), read_nifti(mask_path), pid, time_policy, drop_empty)
    return slices, pairs
