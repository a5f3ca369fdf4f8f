"""Dataset manifest: a tab-separated file of ``id, image, mask, split`` rows.

Paths are relative to the manifest's directory; ``-`` marks a missing mask.
"""

import csv
import os
from typing import NamedTuple

SPLITS = ("train", "val", "test", "pool")
HEADER = ("id", "image", "mask", "split")


class ManifestError(ValueError):
    pass


class ManifestRow(NamedTuple):
    id: str
    image_path: str
    mask_path: str
    split: str


def write_manifest(rows, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(HEADER)
        for row in rows:
            writer.writerow(row)


def read_manifest(path, check_files=True):
    """Parse and validate a manifest; returns a list of :class:`ManifestRow`."""
    if not os.path.isfile(path):
        raise ManifestError(f"manifest not found: {path}")
    root = os.path.dirname(os.path.abspath(path))
    rows = []
    seen = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        for lineno, fields in enumerate(reader, start=1):
            if not fields or fields[0].startswith("#"):
                continue
            if lineno == 1 and tuple(fields) == HEADER:
                continue
            if len(fields) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 tab-separated fields")
            row = ManifestRow(*fields)
            if row.split not in SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split {row.split!r}")
            if row.id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate id {row.id!r}")
            if row.split != "pool" and row.mask_path == "-":
                raise ManifestError(f"{path}:{lineno}: {row.split} sample {row.id!r} has no mask")
            if check_files:
                for rel in (row.image_path, row.mask_path):
                    if rel != "-" and not os.path.isfile(os.path.join(root, rel)):
                        raise ManifestError(f"{path}:{lineno}: missing file {rel}")
            seen.add(row.id)
            rows.append(row)
    return rows


def resolve(manifest_path, rel):
    return os.path.join(os.path.dirname(os.path.abspath(manifest_path)), rel)
