"""Cohort manifests and scan files.

Manifest: UTF-8 TSV with header ``subject_id  scan_path  site  label  split``.
Scans: headerless CSV (row = ROI) or ``.bts`` binary
(``BTS1`` magic, V and T as little-endian u32, then V*T little-endian float32,
row-major).
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MANIFEST_COLUMNS = ("subject_id", "scan_path", "site", "label", "split")
SPLITS = ("train", "val", "test", "pretrain-only")
BTS_MAGIC = b"BTS1"


class FormatError(ValueError):
    pass


class ValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    scan_path: Path
    site: str
    label: int
    split: str


@dataclass(frozen=True)
class CohortManifest:
    entries: tuple[ManifestEntry, ...]
    atlas_rois: int

    def __len__(self):
        return len(self.entries)

    def labeled(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label >= 0]


@dataclass(frozen=True)
class TimeseriesScan:
    subject_id: str
    site: str
    label: int
    split: str
    data: np.ndarray

    @property
    def n_rois(self) -> int:
        return self.data.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.data.shape[1]


def _check_finite(m: np.ndarray, path) -> None:
    bad = np.argwhere(~np.isfinite(m))
    if len(bad):
        r, c = bad[0]
        raise ValidationError(f"{path}: non-finite value at row {r + 1}, column {c + 1}")


def load_scan(path) -> np.ndarray:
    """Load a V x T scan matrix from CSV or ``.bts``."""
    path = Path(path)
    if path.suffix == ".bts":
        raw = path.read_bytes()
        if raw[:4] != BTS_MAGIC or len(raw) < 12:
            raise FormatError(f"{path}: not a BTS1 file")
        v, t = struct.unpack("<II", raw[4:12])
        if len(raw) != 12 + 4 * v * t:
            raise FormatError(f"{path}: expected {v}x{t} payload, file has {len(raw) - 12} bytes")
        m = np.frombuffer(raw, dtype="<f4", offset=12).reshape(v, t).astype(np.float64)
    else:
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            for lineno, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not c.strip() for c in row):
                    continue
                if rows and len(row) != len(rows[0]):
                    raise FormatError(f"{path}: ragged row {lineno} has {len(row)} values, expected {len(rows[0])}")
                try:
                    rows.append([float(c) for c in row])
                except ValueError as exc:
                    raise FormatError(f"{path}: row {lineno}: {exc}") from None
        if not rows:
            raise FormatError(f"{path}: empty scan")
        m = np.array(rows, dtype=np.float64)
    _check_finite(m, path)
    return m


def write_scan(path, data) -> None:
    """Write a scan; format chosen by suffix (``.bts`` or CSV otherwise)."""
    path = Path(path)
    m = np.asarray(data)
    if m.ndim != 2:
        raise FormatError(f"scan must be 2-D, got shape {m.shape}")
    if path.suffix == ".bts":
        v, t = m.shape
        path.write_bytes(BTS_MAGIC + struct.pack("<II", v, t) + m.astype("<f4").tobytes())
    else:
        np.savetxt(path, m, delimiter=",", fmt="%.17g")


def load_manifest(path) -> CohortManifest:
    """Parse a manifest TSV and enforce a common ROI count across its scans."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty manifest") from None
        if len(set(header)) != len(header):
            raise FormatError(f"{path}: duplicate columns in header {header}")
        if tuple(header) != MANIFEST_COLUMNS:
            expected = "\t".join(MANIFEST_COLUMNS)
            raise FormatError(f"{path}: header must be {expected!r}, got {header}")
        entries, seen = [], set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise FormatError(f"{path}: line {lineno} has {len(row)} fields")
            sid, scan_path, site, label, split = row
            if sid in seen:
                raise ValidationError(f"{path}: duplicate subject_id {sid!r}")
            seen.add(sid)
            if split not in SPLITS:
                raise ValidationError(f"{path}: line {lineno}: unknown split {split!r}")
            try:
                lab = int(label)
            except ValueError:
                raise FormatError(f"{path}: line {lineno}: label {label!r} is not an integer") from None
            sp = Path(scan_path)
            if not sp.is_absolute():
                sp = path.parent / sp
            if not sp.exists():
                raise FileNotFoundError(f"{path}: line {lineno}: scan {scan_path} not found")
            entries.append(ManifestEntry(sid, sp, site, lab, split))
    if not entries:
        raise ValidationError(f"{path}: manifest has no entries")
    v0 = _scan_rois(entries[0].scan_path)
    for e in entries[1:]:
        v = _scan_rois(e.scan_path)
        if v != v0:
            raise ValidationError(
                f"ROI count mismatch: {entries[0].scan_path} has V={v0}, {e.scan_path} has V={v}")
    return CohortManifest(tuple(entries), v0)


def _scan_rois(path: Path) -> int:
    if path.suffix == ".bts":
        with open(path, "rb") as fh:
            head = fh.read(12)
        if head[:4] != BTS_MAGIC or len(head) < 12:
            raise FormatError(f"{path}: not a BTS1 file")
        return struct.unpack("<II", head[4:12])[0]
    return load_scan(path).shape[0]


def write_manifest(path, entries) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for e in entries:
            sp = e.scan_path
            try:
                sp = Path(sp).relative_to(path.parent)
            except ValueError:
                pass
            w.writerow([e.subject_id, str(sp), e.site, int(e.label), e.split])


def load_cohort(manifest: CohortManifest) -> list[TimeseriesScan]:
    """Load every scan of a manifest, in manifest order."""
    scans = []
    for e in manifest.entries:
        data = load_scan(e.scan_path)
        if data.shape[0] < 2 or data.shape[1] < 3:
            raise ValidationError(f"{e.scan_path}: need V >= 2 and T >= 3, got {data.shape}")
        data.setflags(write=False)
        scans.append(TimeseriesScan(e.subject_id, e.site, e.label, e.split, data))
    return scans
