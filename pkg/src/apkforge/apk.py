"""Minimal ZIP reader for APK containers.

Only what the pipeline needs: walk the central directory, pull stored or
deflated members, verify CRC-32. ZIP64 and encrypted members are not handled.
"""

from __future__ import annotations

import enum
import hashlib
import struct
import warnings
import zlib
from dataclasses import dataclass, field

from .errors import (
    CrcMismatch,
    DecompressError,
    MalformedZip,
    MissingDex,
    MissingManifest,
    UnsupportedCompression,
)

EOCD_SIG = 0x06054B50
ZIP64_LOCATOR_SIG = 0x07064B50
CENTRAL_SIG = 0x02014B50
LOCAL_SIG = 0x04034B50

EOCD_SIZE = 22
# 22-byte record plus a maximal 65535-byte trailing comment
EOCD_SEARCH = EOCD_SIZE + 0xFFFF
CENTRAL_SIZE = 46
LOCAL_SIZE = 30

DEX_MAGIC = b"dex\n"
MANIFEST_NAME = "AndroidManifest.xml"


class Compression(enum.IntEnum):
    STORED = 0
    DEFLATE = 8


@dataclass(frozen=True)
class ZipEntryMeta:
    name: str
    compression: Compression
    compressed_size: int
    uncompressed_size: int
    crc32: int
    local_header_offset: int


@dataclass
class ApkArtifacts:
    apk_sha256: str
    dex_blobs: list[tuple[str, bytes]]
    manifest_axml: bytes
    extraction_warnings: list[str] = field(default_factory=list)

    def dex_payload(self, classes_only: bool = False) -> bytes:
        """Bytes imaged for the DEX channel.

        All dex members are concatenated in name order; ``classes_only``
        restricts to ``classes.dex`` (falling back to the first member).
        """
        if classes_only:
            for name, blob in self.dex_blobs:
                if name == "classes.dex":
                    return blob
            return self.dex_blobs[0][1]
        return b"".join(blob for _, blob in self.dex_blobs)


def _find_eocd(data: bytes) -> int:
    start = max(0, len(data) - EOCD_SEARCH)
    pos = data.rfind(struct.pack("<I", EOCD_SIG), start)
    while pos >= 0:
        # the comment length must reach exactly to the end of the buffer
        if pos + EOCD_SIZE <= len(data):
            (comment_len,) = struct.unpack_from("<H", data, pos + 20)
            if pos + EOCD_SIZE + comment_len == len(data):
                return pos
        pos = data.rfind(struct.pack("<I", EOCD_SIG), start, pos)
    # tolerate trailing junk: accept the last structurally complete record
    pos = data.rfind(struct.pack("<I", EOCD_SIG), start)
    if pos >= 0 and pos + EOCD_SIZE <= len(data):
        return pos
    raise MalformedZip("end of central directory not found")


def list_entries(apk_bytes: bytes) -> list[ZipEntryMeta]:
    """Walk the central directory and return one meta per usable entry.

    Entries with an unsupported compression method or the encryption flag set
    are skipped with an :class:`UnsupportedCompression` warning.
    """
    data = bytes(apk_bytes)
    eocd = _find_eocd(data)
    (_, disk, cd_disk, n_disk, n_total, cd_size, cd_offset, _) = struct.unpack_from(
        "<IHHHHIIH", data, eocd
    )
    if 0xFFFF in (n_disk, n_total) or 0xFFFFFFFF in (cd_size, cd_offset):
        raise MalformedZip("zip64 unsupported")
    if eocd >= 20 and struct.unpack_from("<I", data, eocd - 20)[0] == ZIP64_LOCATOR_SIG:
        raise MalformedZip("zip64 unsupported")
    if disk != 0 or cd_disk != 0 or n_disk != n_total:
        raise MalformedZip("multi-disk archives unsupported")
    if cd_offset + cd_size > eocd:
        raise MalformedZip("central directory runs past end record")

    entries: list[ZipEntryMeta] = []
    pos = cd_offset
    for _ in range(n_total):
        if pos + CENTRAL_SIZE > eocd:
            raise MalformedZip("truncated central directory")
        (sig, _vm, _vn, flags, method, _t, _d, crc, csize, usize,
         name_len, extra_len, comment_len, _disk, _iattr, _eattr, local_off) = struct.unpack_from(
            "<IHHHHHHIIIHHHHHII", data, pos
        )
        if sig != CENTRAL_SIG:
            raise MalformedZip(f"bad central directory signature at {pos}")
        name_end = pos + CENTRAL_SIZE + name_len
        if name_end + extra_len + comment_len > eocd:
            raise MalformedZip("truncated central directory")
        raw_name = data[pos + CENTRAL_SIZE:name_end]
        pos = name_end + extra_len + comment_len
        name = raw_name.decode("utf-8" if flags & 0x800 else "cp437", errors="replace")
        if 0xFFFFFFFF in (csize, usize, local_off):
            raise MalformedZip("zip64 unsupported")
        if flags & 0x1:
            warnings.warn(UnsupportedCompression(f"{name}: encrypted entry skipped"))
            continue
        if method not in (Compression.STORED, Compression.DEFLATE):
            warnings.warn(UnsupportedCompression(f"{name}: compression method {method} skipped"))
            continue
        entries.append(
            ZipEntryMeta(name, Compression(method), csize, usize, crc, local_off)
        )
    return entries


def extract_entry(apk_bytes: bytes, meta: ZipEntryMeta) -> bytes:
    data = apk_bytes
    off = meta.local_header_offset
    if off + LOCAL_SIZE > len(data):
        raise MalformedZip(f"{meta.name}: local header out of bounds")
    sig, = struct.unpack_from("<I", data, off)
    if sig != LOCAL_SIG:
        raise MalformedZip(f"{meta.name}: bad local header signature")
    name_len, extra_len = struct.unpack_from("<HH", data, off + 26)
    start = off + LOCAL_SIZE + name_len + extra_len
    end = start + meta.compressed_size
    if end > len(data):
        raise MalformedZip(f"{meta.name}: member data out of bounds")
    raw = data[start:end]

    if meta.compression is Compression.STORED:
        payload = bytes(raw)
    else:
        try:
            d = zlib.decompressobj(-15)
            # cap output so a lying header cannot balloon memory
            payload = d.decompress(raw, meta.uncompressed_size + 1)
        except zlib.error as exc:
            raise DecompressError(f"{meta.name}: {exc}") from None
    if len(payload) != meta.uncompressed_size:
        raise DecompressError(
            f"{meta.name}: expected {meta.uncompressed_size} bytes, got {len(payload)}"
        )
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    if crc != meta.crc32:
        raise CrcMismatch(f"{meta.name}: crc32 {crc:08x} != stored {meta.crc32:08x}")
    return payload


def _is_dex_member(name: str) -> bool:
    return "/" not in name and name.endswith(".dex")


def extract_artifacts(apk_bytes: bytes) -> ApkArtifacts:
    """Pull every top-level ``*.dex`` member and the binary manifest."""
    data = bytes(apk_bytes)
    notes: list[str] = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        entries = list_entries(data)
    notes.extend(str(w.message) for w in caught)

    chosen: dict[str, ZipEntryMeta] = {}
    for meta in entries:
        if not (_is_dex_member(meta.name) or meta.name == MANIFEST_NAME):
            continue
        if meta.name in chosen:
            notes.append(f"{meta.name}: duplicate member, last occurrence used")
        chosen[meta.name] = meta

    dex_blobs = []
    for name in sorted(n for n in chosen if n != MANIFEST_NAME):
        blob = extract_entry(data, chosen[name])
        if not blob.startswith(DEX_MAGIC):
            notes.append(f"{name}: missing dex magic, ignored")
            continue
        dex_blobs.append((name, blob))
    if not dex_blobs:
        raise MissingDex("no .dex member")
    if MANIFEST_NAME not in chosen:
        raise MissingManifest(f"no {MANIFEST_NAME} member")
    manifest = extract_entry(data, chosen[MANIFEST_NAME])

    return ApkArtifacts(
        apk_sha256=hashlib.sha256(data).hexdigest(),
        dex_blobs=dex_blobs,
        manifest_axml=manifest,
        extraction_warnings=notes,
    )
