"""DEX table parsing and invoked-API extraction.

Only the tables needed to name invoke targets are decoded: strings, type
ids, proto ids, method ids and class defs. Bytecode is walked instruction by
instruction purely to pick up the ``method_idx`` operand of invoke opcodes.
"""

from __future__ import annotations

import enum
import struct
import warnings
from dataclasses import dataclass, field

from .errors import BadMagic, ForgeWarning, IndexOutOfRange, TruncatedDex

HEADER_SIZE = 0x70
NO_INDEX = 0xFFFFFFFF

PLATFORM_PREFIXES = (
    "Landroid/",
    "Ljava/",
    "Ljavax/",
    "Lorg/apache/",
    "Lorg/json/",
    "Ldalvik/",
)


class MalformedCode(Exception):
    """Internal signal that a code item cannot be walked."""


@dataclass(frozen=True)
class DexHeader:
    magic: bytes
    file_size: int
    string_ids_size: int
    string_ids_off: int
    type_ids_size: int
    type_ids_off: int
    proto_ids_size: int
    proto_ids_off: int
    method_ids_size: int
    method_ids_off: int
    class_defs_size: int
    class_defs_off: int


@dataclass(frozen=True)
class MethodRef:
    class_descriptor: str
    name: str
    shorty_descriptor: str

    def call_string(self) -> str:
        return f"{self.class_descriptor}->{self.name}({self.shorty_descriptor})"


@dataclass
class DexTables:
    header: DexHeader
    strings: list[str]
    type_descriptors: list[str]
    methods: list[MethodRef]
    class_data_offsets: list[int] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


class ApiSource(enum.Enum):
    BYTECODE_SCAN = "BytecodeScan"
    METHOD_TABLE_FALLBACK = "MethodTableFallback"


@dataclass
class ApiCallReport:
    invoked: list[str]
    source: ApiSource = ApiSource.BYTECODE_SCAN
    warnings: list[str] = field(default_factory=list)


# -- low-level readers -------------------------------------------------------

def _u4(buf: bytes, off: int, section: str) -> int:
    if off < 0 or off + 4 > len(buf):
        raise TruncatedDex(f"{section}: read at {off} past end")
    return struct.unpack_from("<I", buf, off)[0]


def _table(buf: bytes, off: int, count: int, item: int, section: str) -> None:
    if count and (off < HEADER_SIZE or off + count * item > len(buf)):
        raise TruncatedDex(f"{section}: {count} items at {off} exceed buffer")


def read_uleb128(buf: bytes, off: int) -> tuple[int, int]:
    result = 0
    for i in range(5):
        if off >= len(buf):
            raise IndexError("uleb128 past end")
        b = buf[off]
        off += 1
        result |= (b & 0x7F) << (7 * i)
        if not b & 0x80:
            return result & 0xFFFFFFFF, off
    raise ValueError("uleb128 longer than 5 bytes")


def decode_mutf8(raw: bytes) -> tuple[str, bool]:
    """Decode modified UTF-8; returns ``(text, clean)``.

    Malformed sequences and unpaired surrogates become U+FFFD and clear the
    ``clean`` flag.
    """
    units: list[int] = []
    clean = True
    i, n = 0, len(raw)
    while i < n:
        b = raw[i]
        if b < 0x80:
            units.append(b)
            i += 1
        elif b & 0xE0 == 0xC0 and i + 1 < n and raw[i + 1] & 0xC0 == 0x80:
            units.append(((b & 0x1F) << 6) | (raw[i + 1] & 0x3F))
            i += 2
        elif (b & 0xF0 == 0xE0 and i + 2 < n
              and raw[i + 1] & 0xC0 == 0x80 and raw[i + 2] & 0xC0 == 0x80):
            units.append(((b & 0x0F) << 12) | ((raw[i + 1] & 0x3F) << 6) | (raw[i + 2] & 0x3F))
            i += 3
        else:
            units.append(0xFFFD)
            clean = False
            i += 1

    out = []
    j = 0
    while j < len(units):
        u = units[j]
        if 0xD800 <= u < 0xDC00 and j + 1 < len(units) and 0xDC00 <= units[j + 1] < 0xE000:
            out.append(chr(0x10000 + ((u - 0xD800) << 10) + (units[j + 1] - 0xDC00)))
            j += 2
            continue
        if 0xD800 <= u < 0xE000:
            out.append("�")
            clean = False
        else:
            out.append(chr(u))
        j += 1
    return "".join(out), clean


# -- table parsing -----------------------------------------------------------

def parse_dex(dex_bytes: bytes) -> DexTables:
    buf = bytes(dex_bytes)
    if len(buf) < 4 or buf[:4] != b"dex\n":
        raise BadMagic("not a dex file")
    if len(buf) < HEADER_SIZE:
        raise TruncatedDex(f"header: {len(buf)} bytes < {HEADER_SIZE}")
    vals = struct.unpack_from("<8I", buf, 0x38)
    file_size = struct.unpack_from("<I", buf, 0x20)[0]
    hdr = DexHeader(
        magic=buf[:8],
        file_size=file_size,
        string_ids_size=vals[0], string_ids_off=vals[1],
        type_ids_size=vals[2], type_ids_off=vals[3],
        proto_ids_size=vals[4], proto_ids_off=vals[5],
        method_ids_size=struct.unpack_from("<I", buf, 0x58)[0],
        method_ids_off=struct.unpack_from("<I", buf, 0x5C)[0],
        class_defs_size=struct.unpack_from("<I", buf, 0x60)[0],
        class_defs_off=struct.unpack_from("<I", buf, 0x64)[0],
    )
    if file_size > len(buf):
        raise TruncatedDex(f"header: file_size {file_size} > buffer {len(buf)}")
    limit = file_size if file_size >= HEADER_SIZE else len(buf)
    buf = buf[:limit]

    _table(buf, hdr.string_ids_off, hdr.string_ids_size, 4, "string_ids")
    _table(buf, hdr.type_ids_off, hdr.type_ids_size, 4, "type_ids")
    _table(buf, hdr.proto_ids_off, hdr.proto_ids_size, 12, "proto_ids")
    _table(buf, hdr.method_ids_off, hdr.method_ids_size, 8, "method_ids")
    _table(buf, hdr.class_defs_off, hdr.class_defs_size, 32, "class_defs")

    notes: list[str] = []
    strings = []
    bad_strings = 0
    for i in range(hdr.string_ids_size):
        off = _u4(buf, hdr.string_ids_off + 4 * i, "string_ids")
        try:
            _, start = read_uleb128(buf, off)
        except (IndexError, ValueError):
            raise TruncatedDex(f"string_data: bad length prefix for string {i}") from None
        end = buf.find(b"\0", start)
        if end < 0:
            raise TruncatedDex(f"string_data: unterminated string {i}")
        text, clean = decode_mutf8(buf[start:end])
        bad_strings += not clean
        strings.append(text)
    if bad_strings:
        notes.append(f"string_data: {bad_strings} malformed MUTF-8 strings replaced")

    def string_at(idx: int, section: str) -> str:
        if idx >= len(strings):
            raise IndexOutOfRange(section, idx)
        return strings[idx]

    types = [
        string_at(_u4(buf, hdr.type_ids_off + 4 * i, "type_ids"), "type_ids")
        for i in range(hdr.type_ids_size)
    ]
    shorties = [
        string_at(_u4(buf, hdr.proto_ids_off + 12 * i, "proto_ids"), "proto_ids")
        for i in range(hdr.proto_ids_size)
    ]

    methods = []
    for i in range(hdr.method_ids_size):
        class_idx, proto_idx, name_idx = struct.unpack_from(
            "<HHI", buf, hdr.method_ids_off + 8 * i
        )
        if class_idx >= len(types):
            raise IndexOutOfRange("method_ids.class_idx", class_idx)
        if proto_idx >= len(shorties):
            raise IndexOutOfRange("method_ids.proto_idx", proto_idx)
        methods.append(
            MethodRef(types[class_idx], string_at(name_idx, "method_ids.name_idx"), shorties[proto_idx])
        )

    class_data = []
    for i in range(hdr.class_defs_size):
        base = hdr.class_defs_off + 32 * i
        class_idx = _u4(buf, base, "class_defs")
        if class_idx >= len(types):
            raise IndexOutOfRange("class_defs.class_idx", class_idx)
        class_data.append(_u4(buf, base + 24, "class_defs"))

    return DexTables(hdr, strings, types, methods, class_data, notes)


# -- bytecode walk -----------------------------------------------------------

def _build_widths() -> list[int]:
    """Instruction width in 16-bit code units per opcode; 0 marks unused."""
    w = [0] * 256
    spans = [
        (0x00, 0x01, 1), (0x01, 0x02, 1), (0x02, 0x03, 2), (0x03, 0x04, 3),
        (0x04, 0x05, 1), (0x05, 0x06, 2), (0x06, 0x07, 3),
        (0x07, 0x08, 1), (0x08, 0x09, 2), (0x09, 0x0A, 3),
        (0x0A, 0x12, 1),                    # move-result*, move-exception, return*
        (0x12, 0x13, 1), (0x13, 0x14, 2), (0x14, 0x15, 3), (0x15, 0x17, 2),
        (0x17, 0x18, 3), (0x18, 0x19, 5), (0x19, 0x1A, 2),
        (0x1A, 0x1B, 2), (0x1B, 0x1C, 3), (0x1C, 0x1D, 2),
        (0x1D, 0x1F, 1), (0x1F, 0x21, 2), (0x21, 0x22, 1), (0x22, 0x24, 2),
        (0x24, 0x27, 3),                    # filled-new-array*, fill-array-data
        (0x27, 0x29, 1), (0x29, 0x2A, 2), (0x2A, 0x2B, 3),
        (0x2B, 0x2D, 3),                    # packed/sparse-switch
        (0x2D, 0x3E, 2),                    # cmp*, if-*
        (0x44, 0x6E, 2),                    # aget/aput, iget/iput, sget/sput
        (0x6E, 0x73, 3), (0x74, 0x79, 3),   # invoke-*, invoke-*/range
        (0x7B, 0x90, 1), (0x90, 0xB0, 2), (0xB0, 0xD0, 1), (0xD0, 0xE3, 2),
        (0xFA, 0xFC, 4), (0xFC, 0xFE, 3), (0xFE, 0x100, 2),
    ]
    for lo, hi, width in spans:
        for op in range(lo, hi):
            w[op] = width
    return w


INSN_WIDTH = _build_widths()
INVOKE_OPS = frozenset(range(0x6E, 0x73)) | frozenset(range(0x74, 0x79))


def _payload_width(insns: list[int], pc: int) -> int:
    ident = insns[pc]
    if ident == 0x0100:          # packed-switch-payload
        size = insns[pc + 1]
        return 4 + 2 * size
    if ident == 0x0200:          # sparse-switch-payload
        size = insns[pc + 1]
        return 2 + 4 * size
    if ident == 0x0300:          # fill-array-data-payload
        width = insns[pc + 1]
        size = insns[pc + 2] | (insns[pc + 3] << 16)
        return 4 + (size * width + 1) // 2
    return 1


def invoked_method_indices(insns: list[int]) -> list[int]:
    """method_idx of every invoke/invoke-range instruction in a code array."""
    found = []
    pc, n = 0, len(insns)
    while pc < n:
        unit = insns[pc]
        op = unit & 0xFF
        if op == 0x00 and unit >> 8:
            if pc + 4 > n and unit in (0x0100, 0x0200, 0x0300):
                raise MalformedCode(f"payload header truncated at {pc}")
            width = _payload_width(insns, pc)
        else:
            width = INSN_WIDTH[op]
            if width == 0:
                raise MalformedCode(f"unused opcode 0x{op:02x} at {pc}")
        if pc + width > n:
            raise MalformedCode(f"instruction at {pc} overruns code")
        if op in INVOKE_OPS:
            found.append(insns[pc + 1])
        pc += width
    return found


def _code_offsets(buf: bytes, class_data_off: int) -> list[int]:
    if class_data_off == 0:
        return []
    off = class_data_off
    sf, off = read_uleb128(buf, off)
    inf, off = read_uleb128(buf, off)
    dm, off = read_uleb128(buf, off)
    vm, off = read_uleb128(buf, off)
    for _ in range(sf + inf):
        _, off = read_uleb128(buf, off)
        _, off = read_uleb128(buf, off)
    codes = []
    for _ in range(dm + vm):
        _, off = read_uleb128(buf, off)
        _, off = read_uleb128(buf, off)
        code_off, off = read_uleb128(buf, off)
        if code_off:
            codes.append(code_off)
    return codes


def _code_insns(buf: bytes, code_off: int) -> list[int]:
    if code_off + 16 > len(buf):
        raise MalformedCode(f"code_item at {code_off} past end")
    (count,) = struct.unpack_from("<I", buf, code_off + 12)
    start = code_off + 16
    if start + 2 * count > len(buf):
        raise MalformedCode(f"code_item at {code_off} insns past end")
    return list(struct.unpack_from(f"<{count}H", buf, start))


def is_platform_call(descriptor: str, prefixes=PLATFORM_PREFIXES) -> bool:
    return descriptor.startswith(tuple(prefixes))


def scan_invokes(
    dex_bytes: bytes,
    tables: DexTables,
    prefixes=PLATFORM_PREFIXES,
    include_third_party: bool = False,
) -> ApiCallReport:
    """Collect the distinct API methods invoked anywhere in the bytecode.

    If any code item cannot be walked, the whole report falls back to the
    filtered method-id table and says so in ``source`` and ``warnings``.
    """
    buf = bytes(dex_bytes)
    if tables.header.file_size >= HEADER_SIZE:
        buf = buf[:tables.header.file_size]

    def keep(ref: MethodRef) -> bool:
        return include_third_party or is_platform_call(ref.class_descriptor, prefixes)

    hits: set[int] = set()
    try:
        for cd_off in tables.class_data_offsets:
            for code_off in _code_offsets(buf, cd_off):
                for idx in invoked_method_indices(_code_insns(buf, code_off)):
                    if idx >= len(tables.methods):
                        raise MalformedCode(f"method_idx {idx} out of range")
                    hits.add(idx)
    except (MalformedCode, IndexError, ValueError, struct.error) as exc:
        note = f"bytecode scan failed ({exc}); using method table"
        calls = sorted({m.call_string() for m in tables.methods if keep(m)})
        return ApiCallReport(calls, ApiSource.METHOD_TABLE_FALLBACK, [note])

    calls = sorted({tables.methods[i].call_string() for i in hits if keep(tables.methods[i])})
    return ApiCallReport(calls, ApiSource.BYTECODE_SCAN)


def serialize_api_text(report: ApiCallReport) -> bytes:
    return "".join(f"{call}\n" for call in report.invoked).encode("utf-8")


def api_text(dex_blobs, prefixes=PLATFORM_PREFIXES, include_third_party=False) -> bytes:
    """Parse, scan and serialize several dex buffers as one merged report.

    Fallbacks and string-decoding problems are raised as warnings.
    """
    calls: set[str] = set()
    source = ApiSource.BYTECODE_SCAN
    for name, blob in dex_blobs:
        tables = parse_dex(blob)
        for note in tables.warnings:
            warnings.warn(ForgeWarning(f"{name}: {note}"))
        report = scan_invokes(blob, tables, prefixes, include_third_party)
        for note in report.warnings:
            warnings.warn(ForgeWarning(f"{name}: {note}"))
        if report.source is ApiSource.METHOD_TABLE_FALLBACK:
            source = report.source
        calls.update(report.invoked)
    return serialize_api_text(ApiCallReport(sorted(calls), source))
