"""Binary AndroidManifest.xml (AXML) decoding and text rendering.

The chunk layout follows the platform's ResourceTypes.h. Rendering is our own
fixed style (4-space indent, attributes in stored order) since the rendered
bytes feed straight into the image pipeline.
"""

from __future__ import annotations

import re
import struct
import warnings
from dataclasses import dataclass, field
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from .errors import BadMagic, ForgeWarning, IndexOutOfRange, TruncatedChunk, UnbalancedElements

RES_XML_TYPE = 0x0003
RES_STRING_POOL_TYPE = 0x0001
RES_XML_RESOURCE_MAP_TYPE = 0x0180
RES_XML_START_NAMESPACE_TYPE = 0x0100
RES_XML_END_NAMESPACE_TYPE = 0x0101
RES_XML_START_ELEMENT_TYPE = 0x0102
RES_XML_END_ELEMENT_TYPE = 0x0103
RES_XML_CDATA_TYPE = 0x0104

UTF8_FLAG = 1 << 8
NO_ENTRY = 0xFFFFFFFF

TYPE_NULL = 0x00
TYPE_REFERENCE = 0x01
TYPE_ATTRIBUTE = 0x02
TYPE_STRING = 0x03
TYPE_FLOAT = 0x04
TYPE_DYNAMIC_REFERENCE = 0x07
TYPE_DYNAMIC_ATTRIBUTE = 0x08
TYPE_INT_DEC = 0x10
TYPE_INT_HEX = 0x11
TYPE_INT_BOOLEAN = 0x12
TYPE_FIRST_COLOR = 0x1C
TYPE_LAST_COLOR = 0x1F

INDENT = "    "
_NAME_RE = re.compile(r"^[A-Za-z_][\w.\-]*$", re.ASCII)


@dataclass
class Attribute:
    namespace: str | None
    name: str
    value: str


@dataclass
class Element:
    namespace: str | None
    name: str
    attributes: list[Attribute] = field(default_factory=list)
    # (prefix, uri) declarations; only the root carries any
    ns_decls: list[tuple[str, str]] = field(default_factory=list)
    children: list["Element | str"] = field(default_factory=list)


@dataclass
class AxmlDocument:
    string_pool: list[str]
    root: Element
    xml_text: str
    warnings: list[str] = field(default_factory=list)


def _read_pool(buf: bytes, start: int, header_size: int, size: int) -> list[str]:
    if header_size < 28:
        raise TruncatedChunk(RES_STRING_POOL_TYPE, "header too small")
    count, _styles, flags, strings_start, _ = struct.unpack_from("<5I", buf, start + 8)
    end = start + size
    table = start + header_size
    if table + 4 * count > end:
        raise TruncatedChunk(RES_STRING_POOL_TYPE, "offset table")
    offsets = struct.unpack_from(f"<{count}I", buf, table)
    base = start + strings_start
    utf8 = bool(flags & UTF8_FLAG)
    pool = []
    for off in offsets:
        p = base + off
        if p >= end or p < start:
            raise TruncatedChunk(RES_STRING_POOL_TYPE, "string offset")
        if utf8:
            _, p = _len8(buf, p, end)
            n, p = _len8(buf, p, end)
            if p + n > end:
                raise TruncatedChunk(RES_STRING_POOL_TYPE, "utf-8 string")
            pool.append(buf[p:p + n].decode("utf-8", errors="replace"))
        else:
            n, p = _len16(buf, p, end)
            if p + 2 * n > end:
                raise TruncatedChunk(RES_STRING_POOL_TYPE, "utf-16 string")
            pool.append(buf[p:p + 2 * n].decode("utf-16-le", errors="replace"))
    return pool


def _len8(buf, p, end):
    if p + 1 > end:
        raise TruncatedChunk(RES_STRING_POOL_TYPE, "length")
    n = buf[p]
    if n & 0x80:
        if p + 2 > end:
            raise TruncatedChunk(RES_STRING_POOL_TYPE, "length")
        return ((n & 0x7F) << 8) | buf[p + 1], p + 2
    return n, p + 1


def _len16(buf, p, end):
    if p + 2 > end:
        raise TruncatedChunk(RES_STRING_POOL_TYPE, "length")
    (n,) = struct.unpack_from("<H", buf, p)
    if n & 0x8000:
        if p + 4 > end:
            raise TruncatedChunk(RES_STRING_POOL_TYPE, "length")
        (lo,) = struct.unpack_from("<H", buf, p + 2)
        return ((n & 0x7FFF) << 16) | lo, p + 4
    return n, p + 2


def format_float(bits: int) -> str:
    text = np.format_float_positional(
        np.frombuffer(struct.pack("<I", bits), dtype="<f4")[0], trim="0"
    )
    return text


def render_value(dtype: int, data: int, raw: str | None) -> str:
    if dtype == TYPE_STRING:
        return raw if raw is not None else ""
    if dtype == TYPE_INT_DEC:
        return str(data - (1 << 32) if data & 0x80000000 else data)
    if dtype == TYPE_INT_HEX:
        return f"0x{data:x}"
    if dtype == TYPE_INT_BOOLEAN:
        return "true" if data else "false"
    if dtype in (TYPE_REFERENCE, TYPE_DYNAMIC_REFERENCE):
        return f"@0x{data:08x}"
    if dtype in (TYPE_ATTRIBUTE, TYPE_DYNAMIC_ATTRIBUTE):
        return f"?0x{data:08x}"
    if dtype == TYPE_FLOAT:
        return format_float(data)
    if TYPE_FIRST_COLOR <= dtype <= TYPE_LAST_COLOR:
        return f"#{data:08x}"
    if dtype == TYPE_NULL:
        return ""
    return f"0x{data:08x}"


class _Decoder:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pool: list[str] | None = None
        self.res_ids: list[int] = []
        self.notes: list[str] = []
        self.prefixes: dict[str, str] = {}
        self.stack: list[Element] = []
        self.roots: list[Element] = []

    def string(self, idx: int, what: str) -> str:
        if self.pool is None:
            raise TruncatedChunk(RES_STRING_POOL_TYPE, "string pool missing")
        if idx >= len(self.pool):
            raise IndexOutOfRange(what, idx)
        return self.pool[idx]

    def opt_string(self, idx: int, what: str) -> str | None:
        return None if idx == NO_ENTRY else self.string(idx, what)

    def qualify(self, uri: str | None, name: str, idx: int) -> tuple[str | None, str]:
        if not _NAME_RE.match(name):
            # obfuscated manifests blank out attribute names; fall back to the resource id
            rid = self.res_ids[idx] if idx < len(self.res_ids) else idx
            name = f"res_0x{rid:08x}"
        return (self.bind(uri, None) if uri else None), name

    def bind(self, uri: str, wanted: str | None) -> str:
        if uri in self.prefixes:
            return self.prefixes[uri]
        taken = set(self.prefixes.values())
        prefix = wanted
        if (not prefix or not _NAME_RE.match(prefix) or prefix in taken
                or prefix.lower().startswith("xml")):
            n = len(self.prefixes)
            while f"ns{n}" in taken:
                n += 1
            prefix = f"ns{n}"
        self.prefixes[uri] = prefix
        return prefix

    def run(self) -> Element:
        buf = self.buf
        if len(buf) < 8:
            raise BadMagic("buffer too small for AXML header")
        rtype, hsize, total = struct.unpack_from("<HHI", buf, 0)
        if rtype != RES_XML_TYPE or hsize != 8:
            raise BadMagic(f"leading word 0x{struct.unpack_from('<I', buf, 0)[0]:08x}")
        end = min(total, len(buf)) if total >= 8 else len(buf)
        pos = 8
        while pos + 8 <= end:
            ctype, chsize, csize = struct.unpack_from("<HHI", buf, pos)
            if csize < 8 or chsize < 8 or chsize > csize or pos + csize > end:
                raise TruncatedChunk(ctype, f"size {csize} at {pos}")
            self.chunk(ctype, pos, chsize, csize)
            pos += csize
        if self.stack:
            raise UnbalancedElements(f"{len(self.stack)} elements left open")
        if self.pool is None:
            raise TruncatedChunk(RES_STRING_POOL_TYPE, "string pool missing")
        if len(self.roots) != 1:
            raise UnbalancedElements(f"expected one root element, found {len(self.roots)}")
        root = self.roots[0]
        root.ns_decls = [(prefix, uri) for uri, prefix in self.prefixes.items()]
        return root

    def chunk(self, ctype: int, pos: int, hsize: int, size: int) -> None:
        buf = self.buf
        if ctype == RES_STRING_POOL_TYPE:
            if self.pool is not None:
                self.notes.append("extra string pool ignored")
                return
            self.pool = _read_pool(buf, pos, hsize, size)
            return
        if ctype == RES_XML_RESOURCE_MAP_TYPE:
            n = (size - hsize) // 4
            self.res_ids = list(struct.unpack_from(f"<{n}I", buf, pos + hsize))
            return
        if ctype not in (RES_XML_START_NAMESPACE_TYPE, RES_XML_END_NAMESPACE_TYPE,
                         RES_XML_START_ELEMENT_TYPE, RES_XML_END_ELEMENT_TYPE,
                         RES_XML_CDATA_TYPE):
            self.notes.append(f"unknown chunk type 0x{ctype:04x} skipped")
            return

        body = pos + hsize
        if hsize < 16 or body + 8 > pos + size:
            raise TruncatedChunk(ctype, "node body")
        a, b = struct.unpack_from("<II", buf, body)

        if ctype == RES_XML_START_NAMESPACE_TYPE:
            self.bind(self.string(b, "namespace.uri"), self.opt_string(a, "namespace.prefix"))
        elif ctype == RES_XML_END_NAMESPACE_TYPE:
            pass
        elif ctype == RES_XML_START_ELEMENT_TYPE:
            self.start_element(ctype, pos, body, size, a, b)
        elif ctype == RES_XML_END_ELEMENT_TYPE:
            if not self.stack:
                raise UnbalancedElements("end element without start")
            el = self.stack.pop()
            name = self.string(b, "element.name")
            if name != el.name and _NAME_RE.match(name):
                raise UnbalancedElements(f"</{name}> closes <{el.name}>")
        else:  # CDATA
            if self.stack:
                text = self.string(a, "cdata")
                if text.strip():
                    self.stack[-1].children.append(text.strip())

    def start_element(self, ctype, pos, body, size, ns_idx, name_idx):
        buf = self.buf
        if body + 20 > pos + size:
            raise TruncatedChunk(ctype, "element header")
        attr_start, attr_size, attr_count = struct.unpack_from("<HHH", buf, body + 8)
        uri = self.opt_string(ns_idx, "element.ns")
        name = self.string(name_idx, "element.name")
        if not _NAME_RE.match(name):
            name = "element"
        el = Element(None, name)
        if uri:
            el.namespace, _ = self.qualify(uri, name, 0)
        if attr_count and attr_size < 20:
            raise TruncatedChunk(ctype, "attribute size")
        first = body + attr_start
        if first + attr_count * attr_size > pos + size:
            raise TruncatedChunk(ctype, "attributes")
        seen = set()
        for i in range(attr_count):
            p = first + i * attr_size
            a_ns, a_name, a_raw, _vsize, _res0, dtype, data = struct.unpack_from("<IIIHBBI", buf, p)
            raw_name = self.string(a_name, "attribute.name")
            prefix, qname = self.qualify(self.opt_string(a_ns, "attribute.ns"), raw_name, a_name)
            raw = self.opt_string(a_raw, "attribute.raw")
            if dtype == TYPE_STRING and raw is None:
                raw = self.string(data, "attribute.value")
            key = (prefix, qname)
            if key in seen:
                self.notes.append(f"duplicate attribute {qname} on <{name}> dropped")
                continue
            seen.add(key)
            el.attributes.append(Attribute(prefix, qname, render_value(dtype, data, raw)))
        if self.stack:
            self.stack[-1].children.append(el)
        else:
            self.roots.append(el)
        self.stack.append(el)


def _clean_text(s: str) -> str:
    # drop characters XML 1.0 cannot carry at all
    return "".join(
        c for c in s
        if c in "\t\n\r" or 0x20 <= ord(c) <= 0xD7FF or 0xE000 <= ord(c) <= 0xFFFD or ord(c) >= 0x10000
    )


def _open_tag(el: Element, self_close: bool) -> str:
    tag = f"{el.namespace}:{el.name}" if el.namespace else el.name
    parts = [tag]
    for prefix, uri in el.ns_decls:
        parts.append(f"xmlns:{prefix}={quoteattr(_clean_text(uri))}")
    for attr in el.attributes:
        qn = f"{attr.namespace}:{attr.name}" if attr.namespace else attr.name
        value = quoteattr(_clean_text(attr.value), {"\n": "&#10;", "\r": "&#13;", "\t": "&#9;"})
        parts.append(f"{qn}={value}")
    return "<" + " ".join(parts) + ("/>" if self_close else ">")


def render(root: Element) -> str:
    lines: list[str] = []
    # explicit stack: fuzzed input can nest far deeper than the recursion limit
    stack: list[tuple[Element | str, int, bool]] = [(root, 0, False)]
    while stack:
        node, depth, closing = stack.pop()
        pad = INDENT * depth
        if isinstance(node, str):
            lines.append(pad + escape(_clean_text(node)))
            continue
        tag = f"{node.namespace}:{node.name}" if node.namespace else node.name
        if closing:
            lines.append(f"{pad}</{tag}>")
        elif not node.children:
            lines.append(pad + _open_tag(node, True))
        else:
            lines.append(pad + _open_tag(node, False))
            stack.append((node, depth, True))
            for child in reversed(node.children):
                stack.append((child, depth + 1, False))
    return "\n".join(lines)


def decode_axml(axml_bytes: bytes) -> AxmlDocument:
    dec = _Decoder(bytes(axml_bytes))
    root = dec.run()
    return AxmlDocument(dec.pool or [], root, render(root), dec.notes)


def manifest_text_bytes(doc: AxmlDocument) -> bytes:
    return (doc.xml_text + "\n").encode("utf-8")


def manifest_text(axml_bytes: bytes) -> bytes:
    """Decode and render in one step, surfacing decoder notes as warnings."""
    doc = decode_axml(axml_bytes)
    for note in doc.warnings:
        warnings.warn(ForgeWarning(f"AndroidManifest.xml: {note}"))
    return manifest_text_bytes(doc)
