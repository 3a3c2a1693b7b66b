"""Checkpoint image files: layout, codecs, storage throttling.

Byte-level layout is documented in docs/FORMAT.md. In short: a 32-byte file
header, then tagged sections (replay log, region table, handle table, one
payload section per region, application blob), each followed by the CRC32 of its body, then
a trailer carrying the CRC32 of everything before it.

Payload sections are a sequence of frames ``(u32 raw_len, u32 stored_len,
bytes)`` of at most :data:`CHUNK_BYTES` raw bytes each, so every codec can be
encoded chunk-parallel and streamed.
"""

import os
import struct
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import lz4.block

from .errors import CrcMismatch, WriteFailed

MAGIC = b"CRUM"
FORMAT_VERSION = 1
CHUNK_BYTES = 4 << 20

CODEC_RAW, CODEC_DEFLATE, CODEC_LZ4 = 0, 1, 2
CODEC_NAMES = {"raw": CODEC_RAW, "deflate": CODEC_DEFLATE, "lz4": CODEC_LZ4}

MODE_CODES = {"normal": 0, "verified": 1}

# op codes of replay records
REC_ALLOC, REC_FREE, REC_STREAM_CREATE, REC_STREAM_DESTROY, REC_EVENT_CREATE = 1, 2, 3, 4, 5
REC_NAMES = {REC_ALLOC: "ALLOC", REC_FREE: "FREE", REC_STREAM_CREATE: "STREAM_CREATE",
             REC_STREAM_DESTROY: "STREAM_DESTROY", REC_EVENT_CREATE: "EVENT_CREATE"}
REC_CODES = {v: k for k, v in REC_NAMES.items()}

HEADER = struct.Struct("<4sIBBHIQII")       # 32 bytes, last field is the header CRC
SECTION = struct.Struct("<4sIQ")            # tag, index, body length
RECORD = struct.Struct("<BBHIQQQQ")         # 40 bytes
REGION = struct.Struct("<IB3xQQ")           # 24 bytes
FRAME = struct.Struct("<II")
TRAILER = struct.Struct("<4sIQI")           # "CEND", sections, bytes before trailer, file CRC
COUNT = struct.Struct("<I")
CRC = struct.Struct("<I")

HANDLES = struct.Struct("<QI")            # arena cursor, stream count
TAG_LOG, TAG_REGIONS, TAG_HANDLES = b"RLOG", b"RTAB", b"HTAB"
TAG_PAYLOAD, TAG_APP = b"PAYL", b"APPS"
FIXED_SECTIONS = 4
TRAILER_TAG = b"CEND"


@dataclass
class Record:
    op: str
    kind: int = 0
    handle: int = 0
    length: int = 0
    offset: int = 0
    address: int = 0

    def pack(self):
        return RECORD.pack(REC_CODES[self.op], self.kind, 0, self.handle, self.length,
                           self.offset, self.address, 0)

    @classmethod
    def unpack(cls, buf, pos=0):
        op, kind, _, handle, length, offset, address, _ = RECORD.unpack_from(buf, pos)
        if op not in REC_NAMES:
            raise CrcMismatch(f"unknown replay record op {op}")
        return cls(REC_NAMES[op], kind, handle, length, offset, address)


@dataclass
class RegionEntry:
    region_id: int
    kind: int
    length: int
    address: int
    data: object = None      # bytes-like payload, ``length`` bytes


@dataclass
class ImageContent:
    page_size: int
    capacity: int
    mode: str = "normal"
    records: list = field(default_factory=list)
    regions: list = field(default_factory=list)
    app_state: bytes = b""
    codec: int = CODEC_RAW
    # cross-checks for replay: the arena cursor and the live stream/event handles
    cursor: int = 0
    streams: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def logical(self):
        """Codec-independent content, for comparing images."""
        return (self.page_size, self.capacity, self.mode,
                [(r.op, r.kind, r.handle, r.length, r.offset, r.address) for r in self.records],
                [(e.region_id, e.kind, e.length, e.address, bytes(e.data)) for e in self.regions],
                bytes(self.app_state), self.cursor, sorted(self.streams), sorted(self.events))


# -- codecs ----------------------------------------------------------------


def _encode_chunk(codec, chunk):
    if codec == CODEC_DEFLATE:
        return zlib.compress(chunk, 1)
    if codec == CODEC_LZ4:
        return lz4.block.compress(chunk, store_size=False)
    return chunk


def _decode_chunk(codec, data, raw_len):
    try:
        if codec == CODEC_DEFLATE:
            out = zlib.decompress(data)
        elif codec == CODEC_LZ4:
            out = lz4.block.decompress(data, uncompressed_size=raw_len)
        else:
            out = data
    except (zlib.error, lz4.block.LZ4BlockError) as e:
        raise CrcMismatch(f"payload frame does not decode: {e}") from e
    if len(out) != raw_len:
        raise CrcMismatch(f"payload frame decodes to {len(out)} bytes, expected {raw_len}")
    return out


def encode_payload(codec, data, pool=None):
    """Yield the frames of one region payload."""
    mv = memoryview(data).cast("B")
    chunks = [mv[i:i + CHUNK_BYTES] for i in range(0, len(mv), CHUNK_BYTES)]
    if codec == CODEC_RAW:
        encoded = chunks
    elif pool is not None:
        encoded = pool.map(lambda c: _encode_chunk(codec, c), chunks)
    else:
        encoded = (_encode_chunk(codec, c) for c in chunks)
    for raw, enc in zip(chunks, encoded):
        yield FRAME.pack(len(raw), len(enc)), enc


# -- writing -----------------------------------------------------------------


class Throttle:
    """Token bucket on bytes written; ``mbps`` in 10^6 bytes per second."""

    def __init__(self, mbps, burst=1 << 20):
        self.rate = mbps * 1e6
        self.burst = burst
        self.tokens = burst
        self.stamp = time.perf_counter()

    def take(self, n):
        while True:
            now = time.perf_counter()
            self.tokens = min(self.burst, self.tokens + (now - self.stamp) * self.rate)
            self.stamp = now
            if self.tokens >= min(n, self.burst):
                self.tokens -= n
                return
            time.sleep((min(n, self.burst) - self.tokens) / self.rate)


def throttle_from_env():
    v = os.environ.get("CRUM_STORE_THROTTLE_MBPS")
    return Throttle(float(v)) if v and float(v) > 0 else None


class _Sink:
    """Sequential writer that keeps the running file CRC and honours the throttle."""

    PIECE = 1 << 20

    def __init__(self, f, throttle=None, fail_after=None):
        self.f = f
        self.throttle = throttle
        self.crc = 0
        self.written = 0
        self.fail_after = fail_after

    def write(self, data):
        mv = memoryview(data).cast("B")
        for i in range(0, len(mv), self.PIECE):
            piece = mv[i:i + self.PIECE]
            if self.fail_after is not None and self.written + len(piece) > self.fail_after:
                raise OSError(28, "No space left on device (injected)")
            if self.throttle is not None:
                self.throttle.take(len(piece))
            self.f.write(piece)
            self.crc = zlib.crc32(piece, self.crc)
            self.written += len(piece)

    def section(self, tag, index, body_parts, length):
        self.write(SECTION.pack(tag, index, length))
        crc = 0
        for part in body_parts:
            self.write(part)
            crc = zlib.crc32(part, crc)
        self.write(CRC.pack(crc))


def _fault_injection():
    v = os.environ.get("CRUM_FAULT_DISK_FULL_AFTER")
    return int(v) if v else None


def write_image(path, content, codec=CODEC_RAW, workers=1, throttle=None, sync=True):
    """Write ``content`` to ``path`` atomically; returns the file size.

    Failures of any kind are reported as :class:`WriteFailed`.
    """
    tmp = f"{path}.tmp-{os.getpid()}"
    pool = ThreadPoolExecutor(workers) if workers > 1 and codec != CODEC_RAW else None
    try:
        with open(tmp, "wb", buffering=0) as f:
            sink = _Sink(f, throttle, _fault_injection())
            nsections = FIXED_SECTIONS + len(content.regions)
            head = HEADER.pack(MAGIC, FORMAT_VERSION, codec, MODE_CODES[content.mode], 0,
                               content.page_size, content.capacity, nsections, 0)
            head = head[:-4] + CRC.pack(zlib.crc32(head[:-4]))
            sink.write(head)

            log = [COUNT.pack(len(content.records))] + [r.pack() for r in content.records]
            sink.section(TAG_LOG, 0, log, sum(len(p) for p in log))

            table = [COUNT.pack(len(content.regions))] + [
                REGION.pack(e.region_id, e.kind, e.length, e.address) for e in content.regions]
            sink.section(TAG_REGIONS, 0, table, sum(len(p) for p in table))

            handles = _pack_handles(content)
            sink.section(TAG_HANDLES, 0, [handles], len(handles))

            for i, e in enumerate(content.regions):
                if codec == CODEC_RAW:
                    nframes = -(-e.length // CHUNK_BYTES)
                    length = e.length + nframes * FRAME.size
                    parts = (p for frame in encode_payload(codec, e.data) for p in frame)
                else:
                    # compressed sizes are only known after encoding this region
                    parts = [p for frame in encode_payload(codec, e.data, pool) for p in frame]
                    length = sum(len(p) for p in parts)
                sink.section(TAG_PAYLOAD, i, parts, length)

            sink.section(TAG_APP, 0, [bytes(content.app_state)], len(content.app_state))
            before = sink.written
            f.write(TRAILER.pack(TRAILER_TAG, nsections, before, sink.crc))
            if sync:
                os.fsync(f.fileno())
        os.replace(tmp, path)
        if sync:
            dfd = os.open(os.path.dirname(os.path.abspath(path)), os.O_RDONLY)
            try:
                os.fsync(dfd)
            finally:
                os.close(dfd)
        return before + TRAILER.size
    except OSError as e:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise WriteFailed(f"cannot write image {path}: {e.strerror or e}") from e
    finally:
        if pool is not None:
            pool.shutdown()


# -- reading -------------------------------------------------------------------


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CrcMismatch("image is truncated")
        v = self.buf[self.pos:self.pos + n]
        self.pos += n
        return v

    def unpack(self, st):
        return st.unpack(self.take(st.size))

    def section(self, tag):
        got, index, length = self.unpack(SECTION)
        if got != tag:
            raise CrcMismatch(f"expected section {tag!r}, found {bytes(got)!r}")
        body = self.take(length)
        (crc,) = self.unpack(CRC)
        if zlib.crc32(body) != crc:
            raise CrcMismatch(f"section {tag.decode()} #{index} fails its CRC")
        return index, body


def read_image(path):
    """Parse and verify an image file into an :class:`ImageContent`."""
    try:
        with open(path, "rb") as f:
            buf = memoryview(f.read())
    except OSError as e:
        raise CrcMismatch(f"cannot read image {path}: {e.strerror}") from e
    if len(buf) < HEADER.size + TRAILER.size:
        raise CrcMismatch("image is truncated")
    tag, nsections, before, file_crc = TRAILER.unpack_from(buf, len(buf) - TRAILER.size)
    if tag != TRAILER_TAG or before != len(buf) - TRAILER.size:
        raise CrcMismatch("image trailer missing or image truncated")
    if zlib.crc32(buf[:before]) != file_crc:
        raise CrcMismatch("whole-file CRC does not match")

    r = _Reader(buf[:before])
    magic, version, codec, mode, _, page_size, capacity, nsec, head_crc = r.unpack(HEADER)
    if magic != MAGIC:
        raise CrcMismatch(f"bad magic {magic!r}")
    if zlib.crc32(buf[:HEADER.size - 4]) != head_crc:
        raise CrcMismatch("header CRC does not match")
    if version != FORMAT_VERSION:
        raise CrcMismatch(f"unsupported image format version {version}")
    if codec not in CODEC_NAMES.values():
        raise CrcMismatch(f"unknown codec {codec}")
    modes = {v: k for k, v in MODE_CODES.items()}
    content = ImageContent(page_size, capacity, modes.get(mode, "normal"), codec=codec)

    _, body = r.section(TAG_LOG)
    (n,) = COUNT.unpack_from(body)
    content.records = [Record.unpack(body, COUNT.size + i * RECORD.size) for i in range(n)]

    _, body = r.section(TAG_REGIONS)
    (n,) = COUNT.unpack_from(body)
    for i in range(n):
        rid, kind, length, addr = REGION.unpack_from(body, COUNT.size + i * REGION.size)
        content.regions.append(RegionEntry(rid, kind, length, addr))

    _, body = r.section(TAG_HANDLES)
    _unpack_handles(content, body)

    for i, e in enumerate(content.regions):
        index, body = r.section(TAG_PAYLOAD)
        if index != i:
            raise CrcMismatch(f"payload section {index} out of order")
        e.data = _decode_frames(codec, body, e.length)

    _, body = r.section(TAG_APP)
    content.app_state = bytes(body)
    if nsec != nsections or nsec != FIXED_SECTIONS + len(content.regions):
        raise CrcMismatch("section count does not match")
    return content


def _pack_handles(content):
    streams, events = sorted(content.streams), sorted(content.events)
    return (HANDLES.pack(content.cursor, len(streams)) + struct.pack(f"<{len(streams)}I", *streams)
            + COUNT.pack(len(events)) + struct.pack(f"<{len(events)}I", *events))


def _unpack_handles(content, body):
    try:
        content.cursor, ns = HANDLES.unpack_from(body)
        pos = HANDLES.size
        content.streams = list(struct.unpack_from(f"<{ns}I", body, pos))
        pos += 4 * ns
        (ne,) = COUNT.unpack_from(body, pos)
        pos += COUNT.size
        content.events = list(struct.unpack_from(f"<{ne}I", body, pos))
    except struct.error as e:
        raise CrcMismatch(f"handle table is malformed: {e}") from e
    if pos + 4 * ne != len(body):
        raise CrcMismatch("handle table has trailing bytes")


def _decode_frames(codec, body, length):
    out = bytearray(length)
    pos = got = 0
    while pos < len(body):
        raw_len, stored = FRAME.unpack_from(body, pos)
        pos += FRAME.size
        if got + raw_len > length or pos + stored > len(body):
            raise CrcMismatch("payload frames exceed the region length")
        out[got:got + raw_len] = _decode_chunk(codec, body[pos:pos + stored], raw_len)
        pos += stored
        got += raw_len
    if got != length:
        raise CrcMismatch(f"payload holds {got} bytes, region table says {length}")
    return out
