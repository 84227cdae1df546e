"""Program image format and the binary adaptation tool.

A raw image carries plaintext loadable segments.  Adaptation seals each
loadable segment page-by-page under a fresh symmetric key, records per-page
digests in signed metadata, wraps the key to the Guardian's public half,
adds the trampoline and signature-region segments, and redirects the entry
point into the trampoline so process creation re-enters the Guardian.

Serialization is little-endian with an explicit field order so image files
are bit-exact across runs:

    magic "BFLD" | u16 version | u16 flags | u32 entry_va | u16 nsegs | u16 0
    nsegs * (u8 kind, u8 prot, u8 enc, u8 0, u32 vaddr, u32 mem_len,
             u32 file_len, u32 file_off)   -- 20 bytes each
    payload bytes (sealed pages serialize as nonce | tag | ciphertext)
    u32 meta_len | metadata | u32 keys_len | keys | u32 sig_len | signature
"""

from dataclasses import dataclass, field
import enum
import json
import random
import struct

from . import crypto
from .crypto import AuthFailure, SealedPage, SymKey
from .layout import (
    PAGE_SIZE,
    SIG_PAGES,
    SIG_REGION_VA,
    TEXT_VA,
    DATA_VA,
    BSS_VA,
    TRAMPOLINE_VA,
    USER_SPAN,
    page_base,
    vpn_of,
)

MAGIC = b"BFLD"
VERSION = 1
FLAG_ADAPTED = 1

PROT_R = 1
PROT_W = 2
PROT_X = 4

IMAGE_NONCE_LANE = 0xFFFFFFFF
SEG_ENTRY_SIZE = 20


class SegKind(enum.IntEnum):
    TEXT = 0
    DATA = 1
    BSS = 2
    TRAMPOLINE = 3
    SIGSEG = 4


class AdaptError(Exception):
    pass


def image_page_aad(vpn: int) -> bytes:
    return b"image-page:" + struct.pack("<I", vpn)


@dataclass
class Segment:
    kind: SegKind
    vaddr: int
    mem_len: int
    prot: int
    payload: bytes = b""                       # plaintext payload (may be short)
    sealed: list = field(default_factory=list)  # SealedPage per page when encrypted

    @property
    def encrypted(self) -> bool:
        return bool(self.sealed)

    @property
    def pages(self) -> int:
        return (self.mem_len + PAGE_SIZE - 1) // PAGE_SIZE

    def plaintext_page(self, index: int) -> bytes:
        chunk = self.payload[index * PAGE_SIZE : (index + 1) * PAGE_SIZE]
        return chunk + bytes(PAGE_SIZE - len(chunk))


@dataclass
class ProgramImage:
    entry_va: int
    segments: list
    adapted: bool = False
    wrapped_keys: crypto.WrappedKeyBlob | None = None
    metadata: dict | None = None
    signature: bytes = b""

    def segment(self, kind: SegKind):
        for seg in self.segments:
            if seg.kind == kind:
                return seg
        return None


# -- serialization -----------------------------------------------------------

_SEALED_REC = crypto.NONCE_SIZE + crypto.TAG_SIZE + PAGE_SIZE


def _seg_payload_bytes(seg: Segment) -> bytes:
    if seg.sealed:
        return b"".join(s.nonce + s.tag + s.ciphertext for s in seg.sealed)
    return seg.payload


def _encode_meta(meta: dict) -> bytes:
    return json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()


def _encode_keys(blob: crypto.WrappedKeyBlob | None) -> bytes:
    if blob is None:
        return b""
    return struct.pack("<I", len(blob.ciphertext)) + blob.ciphertext + blob.nonce + blob.tag + blob.signature


def _decode_keys(data: bytes) -> crypto.WrappedKeyBlob | None:
    if not data:
        return None
    (ct_len,) = struct.unpack_from("<I", data, 0)
    off = 4
    ct = data[off : off + ct_len]
    off += ct_len
    nonce = data[off : off + crypto.NONCE_SIZE]
    off += crypto.NONCE_SIZE
    tag = data[off : off + crypto.TAG_SIZE]
    off += crypto.TAG_SIZE
    sig = data[off:]
    return crypto.WrappedKeyBlob(ciphertext=ct, nonce=nonce, tag=tag, signature=sig)


def serialize(image: ProgramImage) -> bytes:
    payloads = [_seg_payload_bytes(s) for s in image.segments]
    header = struct.pack(
        "<4sHHIHH",
        MAGIC,
        VERSION,
        FLAG_ADAPTED if image.adapted else 0,
        image.entry_va,
        len(image.segments),
        0,
    )
    table_size = SEG_ENTRY_SIZE * len(image.segments)
    off = len(header) + table_size
    table = b""
    for seg, payload in zip(image.segments, payloads):
        table += struct.pack(
            "<BBBBIIII",
            int(seg.kind),
            seg.prot,
            1 if seg.sealed else 0,
            0,
            seg.vaddr,
            seg.mem_len,
            len(payload),
            off,
        )
        off += len(payload)
    body = header + table + b"".join(payloads)
    meta = _encode_meta(image.metadata) if image.metadata is not None else b""
    keys = _encode_keys(image.wrapped_keys)
    out = body
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", len(keys)) + keys
    out += struct.pack("<I", len(image.signature)) + image.signature
    return out


def _split_tail(data: bytes):
    """Split serialized image into (body+meta+keys bytes, signature bytes)."""
    # Sections from the front: header/table/payload, then three length-prefixed
    # blocks.  Re-walk from the front to find the signature block offset.
    magic, version, flags, entry, nsegs, _ = struct.unpack_from("<4sHHIHH", data, 0)
    if magic != MAGIC:
        raise AdaptError("bad magic")
    off = 16
    payload_end = 16 + SEG_ENTRY_SIZE * nsegs
    for i in range(nsegs):
        _, _, _, _, _, _, file_len, file_off = struct.unpack_from("<BBBBIIII", data, off)
        payload_end = max(payload_end, file_off + file_len)
        off += SEG_ENTRY_SIZE
    p = payload_end
    (meta_len,) = struct.unpack_from("<I", data, p)
    p += 4 + meta_len
    (keys_len,) = struct.unpack_from("<I", data, p)
    p += 4 + keys_len
    (sig_len,) = struct.unpack_from("<I", data, p)
    sig = data[p + 4 : p + 4 + sig_len]
    return data[:p], sig


def parse(data: bytes) -> ProgramImage:
    if len(data) < 16 or data[:4] != MAGIC:
        raise AdaptError("not a BFLD image")
    magic, version, flags, entry, nsegs, _ = struct.unpack_from("<4sHHIHH", data, 0)
    if version != VERSION:
        raise AdaptError(f"unsupported image version {version}")
    segments = []
    off = 16
    payload_end = 16 + SEG_ENTRY_SIZE * nsegs
    for _ in range(nsegs):
        kind, prot, enc, _, vaddr, mem_len, file_len, file_off = struct.unpack_from(
            "<BBBBIIII", data, off
        )
        off += SEG_ENTRY_SIZE
        payload_end = max(payload_end, file_off + file_len)
        raw = data[file_off : file_off + file_len]
        seg = Segment(SegKind(kind), vaddr, mem_len, prot)
        if enc:
            if file_len % _SEALED_REC:
                raise AdaptError("sealed payload not page-framed")
            for i in range(file_len // _SEALED_REC):
                rec = raw[i * _SEALED_REC : (i + 1) * _SEALED_REC]
                seg.sealed.append(
                    SealedPage(
                        nonce=rec[: crypto.NONCE_SIZE],
                        tag=rec[crypto.NONCE_SIZE : crypto.NONCE_SIZE + crypto.TAG_SIZE],
                        ciphertext=rec[crypto.NONCE_SIZE + crypto.TAG_SIZE :],
                    )
                )
        else:
            seg.payload = raw
        segments.append(seg)
    p = payload_end
    (meta_len,) = struct.unpack_from("<I", data, p)
    meta = json.loads(data[p + 4 : p + 4 + meta_len]) if meta_len else None
    p += 4 + meta_len
    (keys_len,) = struct.unpack_from("<I", data, p)
    keys = _decode_keys(data[p + 4 : p + 4 + keys_len])
    p += 4 + keys_len
    (sig_len,) = struct.unpack_from("<I", data, p)
    sig = data[p + 4 : p + 4 + sig_len]
    return ProgramImage(
        entry_va=entry,
        segments=segments,
        adapted=bool(flags & FLAG_ADAPTED),
        wrapped_keys=keys,
        metadata=meta,
        signature=sig,
    )


# -- adaptation --------------------------------------------------------------

TRAMPOLINE_CONTENT = (b"TRAMPOLINE:create/resume/signal\0" * (PAGE_SIZE // 32))[:PAGE_SIZE]


def _check_layout(segments):
    spans = sorted((s.vaddr, s.vaddr + s.pages * PAGE_SIZE) for s in segments)
    for (a0, a1), (b0, b1) in zip(spans, spans[1:]):
        if b0 < a1:
            raise AdaptError(f"segment overlap at {b0:#x}")


def _place_trampoline(segments) -> int:
    taken = [(s.vaddr, s.vaddr + s.pages * PAGE_SIZE) for s in segments]
    va = TRAMPOLINE_VA
    while any(a <= va < b for a, b in taken):
        va -= PAGE_SIZE
        if va < 0:
            raise AdaptError("no room for the trampoline page")
    return va


def adapt(
    raw: ProgramImage,
    dev_priv: crypto.KeyPair,
    guardian_pub: crypto.PublicKey,
    rng: random.Random,
) -> ProgramImage:
    """Produce the protected image: loadable segments sealed, metadata
    signed, keys wrapped, trampoline and signature segments added, entry
    redirected."""
    if raw.adapted or raw.segment(SegKind.TRAMPOLINE) or raw.segment(SegKind.SIGSEG):
        raise AdaptError("image is already adapted")
    for seg in raw.segments:
        if seg.vaddr % PAGE_SIZE:
            raise AdaptError("segments must be page-aligned")
        if seg.vaddr + seg.pages * PAGE_SIZE > USER_SPAN:
            raise AdaptError("loadable segments must fit inside the signed span")
    _check_layout(raw.segments)

    key = crypto.gen_sym_key(rng)
    nonce_counter = 0
    out_segs = []
    digests = {}
    for seg in raw.segments:
        new = Segment(seg.kind, seg.vaddr, seg.pages * PAGE_SIZE, seg.prot)
        if seg.kind in (SegKind.TEXT, SegKind.DATA) and seg.payload:
            pages = []
            seg_digests = []
            for i in range(seg.pages):
                plain = seg.plaintext_page(i)
                vpn = vpn_of(seg.vaddr) + i
                nonce = crypto.make_nonce(IMAGE_NONCE_LANE, nonce_counter)
                nonce_counter += 1
                pages.append(crypto.seal(key, nonce, plain, image_page_aad(vpn)))
                seg_digests.append(crypto.digest(plain).hex())
            new.sealed = pages
            digests[str(seg.vaddr)] = seg_digests
        else:
            new.payload = seg.payload
            if seg.payload:
                digests[str(seg.vaddr)] = [
                    crypto.digest(seg.plaintext_page(i)).hex() for i in range(seg.pages)
                ]
        out_segs.append(new)

    tramp_va = _place_trampoline(out_segs)
    tramp = Segment(SegKind.TRAMPOLINE, tramp_va, PAGE_SIZE, PROT_R | PROT_X, payload=TRAMPOLINE_CONTENT)
    digests[str(tramp_va)] = [crypto.digest(TRAMPOLINE_CONTENT).hex()]
    sigseg = Segment(SegKind.SIGSEG, SIG_REGION_VA, SIG_PAGES * PAGE_SIZE, PROT_R | PROT_W)
    out_segs.extend([tramp, sigseg])

    meta = {
        "orig_entry": raw.entry_va,
        "trampoline_va": tramp_va,
        "sig_region_va": SIG_REGION_VA,
        "digests": digests,
    }
    wrapped = crypto.wrap_keys([key], guardian_pub, dev_priv)
    image = ProgramImage(
        entry_va=tramp_va,
        segments=out_segs,
        adapted=True,
        wrapped_keys=wrapped,
        metadata=meta,
        signature=b"",
    )
    body, _ = _split_tail(serialize(image))
    image.signature = dev_priv.sign_priv.sign(body)
    return image


def verify_signature(image_bytes: bytes, dev_pub: crypto.PublicKey):
    body, sig = _split_tail(image_bytes)
    from cryptography.exceptions import InvalidSignature
    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PublicKey

    try:
        Ed25519PublicKey.from_public_bytes(dev_pub.sign).verify(sig, body)
    except InvalidSignature as exc:
        raise AuthFailure("image metadata signature invalid") from exc


def verify_and_extract(
    image: ProgramImage, guardian_priv: crypto.KeyPair, dev_pub: crypto.PublicKey
):
    """Unwrap the keys, open every sealed page, and verify each digest.
    Returns ({vaddr: [plaintext pages]}, keys)."""
    if not image.adapted or image.wrapped_keys is None or image.metadata is None:
        raise AuthFailure("image is not adapted")
    verify_signature(serialize(image), dev_pub)
    keys = crypto.unwrap_keys(image.wrapped_keys, guardian_priv, dev_pub)
    key = keys[0]
    plaintexts = {}
    for seg in image.segments:
        recorded = image.metadata["digests"].get(str(seg.vaddr))
        if seg.sealed:
            pages = []
            for i, sp in enumerate(seg.sealed):
                vpn = vpn_of(seg.vaddr) + i
                plain = crypto.open_sealed(key, sp, image_page_aad(vpn))
                if recorded is None or crypto.digest(plain).hex() != recorded[i]:
                    raise AuthFailure(f"segment page digest mismatch at {seg.vaddr:#x}+{i}")
                pages.append(plain)
            plaintexts[seg.vaddr] = pages
        elif seg.payload:
            for i in range(seg.pages):
                plain = seg.plaintext_page(i)
                if recorded is None or crypto.digest(plain).hex() != recorded[i]:
                    raise AuthFailure(f"segment page digest mismatch at {seg.vaddr:#x}+{i}")
            plaintexts[seg.vaddr] = [seg.plaintext_page(i) for i in range(seg.pages)]
    return plaintexts, keys


# -- built-in demo programs ---------------------------------------------------


def _pattern(tag: bytes, pages: int) -> bytes:
    unit = (tag + b"|") * (PAGE_SIZE // (len(tag) + 1) + 1)
    return (unit[:PAGE_SIZE]) * pages


def build_demo_image(name: str) -> ProgramImage:
    """Deterministic raw images used by scenarios and tests."""
    if name == "demo":
        segs = [
            Segment(SegKind.TEXT, TEXT_VA, 2 * PAGE_SIZE, PROT_R | PROT_X, _pattern(b"text:" + name.encode(), 2)),
            Segment(SegKind.DATA, DATA_VA, 2 * PAGE_SIZE, PROT_R | PROT_W, _pattern(b"data:" + name.encode(), 2)),
            Segment(SegKind.BSS, BSS_VA, PAGE_SIZE, PROT_R | PROT_W),
        ]
    elif name == "bigdata":
        segs = [
            Segment(SegKind.TEXT, TEXT_VA, PAGE_SIZE, PROT_R | PROT_X, _pattern(b"text:big", 1)),
            Segment(SegKind.DATA, DATA_VA, 8 * PAGE_SIZE, PROT_R | PROT_W, _pattern(b"data:big", 8)),
            Segment(SegKind.BSS, BSS_VA, 2 * PAGE_SIZE, PROT_R | PROT_W),
        ]
    else:
        raise AdaptError(f"unknown builtin image {name!r}")
    return ProgramImage(entry_va=TEXT_VA, segments=segs)


BUILTIN_IMAGES = ("demo", "bigdata")
