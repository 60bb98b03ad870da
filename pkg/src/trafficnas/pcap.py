"""Classic pcap reading and Ethernet/IP/TCP/UDP header decoding."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, NamedTuple, Optional

MAGIC_NATIVE = 0xA1B2C3D4
MAGIC_SWAPPED = 0xD4C3B2A1
PCAPNG_MAGIC = 0x0A0D0D0A
LINKTYPE_ETHERNET = 1

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

ETH_HEADER_LEN = 14
VLAN_TAG_LEN = 4
ETHERTYPE_IPV4 = 0x0800
ETHERTYPE_IPV6 = 0x86DD
ETHERTYPE_VLAN = 0x8100


class PcapError(Exception):
    pass


class BadMagic(PcapError):
    pass


class Truncated(PcapError):
    pass


class UnsupportedLinkType(PcapError):
    pass


class MalformedHeader(PcapError):
    pass


class Protocol(IntEnum):
    TCP = 6
    UDP = 17


@dataclass(frozen=True)
class CaptureHeader:
    magic: int
    version_major: int
    version_minor: int
    thiszone: int
    sigfigs: int
    snaplen: int
    linktype: int
    byte_order: str  # struct prefix, "<" or ">"


class RecordHeader(NamedTuple):
    ts_sec: int
    ts_usec: int
    incl_len: int
    orig_len: int


@dataclass(frozen=True)
class ParsedPacket:
    timestamp: tuple[int, int]
    src_ip: bytes
    dst_ip: bytes
    src_port: int
    dst_port: int
    protocol: Protocol
    tcp_flags: int
    l3_offset: int
    l4_offset: int
    l4_payload_offset: int
    total_len: int

    @property
    def payload_len(self) -> int:
        return self.total_len - self.l4_payload_offset

    @property
    def ip_version(self) -> int:
        return 4 if len(self.src_ip) == 4 else 6


def parse_global_header(raw: bytes) -> CaptureHeader:
    if len(raw) < GLOBAL_HEADER_LEN:
        raise Truncated(f"pcap global header needs {GLOBAL_HEADER_LEN} bytes, got {len(raw)}")
    (magic_le,) = struct.unpack_from("<I", raw, 0)
    if magic_le == MAGIC_NATIVE:
        order = "<"
    elif magic_le == MAGIC_SWAPPED:
        order = ">"
    elif magic_le == PCAPNG_MAGIC:
        raise BadMagic("pcapng files are not supported; convert to classic pcap first")
    else:
        raise BadMagic(f"not a classic pcap file (magic 0x{magic_le:08x})")
    fields = struct.unpack_from(order + "IHHiIII", raw, 0)
    header = CaptureHeader(*fields, byte_order=order)
    if header.linktype != LINKTYPE_ETHERNET:
        raise UnsupportedLinkType(f"linktype {header.linktype} (only Ethernet = 1 is supported)")
    return header


def read_capture(raw: bytes) -> list[tuple[RecordHeader, bytes]]:
    """Split a classic pcap byte string into ``(record_header, record_bytes)`` pairs.

    Records come back in file order. A record whose declared length runs past
    the end of the data raises :class:`Truncated` instead of being dropped.
    """
    header = parse_global_header(raw)
    rec_fmt = header.byte_order + "IIII"
    records = []
    pos = GLOBAL_HEADER_LEN
    n = len(raw)
    while pos < n:
        if pos + RECORD_HEADER_LEN > n:
            raise Truncated(f"record header at offset {pos} cut short ({n - pos} of 16 bytes)")
        rh = RecordHeader(*struct.unpack_from(rec_fmt, raw, pos))
        start = pos + RECORD_HEADER_LEN
        end = start + rh.incl_len
        if end > n:
            raise Truncated(
                f"record {len(records)} at offset {pos} declares {rh.incl_len} bytes, "
                f"only {n - start} remain"
            )
        records.append((rh, bytes(raw[start:end])))
        pos = end
    return records


def write_capture(
    records: Iterable[tuple[tuple[int, int], bytes]],
    snaplen: int = 65535,
    byte_order: str = "<",
) -> bytes:
    """Serialize ``((ts_sec, ts_usec), frame)`` pairs as a classic Ethernet pcap."""
    out = bytearray(
        struct.pack(byte_order + "IHHiIII", MAGIC_NATIVE, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET)
    )
    for (ts_sec, ts_usec), frame in records:
        out += struct.pack(byte_order + "IIII", ts_sec, ts_usec, len(frame), len(frame))
        out += frame
    return bytes(out)


def decode_packet(record: bytes, timestamp: tuple[int, int] = (0, 0)) -> Optional[ParsedPacket]:
    """Decode one Ethernet frame.

    Returns ``None`` for anything that is not TCP or UDP over IPv4/IPv6
    (ARP, ICMP, non-first fragments, IPv6 extension headers, ...).
    Raises :class:`MalformedHeader` when a declared header length does not
    fit in the record.
    """
    n = len(record)
    if n < ETH_HEADER_LEN:
        raise MalformedHeader(f"frame of {n} bytes is shorter than an Ethernet header")
    (ethertype,) = struct.unpack_from("!H", record, 12)
    l3 = ETH_HEADER_LEN
    if ethertype == ETHERTYPE_VLAN:
        if n < ETH_HEADER_LEN + VLAN_TAG_LEN:
            raise MalformedHeader("VLAN tag cut short")
        (ethertype,) = struct.unpack_from("!H", record, 16)
        l3 += VLAN_TAG_LEN

    if ethertype == ETHERTYPE_IPV4:
        if n < l3 + 20:
            raise MalformedHeader("IPv4 header cut short")
        ver_ihl = record[l3]
        if ver_ihl >> 4 != 4:
            raise MalformedHeader(f"IPv4 ethertype with IP version {ver_ihl >> 4}")
        ihl = (ver_ihl & 0x0F) * 4
        if ihl < 20:
            raise MalformedHeader(f"IPv4 IHL {ihl // 4} < 5")
        if l3 + ihl > n:
            raise MalformedHeader(f"IPv4 header length {ihl} exceeds record")
        (ip_total,) = struct.unpack_from("!H", record, l3 + 2)
        (frag,) = struct.unpack_from("!H", record, l3 + 6)
        proto = record[l3 + 9]
        src_ip = bytes(record[l3 + 12:l3 + 16])
        dst_ip = bytes(record[l3 + 16:l3 + 20])
        if frag & 0x1FFF:
            return None
        l4 = l3 + ihl
        # ip_total == 0 happens with segmentation offload; fall back to the record length
        end = min(n, l3 + ip_total) if ip_total else n
        if end < l4:
            raise MalformedHeader(f"IPv4 total length {ip_total} shorter than its header")
    elif ethertype == ETHERTYPE_IPV6:
        if n < l3 + 40:
            raise MalformedHeader("IPv6 header cut short")
        if record[l3] >> 4 != 6:
            raise MalformedHeader(f"IPv6 ethertype with IP version {record[l3] >> 4}")
        (plen,) = struct.unpack_from("!H", record, l3 + 4)
        proto = record[l3 + 6]
        src_ip = bytes(record[l3 + 8:l3 + 24])
        dst_ip = bytes(record[l3 + 24:l3 + 40])
        l4 = l3 + 40
        end = min(n, l4 + plen) if plen else n
    else:
        return None

    if proto == Protocol.TCP:
        if end < l4 + 20:
            raise MalformedHeader("TCP header cut short")
        src_port, dst_port = struct.unpack_from("!HH", record, l4)
        data_off = (record[l4 + 12] >> 4) * 4
        if data_off < 20:
            raise MalformedHeader(f"TCP data offset {data_off // 4} < 5")
        if l4 + data_off > end:
            raise MalformedHeader(f"TCP header length {data_off} exceeds packet")
        flags = record[l4 + 13]
        payload = l4 + data_off
        protocol = Protocol.TCP
    elif proto == Protocol.UDP:
        if end < l4 + 8:
            raise MalformedHeader("UDP header cut short")
        src_port, dst_port = struct.unpack_from("!HH", record, l4)
        flags = 0
        payload = l4 + 8
        protocol = Protocol.UDP
    else:
        return None

    return ParsedPacket(
        timestamp=timestamp,
        src_ip=src_ip,
        dst_ip=dst_ip,
        src_port=src_port,
        dst_port=dst_port,
        protocol=protocol,
        tcp_flags=flags,
        l3_offset=l3,
        l4_offset=l4,
        l4_payload_offset=payload,
        total_len=end,
    )


class SessionKey(NamedTuple):
    endpoint_lo: tuple[bytes, int]
    endpoint_hi: tuple[bytes, int]
    protocol: Protocol


def canonical_session_key(p: ParsedPacket) -> SessionKey:
    """Direction-invariant five-tuple: endpoints sorted by (ip bytes, port)."""
    a = (p.src_ip, p.src_port)
    b = (p.dst_ip, p.dst_port)
    lo, hi = (a, b) if a <= b else (b, a)
    return SessionKey(lo, hi, Protocol(p.protocol))
