"""AIVDM/AIVDO sentence codec for dynamic position reports.

Decodes NMEA 0183 AIS sentences (6-bit armored payloads, XOR checksum)
into position reports for message types 1, 2, 3, 18 and 19. Other types
are skipped, not errors. The reception timestamp is authoritative for t;
the payload's own UTC-second field is ignored.

The encoding half builds protocol-conformant payloads so synthetic
traffic can be written in the exact wire format the decoder consumes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import (
    ChecksumMismatch,
    FieldOutOfRange,
    IncompleteFragmentGroup,
    MalformedSentence,
)

DYNAMIC_TYPES = frozenset({1, 2, 3, 18, 19})

LATLON_SCALE = 600_000.0  # 1/10000 arc-minute fixed point
LON_SENTINEL_RAW = 181 * 600_000  # "position not available"
LAT_SENTINEL_RAW = 91 * 600_000
SOG_SENTINEL_RAW = 1023

# payload bit fields: (sog_start, lon_start, lat_start), all widths fixed
_FIELD_OFFSETS = {
    1: (50, 61, 89),
    2: (50, 61, 89),
    3: (50, 61, 89),
    18: (46, 57, 85),
    19: (46, 57, 85),
}
_PAYLOAD_BITS = {1: 168, 2: 168, 3: 168, 18: 168, 19: 312, 5: 424}


def sixbit_to_value(ch: str) -> int:
    v = ord(ch) - 48
    if v > 40:
        v -= 8
    if not (0 <= v <= 63) or ord(ch) in (88, 89, 90, 91, 92, 93, 94, 95):
        raise MalformedSentence(f"invalid 6-bit armor character {ch!r}")
    return v


def value_to_sixbit(v: int) -> str:
    if not (0 <= v <= 63):
        raise ValueError(f"6-bit value out of range: {v}")
    return chr(v + 48) if v < 40 else chr(v + 56)


def nmea_checksum(body: str) -> str:
    """XOR of every character strictly between '!' and '*', as 2 hex digits."""
    x = 0
    for ch in body:
        x ^= ord(ch)
    return f"{x:02X}"


@dataclass(frozen=True)
class NmeaSentence:
    raw_line: str
    talker_payload: str
    fill_bits: int
    fragment_count: int
    fragment_index: int
    channel: str
    checksum: str

    @property
    def complete(self) -> bool:
        return self.fragment_index == self.fragment_count


@dataclass(frozen=True)
class DynamicReport:
    mmsi: int
    msg_type: int
    timestamp_s: float
    lat: float
    lon: float
    sog: float


def parse_sentence(line: str) -> NmeaSentence:
    """Parse and checksum-verify one AIVDM/AIVDO line (no fragment assembly)."""
    line = line.strip()
    if not (line.startswith("!AIVDM") or line.startswith("!AIVDO")):
        raise MalformedSentence(f"not an AIVDM/AIVDO sentence: {line[:20]!r}")
    star = line.rfind("*")
    if star < 0 or len(line) < star + 3:
        raise MalformedSentence("missing checksum")
    body = line[1:star]
    given = line[star + 1:star + 3]
    try:
        given_val = int(given, 16)
    except ValueError:
        raise MalformedSentence(f"checksum not hex: {given!r}") from None
    if given_val != int(nmea_checksum(body), 16):
        raise ChecksumMismatch(f"checksum {given} != {nmea_checksum(body)}")
    parts = body.split(",")
    if len(parts) != 7:
        raise MalformedSentence(f"expected 7 fields, got {len(parts)}")
    try:
        frag_count = int(parts[1])
        frag_index = int(parts[2])
    except ValueError:
        raise MalformedSentence("non-numeric fragment fields") from None
    payload = parts[5]
    try:
        fill = int(parts[6])
    except ValueError:
        raise MalformedSentence("non-numeric fill bits") from None
    if frag_count < 1 or frag_index < 1 or frag_index > frag_count:
        raise MalformedSentence(f"bad fragment numbering {frag_index}/{frag_count}")
    if not (0 <= fill <= 5):
        raise MalformedSentence(f"fill bits {fill} outside 0-5")
    if not payload:
        raise MalformedSentence("empty payload")
    for ch in payload:
        sixbit_to_value(ch)
    return NmeaSentence(
        raw_line=line,
        talker_payload=payload,
        fill_bits=fill,
        fragment_count=frag_count,
        fragment_index=frag_index,
        channel=parts[4],
        checksum=given.upper(),
    )


class SentenceDecoder:
    """Stateful decoder: buffers multi-fragment groups until complete.

    Groups are keyed by (channel, sequence id) and evicted after
    fragment_timeout_s of stream time without completing; evictions are
    counted, flush(strict=True) raises for whatever is still pending.
    Not safe for concurrent use by multiple threads.
    """

    def __init__(self, fragment_timeout_s: float = 30.0):
        self.fragment_timeout_s = fragment_timeout_s
        self._groups: dict[tuple[str, str], dict] = {}
        self.dropped_incomplete = 0

    def decode(self, line: str, rx_time: float = 0.0) -> NmeaSentence | None:
        """Feed one line; returns a complete sentence or None if buffered."""
        self._evict(rx_time)
        s = parse_sentence(line)
        if s.fragment_count == 1:
            return s
        body = s.raw_line[1:s.raw_line.rfind("*")]
        seq_id = body.split(",")[3]
        key = (s.channel, seq_id)
        group = self._groups.setdefault(
            key, {"first_seen": rx_time, "count": s.fragment_count, "parts": {}})
        if group["count"] != s.fragment_count:
            del self._groups[key]
            raise MalformedSentence("fragment count changed within group")
        group["parts"][s.fragment_index] = s
        if len(group["parts"]) < group["count"]:
            return None
        del self._groups[key]
        ordered = [group["parts"][i] for i in range(1, group["count"] + 1)]
        return NmeaSentence(
            raw_line=s.raw_line,
            talker_payload="".join(p.talker_payload for p in ordered),
            fill_bits=ordered[-1].fill_bits,
            fragment_count=s.fragment_count,
            fragment_index=s.fragment_count,
            channel=s.channel,
            checksum=s.checksum,
        )

    def _evict(self, now: float) -> None:
        stale = [k for k, g in self._groups.items()
                 if now - g["first_seen"] > self.fragment_timeout_s]
        for k in stale:
            del self._groups[k]
            self.dropped_incomplete += 1

    def flush(self, strict: bool = False) -> int:
        pending = len(self._groups)
        if strict and pending:
            keys = sorted(self._groups)
            raise IncompleteFragmentGroup(f"{pending} unfinished groups: {keys}")
        self._groups.clear()
        self.dropped_incomplete += pending
        return pending


def payload_to_bits(payload: str, fill_bits: int) -> tuple[int, int]:
    """6-bit armored payload -> (big integer of bits, bit count)."""
    value = 0
    for ch in payload:
        value = (value << 6) | sixbit_to_value(ch)
    nbits = 6 * len(payload) - fill_bits
    if nbits <= 0:
        raise MalformedSentence("payload shorter than its fill bits")
    return value >> fill_bits if fill_bits else value, nbits


def _bits(value: int, nbits: int, start: int, width: int, signed: bool = False) -> int:
    if start + width > nbits:
        raise MalformedSentence(
            f"field [{start}:{start + width}] beyond payload of {nbits} bits")
    raw = (value >> (nbits - start - width)) & ((1 << width) - 1)
    if signed and raw & (1 << (width - 1)):
        raw -= 1 << width
    return raw


def extract_dynamic(sentence: NmeaSentence, rx_time: float) -> DynamicReport | None:
    """Decode a complete sentence into a DynamicReport.

    Returns None for non-dynamic message types and for reports whose
    position or speed carries the protocol's "not available" sentinel.
    Raises FieldOutOfRange for values that are invalid rather than absent.
    """
    if not sentence.complete:
        raise MalformedSentence("sentence has unassembled fragments")
    value, nbits = payload_to_bits(sentence.talker_payload, sentence.fill_bits)
    msg_type = _bits(value, nbits, 0, 6)
    if msg_type not in DYNAMIC_TYPES:
        return None
    sog_start, lon_start, lat_start = _FIELD_OFFSETS[msg_type]
    mmsi = _bits(value, nbits, 8, 30)
    if mmsi >= 1_000_000_000:
        raise FieldOutOfRange(f"MMSI {mmsi} wider than 9 digits")
    sog_raw = _bits(value, nbits, sog_start, 10)
    lon_raw = _bits(value, nbits, lon_start, 28, signed=True)
    lat_raw = _bits(value, nbits, lat_start, 27, signed=True)
    if lon_raw == LON_SENTINEL_RAW or lat_raw == LAT_SENTINEL_RAW:
        return None
    if sog_raw == SOG_SENTINEL_RAW:
        return None
    lon = lon_raw / LATLON_SCALE
    lat = lat_raw / LATLON_SCALE
    sog = sog_raw / 10.0
    if not (-90.0 <= lat <= 90.0):
        raise FieldOutOfRange(f"latitude {lat} outside [-90, 90]")
    if not (-180.0 <= lon < 180.0):
        raise FieldOutOfRange(f"longitude {lon} outside [-180, 180)")
    if sog > 102.2:
        raise FieldOutOfRange(f"speed {sog} above field maximum")
    return DynamicReport(mmsi=mmsi, msg_type=msg_type, timestamp_s=rx_time,
                         lat=lat, lon=lon, sog=sog)


# --- encoding (synthetic traffic + round-trip tests) ---

def quantize_latlon(x: float) -> float:
    return round(x * LATLON_SCALE) / LATLON_SCALE

def quantize_sog(s: float) -> float:
    return min(max(round(s * 10.0), 0), 1022) / 10.0


def build_dynamic_payload(msg_type: int, mmsi: int, lat: float, lon: float,
                          sog: float, utc_second: int = 0) -> str:
    """Fixed-point payload for types 1/2/3/18/19; fill bits are always 0."""
    if msg_type not in DYNAMIC_TYPES:
        raise ValueError(f"not a dynamic message type: {msg_type}")
    total = _PAYLOAD_BITS[msg_type]
    sog_start, lon_start, lat_start = _FIELD_OFFSETS[msg_type]
    lat_raw = round(lat * LATLON_SCALE)
    lon_raw = round(lon * LATLON_SCALE)
    sog_raw = min(max(round(sog * 10.0), 0), 1022)
    value = 0

    def put(start: int, width: int, fieldval: int) -> None:
        nonlocal value
        fieldval &= (1 << width) - 1
        value |= fieldval << (total - start - width)

    put(0, 6, msg_type)
    put(8, 30, mmsi)
    put(sog_start, 10, sog_raw)
    put(lon_start, 28, lon_raw)
    put(lat_start, 27, lat_raw)
    if msg_type in (1, 2, 3):
        put(137, 6, utc_second % 60)
    else:
        put(133, 6, utc_second % 60)
    chars = []
    for i in range(total // 6):
        chars.append(value_to_sixbit((value >> (total - 6 * (i + 1))) & 0x3F))
    return "".join(chars)


def build_static_payload(mmsi: int) -> tuple[str, int]:
    """Minimal type-5 payload (424 bits -> 71 chars + 2 fill bits)."""
    total = 424
    value = (5 << (total - 6)) | (mmsi << (total - 38))
    padded = value << 2  # 426 bits = 71 six-bit chars
    chars = [value_to_sixbit((padded >> (426 - 6 * (i + 1))) & 0x3F)
             for i in range(71)]
    return "".join(chars), 2


def make_sentences(payload: str, fill_bits: int, channel: str = "A",
                   seq_id: str = "", max_chars: int = 60) -> list[str]:
    """Wrap a payload into one or more checksummed AIVDM lines."""
    chunks = [payload[i:i + max_chars] for i in range(0, len(payload), max_chars)] \
        or [""]
    n = len(chunks)
    seq = seq_id if n > 1 else ""
    lines = []
    for i, chunk in enumerate(chunks, start=1):
        fill = fill_bits if i == n else 0
        body = f"AIVDM,{n},{i},{seq},{channel},{chunk},{fill}"
        lines.append(f"!{body}*{nmea_checksum(body)}")
    return lines


# --- line-oriented stream interface ---

def split_timestamped(line: str) -> tuple[float | None, str]:
    """Split an optional "epoch_seconds<TAB>" prefix off an input line."""
    if "\t" in line:
        stamp, rest = line.split("\t", 1)
        try:
            return float(stamp), rest
        except ValueError:
            raise MalformedSentence(f"bad reception timestamp {stamp!r}") from None
    return None, line


@dataclass
class DecodeCounters:
    lines: int = 0
    reports: int = 0
    skipped_types: int = 0
    unavailable: int = 0
    errors: int = 0


def decode_stream(lines, counters: DecodeCounters | None = None,
                  fragment_timeout_s: float = 30.0):
    """Generate DynamicReports from timestamped or bare NMEA lines.

    Bare lines get a synthetic monotone reception clock (1 s apart) so the
    decoder stays usable on timestamp-less captures. Malformed input is
    counted and skipped, never fatal.
    """
    counters = counters if counters is not None else DecodeCounters()
    decoder = SentenceDecoder(fragment_timeout_s=fragment_timeout_s)
    synthetic_clock = 0.0
    for raw in lines:
        raw = raw.rstrip("\n")
        if not raw.strip():
            continue
        counters.lines += 1
        try:
            rx, nmea = split_timestamped(raw)
            if rx is None:
                rx = synthetic_clock
                synthetic_clock += 1.0
            sentence = decoder.decode(nmea, rx)
            if sentence is None:
                continue
            report = extract_dynamic(sentence, rx)
        except (MalformedSentence, FieldOutOfRange):
            counters.errors += 1
            continue
        if report is None:
            counters.skipped_types += 1
            continue
        counters.reports += 1
        yield report


def report_to_json(r: DynamicReport) -> str:
    import json
    return json.dumps({"mmsi": r.mmsi, "type": r.msg_type, "t": r.timestamp_s,
                       "lat": r.lat, "lon": r.lon, "sog": r.sog})


def report_from_json(line: str) -> DynamicReport:
    import json
    d = json.loads(line)
    return DynamicReport(mmsi=d["mmsi"], msg_type=d["type"], timestamp_s=d["t"],
                         lat=d["lat"], lon=d["lon"], sog=d["sog"])
