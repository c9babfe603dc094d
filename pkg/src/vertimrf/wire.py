"""Binary envelope for party messages.

Layout (all integers little-endian)::

    b"VMRF"  magic
    u8       format version
    u8       section count
    then per section:
        u8   tag
        u32  payload length in bytes
        ...  payload

Sections, in this order:

    1 HEADER     UTF-8 JSON: party id, global indices, names, sizes, encoder,
                 schema fingerprint, model total, mechanism tags
    2 GRAPH      the d_i x d_i adjacency matrix over the party's attributes,
                 row-major, bit-packed (numpy packbits)
    3 MARGINALS  u16 count, then per marginal u8 arity and u16 global indices
    4 THETA      float64 parameters, marginals in section-3 order, cells row-major
    5 ENCODING   u32 JSON length, JSON parameters, then uint32 data:
                 fm: per attribute a (u_j, t) matrix; fo: the (n, d_i) matrix
    6 BINNING    u32 JSON length, JSON bin maps, then float64 value distributions
    7 COUNT      float64 noisy record count (first party only)
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .core import Marginal, Schema
from .fo import FOEncodedData
from .mrf import AttributeGraph, MRFModel
from .party import BinningSpec, PartyMessage, audit_message
from .sketch import SketchParams, SketchSet

MAGIC = b"VMRF"
VERSION = 1

HEADER, GRAPH, MARGINALS, THETA, ENCODING, BINNING, COUNT = range(1, 8)
SECTION_NAMES = {HEADER: "header", GRAPH: "graph", MARGINALS: "marginals", THETA: "theta",
                 ENCODING: "encoding", BINNING: "binning", COUNT: "count"}


class WireError(ValueError):
    pass


def _json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def _with_json(head: dict, body: bytes) -> bytes:
    h = _json(head)
    return struct.pack("<I", len(h)) + h + body


def _split_json(buf: bytes) -> tuple[dict, bytes]:
    (k,) = struct.unpack_from("<I", buf)
    return json.loads(buf[4:4 + k]), buf[4 + k:]


def _sections(msg: PartyMessage) -> list[tuple[int, bytes]]:
    attrs = list(msg.attributes)
    local = msg.graph
    header = {
        "party_id": msg.party_id,
        "attributes": attrs,
        "names": list(msg.names),
        "sizes": list(msg.sizes),
        "encoder": msg.encoder,
        "fingerprint": msg.schema.fingerprint(),
        "model_total": msg.model.total,
        "provenance": dict(msg.provenance),
    }
    out = [(HEADER, _json(header))]
    out.append((GRAPH, np.packbits(local.adjacency(attrs).ravel()).tobytes()))

    mbuf = bytearray(struct.pack("<H", len(msg.marginals)))
    for m in msg.marginals:
        mbuf += struct.pack("<B", len(m)) + struct.pack(f"<{len(m)}H", *m)
    out.append((MARGINALS, bytes(mbuf)))

    theta = [msg.model.theta[msg.to_local(m)].ravel() for m in msg.marginals]
    out.append((THETA, np.concatenate(theta).astype("<f8").tobytes() if theta else b""))

    enc = msg.encoding
    if isinstance(enc, SketchSet):
        p = enc.params
        head = {"kind": "fm", "gamma": p.gamma, "t": p.t, "eps_prime": p.eps_prime,
                "key_ids": list(p.key_ids), "attributes": list(enc.attributes),
                "sizes": [enc.domain(j) for j in enc.attributes]}
        body = b"".join(enc.sketches[j].astype("<u4").tobytes() for j in enc.attributes)
    else:
        head = {"kind": "fo", "eps_prime": enc.eps_prime, "attributes": list(enc.attributes),
                "sizes": list(enc.sizes), "n": enc.n}
        body = enc.rows.astype("<u4").tobytes()
    out.append((ENCODING, _with_json(head, body)))

    b = msg.binning
    maps = {str(j): b.maps[j].tolist() for j in attrs}
    dists = [d for j in attrs for d in b.distributions[j]]
    out.append((BINNING, _with_json({"maps": maps},
                                    np.concatenate(dists).astype("<f8").tobytes() if dists else b"")))
    if msg.n_hat is not None:
        out.append((COUNT, struct.pack("<d", msg.n_hat)))
    return out


def encode_message(msg: PartyMessage) -> bytes:
    audit_message(msg)
    sections = _sections(msg)
    buf = bytearray(MAGIC + struct.pack("<BB", VERSION, len(sections)))
    for tag, payload in sections:
        buf += struct.pack("<BI", tag, len(payload)) + payload
    return bytes(buf)


def read_sections(data: bytes) -> dict[int, bytes]:
    if data[:4] != MAGIC:
        raise WireError("not a party message (bad magic)")
    version, count = struct.unpack_from("<BB", data, 4)
    if version != VERSION:
        raise WireError(f"unsupported format version {version}")
    pos, out = 6, {}
    for _ in range(count):
        tag, length = struct.unpack_from("<BI", data, pos)
        pos += 5
        if pos + length > len(data):
            raise WireError(f"section {tag} runs past the end of the message")
        out[tag] = data[pos:pos + length]
        pos += length
    if pos != len(data):
        raise WireError("trailing bytes after the last section")
    return out


def decode_message(data: bytes) -> PartyMessage:
    sec = read_sections(data)
    head = json.loads(sec[HEADER])
    attrs = tuple(head["attributes"])
    schema = Schema(tuple(head["names"]), tuple(head["sizes"]))
    if schema.fingerprint() != head["fingerprint"]:
        raise WireError("schema fingerprint mismatch")
    d = len(attrs)

    bits = np.unpackbits(np.frombuffer(sec[GRAPH], dtype=np.uint8))[:d * d].reshape(d, d)
    graph = AttributeGraph.from_adjacency(attrs, bits)

    mbuf = sec[MARGINALS]
    (count,) = struct.unpack_from("<H", mbuf)
    pos, marginals = 2, []
    for _ in range(count):
        (k,) = struct.unpack_from("<B", mbuf, pos)
        marginals.append(Marginal(struct.unpack_from(f"<{k}H", mbuf, pos + 1)))
        pos += 1 + 2 * k

    flat = np.frombuffer(sec[THETA], dtype="<f8")
    local = [Marginal(attrs.index(a) for a in m) for m in marginals]
    theta, pos = {}, 0
    for m in local:
        size = schema.cells(m)
        theta[m] = flat[pos:pos + size].astype(float)
        pos += size
    local_graph = AttributeGraph.from_adjacency(range(d), bits)
    model = MRFModel.create(schema, local, graph=local_graph, theta=theta, total=head["model_total"])

    ehead, ebody = _split_json(sec[ENCODING])
    raw = np.frombuffer(ebody, dtype="<u4")
    if ehead["kind"] == "fm":
        params = SketchParams(ehead["gamma"], ehead["t"], ehead["eps_prime"], tuple(ehead["key_ids"]))
        sketches, pos = {}, 0
        for j, u in zip(ehead["attributes"], ehead["sizes"]):
            sketches[j] = raw[pos:pos + u * params.t].reshape(u, params.t)
            pos += u * params.t
        encoding = SketchSet(params, sketches)
    else:
        rows = raw.reshape(ehead["n"], len(ehead["attributes"])).astype(np.int64)
        encoding = FOEncodedData(tuple(ehead["attributes"]), tuple(ehead["sizes"]), rows, ehead["eps_prime"])

    bhead, bbody = _split_json(sec[BINNING])
    dflat = np.frombuffer(bbody, dtype="<f8")
    maps, dists, pos = {}, {}, 0
    for j in attrs:
        mp = np.asarray(bhead["maps"][str(j)], dtype=np.int64)
        maps[j] = mp
        per_bin = []
        for l in range(int(mp.max()) + 1):
            size = int((mp == l).sum())
            per_bin.append(dflat[pos:pos + size].astype(float))
            pos += size
        dists[j] = tuple(per_bin)

    n_hat = struct.unpack("<d", sec[COUNT])[0] if COUNT in sec else None
    msg = PartyMessage(
        party_id=head["party_id"], attributes=attrs, names=schema.names, sizes=schema.sizes,
        graph=graph, marginals=tuple(marginals), model=model, encoding=encoding,
        binning=BinningSpec(maps, dists), n_hat=n_hat, provenance=head["provenance"],
    )
    audit_message(msg)
    return msg


@dataclass(frozen=True)
class SizeReport:
    total_bytes: int
    section_bytes: dict
    encoding_entries: int
    encoding_header_bytes: int

    def to_json(self) -> dict:
        return {"total_bytes": self.total_bytes, "sections": self.section_bytes,
                "encoding_entries": self.encoding_entries,
                "encoding_header_bytes": self.encoding_header_bytes}


def size_report(data: bytes) -> SizeReport:
    """Byte count per section and the number of 32-bit encoding entries."""
    sec = read_sections(data)
    (hlen,) = struct.unpack_from("<I", sec[ENCODING])
    body = len(sec[ENCODING]) - 4 - hlen
    return SizeReport(
        total_bytes=len(data),
        section_bytes={SECTION_NAMES[t]: len(p) for t, p in sec.items()},
        encoding_entries=body // 4,
        encoding_header_bytes=4 + hlen,
    )


def debug_json(msg: PartyMessage, max_items: int = 8) -> dict:
    """Readable summary of a message; large arrays are truncated to ``max_items``."""
    enc = msg.encoding
    if isinstance(enc, SketchSet):
        encoding = {"kind": "fm", "gamma": enc.params.gamma, "t": enc.params.t,
                    "eps_prime": enc.params.eps_prime, "k_p": enc.params.k_p,
                    "alpha_min": enc.params.alpha_min,
                    "sketches": {str(j): enc.sketches[j][:, :max_items].tolist() for j in enc.attributes}}
    else:
        encoding = {"kind": "fo", "eps_prime": enc.eps_prime, "n": enc.n,
                    "rows": enc.rows[:max_items].tolist()}
    return {
        "party_id": msg.party_id,
        "attributes": list(msg.attributes),
        "names": list(msg.names),
        "sizes": list(msg.sizes),
        "graph_edges": sorted(list(e) for e in msg.graph.edges),
        "marginals": [list(m) for m in msg.marginals],
        "theta": {",".join(map(str, m)): msg.model.theta[msg.to_local(m)].ravel()[:max_items].tolist()
                  for m in msg.marginals},
        "model_total": msg.model.total,
        "encoding": encoding,
        "binning": {str(j): [d.tolist() for d in msg.binning.distributions[j]] for j in msg.attributes},
        "n_hat": msg.n_hat,
        "provenance": dict(msg.provenance),
    }
