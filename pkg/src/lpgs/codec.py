"""Model file format and point-cloud import.

Layout, all little-endian:

    magic   4 bytes  "LPGS"
    version u32
    crc     u32      CRC-32 of every byte after this field
    header  fixed scalars (f64 floats, u32/u64 ints), contraction block,
            parent count, then a section table of (name, byte length)
    payload sections in table order

Sections hold the trainable arrays as float32 plus one uint8 provenance
section; array shapes are reconstructed from the header scalars. Saving is
deterministic, so save(load(f)) reproduces f byte for byte. Readers never
trust a length field: every read is bounds-checked (TruncatedSection), the
magic and version are checked first (BadMagic, VersionMismatch), and the
checksum guards the rest (ChecksumMismatch).
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .core import ModelConfig, SceneModel, validate_config
from .errors import (BadMagic, ChecksumMismatch, InvalidConfig, IOFailure,
                     MalformedHeader, TruncatedSection, UnsupportedPLY,
                     VersionMismatch)
from .hashgrid import HashGrid, HashGridConfig
from .predictor import NetworkBundle
from .spatial import ContractionParams

MAGIC = b"LPGS"
FORMAT_VERSION = 1

# per-splat floats when exploded to explicit gaussians:
# position 3 + scale 3 + rotation 4 + opacity 1 + degree-3 SH color 48
EXPLODED_FLOATS = 59


@dataclass
class StorageReport:
    header_bytes: int
    section_bytes: dict
    total_bytes: int
    exploded_bytes: int

    @property
    def ratio(self):
        if self.total_bytes == 0:
            return 0.0
        return self.exploded_bytes / self.total_bytes

    def as_text(self):
        lines = [f"{'section':<24}{'bytes':>12}"]
        lines.append(f"{'header':<24}{self.header_bytes:>12}")
        for name, size in self.section_bytes.items():
            lines.append(f"{name:<24}{size:>12}")
        lines.append(f"{'total':<24}{self.total_bytes:>12}")
        lines.append(f"{'exploded equivalent':<24}{self.exploded_bytes:>12}")
        lines.append(f"compression ratio: {self.ratio:.2f}x")
        return "\n".join(lines)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedSection(
                f"file ends inside {what} (need {n} bytes at offset "
                f"{self.pos}, have {len(self.data) - self.pos})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size, what))


def _header_bytes(model: SceneModel, sections):
    cfg = model.config
    g = cfg.grid_params
    out = io.BytesIO()
    out.write(struct.pack("<IIII", cfg.feature_dim, cfg.children_per_parent,
                          cfg.sh_degree, cfg.mlp_hidden))
    out.write(struct.pack("<dd", cfg.attention_lambda, cfg.offset_scale))
    out.write(struct.pack("<IQIId", g.levels, g.table_size,
                          g.features_per_level, g.base_resolution,
                          g.growth_factor))
    c = model.contraction
    if c is None:
        out.write(struct.pack("<B", 0))
    else:
        out.write(struct.pack("<B", 1))
        out.write(struct.pack("<3d", *c.center))
        out.write(struct.pack("<ddB", c.r_inner, c.r_outer,
                              1 if c.continuous else 0))
    out.write(struct.pack("<QI", model.num_parents, len(sections)))
    for name, payload in sections:
        enc = name.encode("ascii")
        out.write(struct.pack("<B", len(enc)))
        out.write(enc)
        out.write(struct.pack("<Q", len(payload)))
    return out.getvalue()


def _collect_sections(model: SceneModel):
    sections = [(name, np.ascontiguousarray(arr, dtype="<f4").tobytes())
                for name, arr in model.param_items()]
    sections.append(("provenance", model.provenance.astype(np.uint8)
                     .tobytes()))
    return sections


def save(model: SceneModel, sink):
    """Serialize the model; sink is a path or a binary file object.

    Arrays are stored as float32 regardless of the working precision.
    Returns a StorageReport for the written bytes.
    """
    sections = _collect_sections(model)
    header = _header_bytes(model, sections)
    body = header + b"".join(payload for _, payload in sections)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, crc) + body
    if hasattr(sink, "write"):
        sink.write(blob)
    else:
        try:
            with open(sink, "wb") as fh:
                fh.write(blob)
        except OSError as exc:
            raise IOFailure(f"cannot write {sink}: {exc}") from None
    return StorageReport(
        header_bytes=len(MAGIC) + 8 + len(header),
        section_bytes={name: len(payload) for name, payload in sections},
        total_bytes=len(blob),
        exploded_bytes=model.splat_count * EXPLODED_FLOATS * 4)


def storage_report(model: SceneModel) -> StorageReport:
    return save(model, io.BytesIO())


def _expected_shapes(config: ModelConfig, num_parents):
    g = config.grid_params
    h = config.mlp_hidden
    half = config.half_dim
    shapes = {"parent.position": (num_parents, 3),
              "parent.log_scale": (num_parents, 3),
              "grid.tables": (g.levels, g.table_size, g.features_per_level),
              "attn.P1": (half, half),
              "attn.P2": (half, half)}
    head_inputs = NetworkBundle.head_input_dims(config)
    head_outputs = NetworkBundle.head_output_dims(config)
    for head in ("g_pos", "g_rs", "g_c", "g_o"):
        din, dout = head_inputs[head], head_outputs[head]
        shapes[f"{head}.W1"] = (din, h)
        shapes[f"{head}.b1"] = (h,)
        shapes[f"{head}.W2"] = (h, dout)
        shapes[f"{head}.b2"] = (dout,)
    return shapes


def load(source) -> SceneModel:
    """Parse a model file, validating structure before trusting content."""
    if hasattr(source, "read"):
        data = source.read()
    else:
        try:
            with open(source, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise IOFailure(f"cannot read {source}: {exc}") from None
    rd = _Reader(data)
    magic = rd.take(4, "magic")
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {bytes(magic)!r}")
    (version,) = rd.unpack("<I", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, "
                              f"reader supports {FORMAT_VERSION}")
    (stored_crc,) = rd.unpack("<I", "checksum")
    body_start = rd.pos

    fd, k, sh_deg, hidden = rd.unpack("<IIII", "model header")
    lam, offset_scale = rd.unpack("<dd", "model header")
    levels, table_size, feats, base_res, growth = rd.unpack(
        "<IQIId", "grid header")
    (has_contraction,) = rd.unpack("<B", "contraction header")
    contraction = None
    if has_contraction:
        center = rd.unpack("<3d", "contraction header")
        r_inner, r_outer, continuous = rd.unpack("<ddB",
                                                 "contraction header")
        try:
            contraction = ContractionParams(np.array(center), r_inner,
                                            r_outer, bool(continuous))
        except ValueError as exc:
            raise MalformedHeader(str(exc)) from None
    num_parents, n_sections = rd.unpack("<QI", "section table")
    if n_sections > 4096:
        raise MalformedHeader(f"implausible section count {n_sections}")
    table = []
    for _ in range(n_sections):
        (name_len,) = rd.unpack("<B", "section table")
        raw = rd.take(name_len, "section name")
        try:
            name = bytes(raw).decode("ascii")
        except UnicodeDecodeError:
            raise MalformedHeader("section name is not ascii") from None
        (length,) = rd.unpack("<Q", "section table")
        table.append((name, length))

    payloads = {}
    for name, length in table:
        payloads[name] = rd.take(length, f"section {name}")
    body_end = rd.pos
    actual_crc = zlib.crc32(data[body_start:body_end]) & 0xFFFFFFFF
    if actual_crc != stored_crc:
        raise ChecksumMismatch(f"stored {stored_crc:#010x}, "
                               f"computed {actual_crc:#010x}")

    try:
        grid_cfg = HashGridConfig(levels, table_size, feats, base_res, growth)
        config = ModelConfig(fd, k, lam, sh_deg, grid_cfg,
                             offset_scale, hidden)
        validate_config(config)
    except (InvalidConfig, ValueError, ZeroDivisionError) as exc:
        raise MalformedHeader(str(exc)) from None

    shapes = _expected_shapes(config, num_parents)
    arrays = {}
    for name, length in table:
        if name == "provenance":
            if length != num_parents:
                raise MalformedHeader(
                    f"provenance holds {length} entries for "
                    f"{num_parents} parents")
            arrays[name] = np.frombuffer(payloads[name], dtype=np.uint8)
            continue
        if name not in shapes:
            raise MalformedHeader(f"unknown section {name!r}")
        shape = shapes[name]
        expect = int(np.prod(shape)) * 4
        if length != expect:
            raise MalformedHeader(
                f"section {name} holds {length} bytes, expected {expect}")
        arrays[name] = np.frombuffer(payloads[name], dtype="<f4") \
            .reshape(shape).copy()
    missing = [n for n in list(shapes) + ["provenance"] if n not in arrays]
    if missing:
        raise MalformedHeader(f"missing sections: {', '.join(missing)}")

    grid = HashGrid(grid_cfg, arrays["grid.tables"])
    nets = NetworkBundle.create(config, rng=np.random.default_rng(0))
    for name in shapes:
        if name.startswith(("parent.", "grid.")):
            continue
        nets.set_param(name, arrays[name])
    model = SceneModel(arrays["parent.position"], arrays["parent.log_scale"],
                       grid, nets, contraction, config,
                       provenance=arrays["provenance"])
    model.validate()
    return model


# --- PLY import -----------------------------------------------------------

_PLY_SIZES = {"char": 1, "int8": 1, "uchar": 1, "uint8": 1,
              "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
              "int": 4, "int32": 4, "uint": 4, "uint32": 4,
              "float": 4, "float32": 4, "double": 8, "float64": 8}
_PLY_NUMPY = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
              "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
              "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
              "float": "f4", "float32": "f4", "double": "f8",
              "float64": "f8"}


def write_ply_points(path, points):
    """Minimal binary little-endian point cloud writer (positions only)."""
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {len(pts)}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "end_header\n")
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(pts.tobytes())
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from None


def _parse_ply_header(text):
    lines = [ln.strip() for ln in text.split("\n") if ln.strip()]
    if not lines or lines[0] != "ply":
        raise MalformedHeader("file does not start with 'ply'")
    fmt = None
    elements = []     # (name, count, [(kind, name) or ("list",) markers])
    for ln in lines[1:]:
        parts = ln.split()
        if parts[0] == "comment":
            continue
        if parts[0] == "format":
            if len(parts) < 2:
                raise MalformedHeader("bad format line")
            fmt = parts[1]
        elif parts[0] == "element":
            if len(parts) != 3:
                raise MalformedHeader(f"bad element line: {ln!r}")
            try:
                elements.append([parts[1], int(parts[2]), []])
            except ValueError:
                raise MalformedHeader(f"bad element count: {ln!r}") from None
        elif parts[0] == "property":
            if not elements:
                raise MalformedHeader("property before any element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[-1]))
            else:
                if len(parts) != 3 or parts[1] not in _PLY_SIZES:
                    raise MalformedHeader(f"bad property line: {ln!r}")
                elements[-1][2].append((parts[1], parts[2]))
        else:
            raise MalformedHeader(f"unknown header line: {parts[0]!r}")
    if fmt is None:
        raise MalformedHeader("missing format line")
    if fmt == "ascii":
        binary = False
    elif fmt == "binary_little_endian":
        binary = True
    else:
        raise UnsupportedPLY(f"format {fmt!r} not supported")
    return binary, elements


def load_ply_points(path):
    """Read vertex positions from an ascii or binary little-endian PLY."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc}") from None
    marker = b"end_header\n"
    split = blob.find(marker)
    if split < 0:
        raise MalformedHeader("missing end_header")
    try:
        header_text = blob[:split].decode("ascii")
    except UnicodeDecodeError:
        raise MalformedHeader("header is not ascii") from None
    binary, elements = _parse_ply_header(header_text)
    body = blob[split + len(marker):]

    vertex = None
    before = []
    for elem in elements:
        if elem[0] == "vertex":
            vertex = elem
            break
        before.append(elem)
    if vertex is None:
        raise MalformedHeader("no vertex element")
    _, count, props = vertex
    names = [p[1] for p in props]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise UnsupportedPLY(f"vertex element lacks property {axis!r}")
    if any(p[0] == "list" for p in props):
        raise UnsupportedPLY("list properties in vertex element")
    for kind, _ in ((p[0], p[1]) for p in props):
        if kind not in _PLY_SIZES:
            raise UnsupportedPLY(f"vertex property type {kind!r}")

    if binary:
        offset = 0
        for name, cnt, eprops in before:
            if any(p[0] == "list" for p in eprops):
                raise UnsupportedPLY(
                    f"list properties before vertex element ({name})")
            offset += cnt * sum(_PLY_SIZES[p[0]] for p in eprops)
        stride = sum(_PLY_SIZES[p[0]] for p in props)
        need = offset + count * stride
        if len(body) < need:
            raise MalformedHeader(
                f"vertex data truncated: need {need} bytes, have {len(body)}")
        dt = np.dtype([(p[1], "<" + _PLY_NUMPY[p[0]]) for p in props])
        rows = np.frombuffer(body, dtype=dt, count=count, offset=offset)
        pts = np.stack([rows["x"], rows["y"], rows["z"]],
                       axis=1).astype(np.float64)
    else:
        lines = [ln for ln in body.decode("ascii", "replace").split("\n")
                 if ln.strip()]
        skip = sum(e[1] for e in before)
        if len(lines) < skip + count:
            raise MalformedHeader(
                f"vertex data truncated: need {skip + count} rows, "
                f"have {len(lines)}")
        cols = {axis: names.index(axis) for axis in ("x", "y", "z")}
        pts = np.empty((count, 3), dtype=np.float64)
        for i, ln in enumerate(lines[skip:skip + count]):
            toks = ln.split()
            if len(toks) != len(props):
                raise MalformedHeader(f"vertex row {i} has {len(toks)} "
                                      f"fields, expected {len(props)}")
            try:
                pts[i] = [float(toks[cols["x"]]), float(toks[cols["y"]]),
                          float(toks[cols["z"]])]
            except ValueError:
                raise MalformedHeader(f"bad number in vertex row {i}") \
                    from None
    return pts
