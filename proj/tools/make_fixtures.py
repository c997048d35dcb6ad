#!/usr/bin/env python3
"""Writes the byte-exact format fixtures in tests/data.

The files are built from the format definitions alone (no library code), so
the acceptance test compares the C++ writers against an independent encoder.
"""

import struct
import sys
from pathlib import Path


def header_fixture():
    # magic, version, hps id, lambda index, B, orig h/w, padded h/w, checksum, payload length
    return b"LBC1" + struct.pack("<BBBHIIIIQQ", 1, 2, 5, 8, 500, 750, 504, 752,
                                 0x0123456789ABCDEF, 77)


def fixture_value(i):
    # Exactly representable in f32.
    return ((i % 7) - 3) * 0.125


def param_shapes(b, n, m, k2):
    px = 3 * b * b
    n1, n2 = 7 * n // 8, 6 * n // 8
    m1, m2, m3 = 6 * n // 4, 5 * n // 4, 4 * n // 4
    p = {}

    def conv(name, cout, cin, k, bias=True):
        p[name + ".weight"] = (cout, cin, k, k)
        if bias:
            p[name + ".bias"] = (cout,)

    def gdn(name, c):
        p[name + ".beta"] = (c,)
        p[name + ".gamma"] = (c, c, 1, 1)

    conv("ta.fuse_x", n, px, 1)
    conv("ta.fuse_ctx", n, px, 3, bias=False)
    gdn("ta.gdn0", n)
    conv("ta.conv1", n1, n, 1)
    gdn("ta.gdn1", n1)
    conv("ta.conv2", n2, n1, 1)
    gdn("ta.gdn2", n2)
    conv("ta.conv3", m, n2, 1)
    conv("ts.fuse_y", m1, m, 1)
    conv("ts.fuse_ctx", m1, px, 3, bias=False)
    gdn("ts.igdn0", m1)
    conv("ts.conv1", m2, m1, 1)
    gdn("ts.igdn1", m2)
    conv("ts.conv2", m3, m2, 1)
    gdn("ts.igdn2", m3)
    conv("ts.conv3", px, m3, 1)
    conv("n.conv0", n2, px, 3)
    conv("n.conv1", n2, n2, k2)
    conv("n.conv2", 2 * m, n2, 1)
    return p


def checkpoint_fixture():
    b, n, m, k2, lam, seed = 4, 8, 1, 1, 0.01, 42
    out = bytearray(b"LBCM")
    # version, scan order, hps id, lambda index, B, N, M, K2, lambda, seed
    out += struct.pack("<BBBBHIIBdQ", 1, 1, 0, 0xFF, b, n, m, k2, lam, seed)
    shapes = param_shapes(b, n, m, k2)
    out += struct.pack("<I", len(shapes))
    for name in sorted(shapes):
        shape = shapes[name]
        out += struct.pack("<H", len(name)) + name.encode()
        out += struct.pack("<B", len(shape)) + b"".join(struct.pack("<I", d) for d in shape)
        count = 1
        for d in shape:
            count *= d
        out += b"".join(struct.pack("<f", fixture_value(i)) for i in range(count))
    return bytes(out)


def ramp(c, y, x):
    return ((c * 37 + y * 11 + x * 5) % 256) / 255.0


def b2c_fixture():
    # 3 x 8 x 8 ramp image, B = 4: channel = color*16 + row*4 + col, grid 2 x 2.
    bsz, hb, wb = 4, 2, 2
    out = bytearray()
    for ch in range(3 * bsz * bsz):
        color, rem = divmod(ch, bsz * bsz)
        row, col = divmod(rem, bsz)
        for gy in range(hb):
            for gx in range(wb):
                out += struct.pack("<f", ramp(color, gy * bsz + row, gx * bsz + col))
    return bytes(out)


def pad_fixture():
    # 3 x 5 x 6 ramp image padded to 8 x 8 by edge replication.
    out = bytearray()
    for c in range(3):
        for y in range(8):
            for x in range(8):
                out += struct.pack("<f", ramp(c, min(y, 4), min(x, 5)))
    return bytes(out)


def main():
    dest = Path(sys.argv[1] if len(sys.argv) > 1 else Path(__file__).resolve().parent.parent / "tests" / "data")
    dest.mkdir(parents=True, exist_ok=True)
    (dest / "header.bin").write_bytes(header_fixture())
    (dest / "checkpoint.lbcm").write_bytes(checkpoint_fixture())
    (dest / "b2c_ramp.f32").write_bytes(b2c_fixture())
    (dest / "pad_ramp.f32").write_bytes(pad_fixture())


if __name__ == "__main__":
    main()
