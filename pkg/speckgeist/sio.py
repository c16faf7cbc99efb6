# sio.py - file formats: PGM images, BIMG float dumps, the BIDX index cache,
# CSV tables and the experiment.md notes
#
#   BIMG  16-byte header: b"BIMG", u32 rows, u32 cols, u32 reserved (0),
#         then rows * cols little-endian float64 values in row-major order.
#   BIDX  b"BIDX", u32 version, u32 N, u32 m, u32 n, u32 nnz, f64 R, f64 r,
#         then i32 triplets (m x 2 x 2), i32 row_ptr (m + 1), i32 col_idx
#         (nnz) and f64 values (nnz), all little-endian.

import csv
import logging
import math

import frontmatter
import numpy as np
import scipy.sparse as sp

from .sindex import BispectrumIndex, build_phase_map
from .sutils import FormatError, InvalidArgument

logger = logging.getLogger(__name__)

BIMG_MAGIC = b"BIMG"
BIDX_MAGIC = b"BIDX"
BIDX_VERSION = 1

REPORT_COLUMNS = ("iter", "objective", "rof", "re", "step_norm", "ls_iters", "cum_seconds")


# -- PGM ---------------------------------------------------------------------


def _pgm_token(data, pos):
    # next whitespace-separated header token, skipping # comments
    while True:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return data[start:pos], pos


def write_pgm(filepath, image, maxval=65535):
    """Binary (P5) PGM with the image scaled so its maximum maps to maxval.

    Negative values are clipped. Returns the scale that was applied.
    """
    image = np.asarray(image, dtype=float)
    if image.ndim != 2:
        raise InvalidArgument("PGM images must be 2-D, found shape %s" % (image.shape,))
    clipped = np.clip(image, 0.0, None)
    peak = clipped.max()
    scale = maxval / peak if peak > 0 else 1.0
    values = np.rint(clipped * scale)
    dtype = ">u2" if maxval > 255 else "u1"
    rows, cols = image.shape
    with open(filepath, "wb") as outfile:
        outfile.write(b"P5\n%d %d\n%d\n" % (cols, rows, maxval))
        outfile.write(values.astype(dtype).tobytes())
    return scale


def read_pgm(filepath):
    with open(filepath, "rb") as infile:
        data = infile.read()
    magic, pos = _pgm_token(data, 0)
    if magic != b"P5":
        raise FormatError("%s is not a binary PGM file" % filepath)
    cols, pos = _pgm_token(data, pos)
    rows, pos = _pgm_token(data, pos)
    maxval, pos = _pgm_token(data, pos)
    cols, rows, maxval = int(cols), int(rows), int(maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    body = data[pos + 1:]
    count = rows * cols
    if len(body) < count * np.dtype(dtype).itemsize:
        raise FormatError("%s holds fewer than %d pixels" % (filepath, count))
    return np.frombuffer(body, dtype=dtype, count=count).reshape(rows, cols).astype(float)


# -- BIMG --------------------------------------------------------------------


def write_bimg(filepath, array):
    array = np.asarray(array, dtype=float)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise InvalidArgument("BIMG holds 1-D or 2-D arrays, found shape %s" % (array.shape,))
    rows, cols = array.shape
    header = np.array([rows, cols, 0], dtype="<u4")
    with open(filepath, "wb") as outfile:
        outfile.write(BIMG_MAGIC)
        outfile.write(header.tobytes())
        outfile.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_bimg(filepath):
    with open(filepath, "rb") as infile:
        data = infile.read()
    if len(data) < 16 or data[:4] != BIMG_MAGIC:
        raise FormatError("%s is not a BIMG file" % filepath)
    rows, cols, _ = np.frombuffer(data, dtype="<u4", count=3, offset=4)
    count = int(rows) * int(cols)
    if len(data) != 16 + 8 * count:
        raise FormatError(
            "%s: header says %d x %d but holds %d bytes of data"
            % (filepath, rows, cols, len(data) - 16)
        )
    values = np.frombuffer(data, dtype="<f8", count=count, offset=16)
    return values.astype(float).reshape(int(rows), int(cols))


# -- BIDX --------------------------------------------------------------------


def bidx_filename(image_side, recovery_radius, inner_radius):
    return "index_N%d_R%g_r%g.bidx" % (image_side, recovery_radius, inner_radius)


def save_index(filepath, index):
    A = index.A
    header = np.array(
        [BIDX_VERSION, index.map.image_side, index.m, index.n, A.nnz], dtype="<u4"
    )
    radii = np.array([index.recovery_radius, index.inner_radius], dtype="<f8")
    with open(filepath, "wb") as outfile:
        outfile.write(BIDX_MAGIC)
        outfile.write(header.tobytes())
        outfile.write(radii.tobytes())
        outfile.write(np.ascontiguousarray(index.triplets, dtype="<i4").tobytes())
        outfile.write(A.indptr.astype("<i4").tobytes())
        outfile.write(A.indices.astype("<i4").tobytes())
        outfile.write(A.data.astype("<f8").tobytes())
    logger.info("saved bispectrum index to %s", filepath)


def load_index(filepath):
    with open(filepath, "rb") as infile:
        data = infile.read()
    if len(data) < 40 or data[:4] != BIDX_MAGIC:
        raise FormatError("%s is not a BIDX file" % filepath)
    version, N, m, n, nnz = (int(x) for x in np.frombuffer(data, dtype="<u4", count=5, offset=4))
    if version != BIDX_VERSION:
        raise FormatError("%s: unsupported BIDX version %d" % (filepath, version))
    R, r = np.frombuffer(data, dtype="<f8", count=2, offset=24)
    expected = 40 + 16 * m + 4 * (m + 1) + 4 * nnz + 8 * nnz
    if len(data) != expected:
        raise FormatError("%s: expected %d bytes, found %d" % (filepath, expected, len(data)))

    offset = 40
    triplets = np.frombuffer(data, dtype="<i4", count=4 * m, offset=offset)
    offset += 16 * m
    indptr = np.frombuffer(data, dtype="<i4", count=m + 1, offset=offset)
    offset += 4 * (m + 1)
    indices = np.frombuffer(data, dtype="<i4", count=nnz, offset=offset)
    offset += 4 * nnz
    values = np.frombuffer(data, dtype="<f8", count=nnz, offset=offset)

    map = build_phase_map(N, float(R))
    if map.n != n:
        raise FormatError("%s: %d unknowns stored, %d expected" % (filepath, n, map.n))
    triplets = triplets.astype(np.int64).reshape(m, 2, 2)
    triplets.setflags(write=False)
    A = sp.csr_matrix(
        (values.astype(float), indices.astype(np.int64), indptr.astype(np.int64)),
        shape=(m, n),
    )
    logger.info("loaded bispectrum index from %s (m=%d)", filepath, m)
    return BispectrumIndex(triplets, A, map, float(R), float(r))


# -- CSV ---------------------------------------------------------------------


def _cell(value):
    if isinstance(value, float):
        return repr(value)
    return value


def write_csv(filepath, header, rows):
    with open(filepath, "w", newline="") as outfile:
        writer = csv.writer(outfile)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])


def read_csv(filepath):
    """Rows as dicts; numeric cells come back as int or float."""
    out = []
    with open(filepath, newline="") as infile:
        for row in csv.DictReader(infile):
            out.append({key: _parse(value) for key, value in row.items()})
    return out


def _parse(text):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def write_report_csv(filepath, report):
    write_csv(filepath, REPORT_COLUMNS, report.rows())


# -- experiment notes --------------------------------------------------------


def _plain(value):
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    return value


def write_notes(filepath, settings, body):
    """Markdown notes whose YAML frontmatter holds the resolved settings."""
    post = frontmatter.Post(body, **{key: _plain(value) for key, value in settings.items()})
    with open(filepath, "w") as outfile:
        outfile.write(frontmatter.dumps(post))
        outfile.write("\n")


def read_notes(filepath):
    post = frontmatter.load(filepath)
    return dict(post.metadata), post.content


def markdown_table(header, rows):
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for row in rows:
        cells = []
        for value in row:
            cells.append("%.4g" % value if isinstance(value, float) else str(value))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)
