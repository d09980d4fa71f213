"""Triangle mesh <-> token sequence codec.

A mesh is normalized into the unit box [-0.5, 0.5]^3, its vertices are
quantized to per-axis bins and put into a canonical order, and each face is
flattened into nine coordinate tokens: (z, y, x) for each of its three
vertices. A sequence is [S], 9 tokens per face, [E], with [P] used only for
batch padding. Special token ids sit directly above the coordinate bins.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

BOX_MIN = -0.5
BOX_MAX = 0.5
_BOX_EPS = 1e-6  # tolerated float overshoot when validating box membership


class ObjParseError(ValueError):
    """Malformed OBJ record or out-of-range face index."""


@dataclass(frozen=True)
class QuantizerConfig:
    """Uniform per-axis quantization of [-0.5, 0.5] into ``bins`` buckets."""

    bins: int = 128

    def __post_init__(self):
        if not 2 <= self.bins <= 1024:
            raise ValueError(f"bins must be in [2, 1024], got {self.bins}")

    @property
    def start_id(self) -> int:
        return self.bins

    @property
    def end_id(self) -> int:
        return self.bins + 1

    @property
    def pad_id(self) -> int:
        return self.bins + 2

    @property
    def vocab_size(self) -> int:
        return self.bins + 3


@dataclass
class Mesh:
    """Vertices (M, 3) float64 in xyz order and faces (N, 3) int64."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face references a vertex index out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)


def load_obj(path) -> Mesh:
    """Parse an OBJ file: ``v`` and ``f`` records only, everything else skipped.

    Faces with more than three vertices are fan-triangulated. Indices are
    1-based; negative (relative) indices are rejected.
    """
    vertices = []
    faces = []
    with open(path, "r", encoding="utf-8", errors="replace") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise ObjParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
                except ValueError as exc:
                    raise ObjParseError(f"{path}:{lineno}: bad vertex coordinate") from exc
            elif tag == "f":
                if len(parts) < 4:
                    raise ObjParseError(f"{path}:{lineno}: face needs at least 3 vertices")
                idx = []
                for ref in parts[1:]:
                    head = ref.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise ObjParseError(f"{path}:{lineno}: bad face index {ref!r}") from exc
                    if i <= 0:
                        raise ObjParseError(
                            f"{path}:{lineno}: non-positive face index {i} (relative indices unsupported)"
                        )
                    idx.append(i - 1)
                for a, b in zip(idx[1:], idx[2:]):
                    faces.append([idx[0], a, b])
            # vn/vt/usemtl/o/g/s/mtllib and anything else: ignored
    verts = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    face_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(face_arr) and face_arr.max() >= len(verts):
        raise ObjParseError(f"{path}: face index {face_arr.max() + 1} exceeds vertex count {len(verts)}")
    return Mesh(verts, face_arr)


def save_obj(mesh: Mesh, path) -> None:
    """Write ``v``/``f`` records, 1-based indices, 6 decimal places."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.6f} {y:.6f} {z:.6f}\n")
        for a, b, c in mesh.faces:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


def normalize(mesh: Mesh) -> Mesh:
    """Center the bounding box and scale the longest axis to span exactly 1."""
    if mesh.num_vertices == 0:
        raise ValueError("cannot normalize a mesh with no vertices")
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise ValueError("degenerate mesh: zero extent on every axis")
    verts = (mesh.vertices - (lo + hi) / 2.0) / extent
    # guard against float rounding pushing a hull point past the box edge
    verts = np.clip(verts, BOX_MIN, BOX_MAX)
    return Mesh(verts, mesh.faces.copy())


def _quantize_array(coords: np.ndarray, cfg: QuantizerConfig) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if np.any(np.abs(coords) > BOX_MAX + _BOX_EPS):
        raise ValueError("coordinate outside the unit box [-0.5, 0.5]")
    coords = np.clip(coords, BOX_MIN, BOX_MAX)
    bins = np.floor((coords - BOX_MIN) * cfg.bins).astype(np.int64)
    return np.clip(bins, 0, cfg.bins - 1)


def quantize_coord(x: float, cfg: QuantizerConfig) -> int:
    """Bin index of a single coordinate in [-0.5, 0.5]."""
    return int(_quantize_array(np.array(x), cfg))


def dequantize_coord(bin_index, cfg: QuantizerConfig):
    """Center of the given bin(s); inverse of quantization up to bin width."""
    return (np.asarray(bin_index, dtype=np.float64) + 0.5) / cfg.bins + BOX_MIN


def quantize_mesh(mesh: Mesh, cfg: QuantizerConfig = QuantizerConfig()) -> Mesh:
    """Snap every vertex to its bin center."""
    return Mesh(dequantize_coord(_quantize_array(mesh.vertices, cfg), cfg), mesh.faces.copy())


def canonicalize(mesh: Mesh, cfg: QuantizerConfig = QuantizerConfig()) -> Mesh:
    """Put a normalized mesh into its canonical indexable form.

    Vertices are sorted ascending by their quantized (z, y, x) key and
    duplicates under quantization are merged to the first occurrence. Each
    face is rotated so its smallest vertex index leads, faces with fewer than
    three distinct vertices after merging are dropped, and faces are sorted
    lexicographically by their index triples. Idempotent.
    """
    if mesh.num_vertices == 0:
        raise ValueError("cannot canonicalize a mesh with no vertices")
    keys = _quantize_array(mesh.vertices, cfg)[:, [2, 1, 0]]  # rows become (z, y, x)
    _, first_idx, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    verts = mesh.vertices[first_idx]
    faces = inverse.reshape(-1)[mesh.faces]
    if len(faces):
        lead = faces.argmin(axis=1)
        cols = (lead[:, None] + np.arange(3)) % 3
        faces = np.take_along_axis(faces, cols, axis=1)
        distinct = (
            (faces[:, 0] != faces[:, 1])
            & (faces[:, 0] != faces[:, 2])
            & (faces[:, 1] != faces[:, 2])
        )
        if not distinct.all():
            logger.debug("canonicalize: dropped %d degenerate face(s)", int((~distinct).sum()))
        faces = faces[distinct]
        order = np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))
        faces = faces[order]
    return Mesh(verts, faces)


def tokenize(mesh: Mesh, cfg: QuantizerConfig = QuantizerConfig()) -> np.ndarray:
    """Flatten a normalized mesh into [S] + 9 tokens per face + [E].

    The mesh is canonicalized first, so tokenizing is insensitive to input
    vertex/face ordering and tokenize(detokenize(t)) is exact.
    """
    canon = canonicalize(mesh, cfg)
    if canon.num_faces == 0:
        raise ValueError("mesh has no non-degenerate faces to tokenize")
    zyx = _quantize_array(canon.vertices, cfg)[:, [2, 1, 0]]
    body = zyx[canon.faces].reshape(-1)  # (N, 3 vertices, 3 coords) -> 9N
    return np.concatenate(([cfg.start_id], body, [cfg.end_id])).astype(np.int64)


def detokenize(tokens, cfg: QuantizerConfig = QuantizerConfig()) -> Mesh:
    """Rebuild a mesh from a token sequence.

    Reads coordinate tokens after [S] until [E], [P], or end of stream; a
    trailing partial face is discarded with a log message. Identical
    quantized vertices are merged and ordered by (z, y, x); faces keep their
    stream order. Raises on a missing [S], an out-of-range coordinate token,
    or zero complete faces.
    """
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if len(tokens) == 0 or tokens[0] != cfg.start_id:
        raise ValueError("token sequence must begin with the start token")
    body = []
    for tok in tokens[1:]:
        if tok == cfg.end_id or tok == cfg.pad_id:
            break
        if tok < 0 or tok >= cfg.bins:
            raise ValueError(f"token {int(tok)} is not a coordinate token (bins={cfg.bins})")
        body.append(int(tok))
    n_faces = len(body) // 9
    if len(body) % 9:
        logger.debug("detokenize: discarded %d trailing token(s) of an incomplete face", len(body) % 9)
    if n_faces == 0:
        raise ValueError("token sequence contains no complete face")
    zyx = np.asarray(body[: 9 * n_faces], dtype=np.int64).reshape(-1, 3)  # (3N, 3)
    uniq, _, inverse = np.unique(zyx, axis=0, return_index=True, return_inverse=True)
    verts = dequantize_coord(uniq[:, [2, 1, 0]], cfg)  # back to xyz columns
    faces = inverse.reshape(n_faces, 3)
    return Mesh(verts, faces)


def scale_translate(mesh: Mesh, scale, translation) -> Mesh:
    """Apply per-axis scale then translation to every vertex."""
    scale = np.asarray(scale, dtype=np.float64).reshape(-1)
    translation = np.asarray(translation, dtype=np.float64).reshape(-1)
    return Mesh(mesh.vertices * scale + translation, mesh.faces.copy())


def augment(mesh: Mesh, seed: int) -> Mesh:
    """Random per-axis scale in [0.75, 1.0] plus a translation that keeps the
    mesh inside the unit box. Deterministic for a fixed seed."""
    if mesh.num_vertices == 0:
        raise ValueError("cannot augment a mesh with no vertices")
    rng = np.random.default_rng(seed)
    scale = rng.uniform(0.75, 1.0, size=3)
    scaled = mesh.vertices * scale
    lo = scaled.min(axis=0)
    hi = scaled.max(axis=0)
    translation = rng.uniform(BOX_MIN - lo, BOX_MAX - hi)
    return Mesh(scaled + translation, mesh.faces.copy())


def filter_dataset(meshes, max_faces: int, cfg: QuantizerConfig = QuantizerConfig()):
    """Canonicalize each mesh and keep those with at most ``max_faces`` faces."""
    kept = []
    for mesh in meshes:
        canon = canonicalize(mesh, cfg)
        if canon.num_faces <= max_faces:
            kept.append(canon)
    return kept


TOKEN_FILE_TAG = "iflame-tokens"
TOKEN_FILE_VERSION = "v1"


def write_tokens(path, tokens, cfg: QuantizerConfig) -> None:
    """Text token stream: one header line, then whitespace-separated ids."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{TOKEN_FILE_TAG} {TOKEN_FILE_VERSION} bins={cfg.bins}\n")
        fh.write(" ".join(str(int(t)) for t in tokens))
        fh.write("\n")


def read_tokens(path):
    """Inverse of :func:`write_tokens`; returns (tokens, QuantizerConfig)."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 3 or header[0] != TOKEN_FILE_TAG or header[1] != TOKEN_FILE_VERSION:
            raise ValueError(f"{path}: not a {TOKEN_FILE_TAG} {TOKEN_FILE_VERSION} file")
        key, _, value = header[2].partition("=")
        if key != "bins":
            raise ValueError(f"{path}: malformed header field {header[2]!r}")
        cfg = QuantizerConfig(bins=int(value))
        body = fh.read().split()
    tokens = np.asarray([int(t) for t in body], dtype=np.int64)
    if len(tokens) and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
        raise ValueError(f"{path}: token id outside vocabulary of size {cfg.vocab_size}")
    return tokens, cfg
