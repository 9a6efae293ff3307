"""Byte-exact cache persistence: manifest, context files, gradient shards.

Every multi-byte integer and float is little-endian; a cache written on one
platform parses identically on any other.  Layouts:

permutation file (``perm.dmpm``), 12 + 4*L_pad bytes:
    magic "DMPM" | padded_len u64 | padded_len x u32 indices

sign file (``signs.dmsg``), 12 + ceil(L_pad/8) bytes:
    magic "DMSG" | padded_len u64 | packed bits, LSB-first within each byte

gradient shard (``shard-NNNN.dmin``), 20 + record_count*(8 + S*v*4) bytes:
    magic "DMIN" | version u16 | v u32 | S u16 | record_count u64
    then records: sample_id u64 | S*v float32

dataset file (``*.dmds``):
    magic "DMDS" | version u16 | count u64 | dim u32 | has_labels u8
    then count*dim float32, then (if labelled) count int32

model checkpoint (``*.dmmd``):
    magic "DMMD" | version u16 | data_dim u32 | hidden_dim u32 |
    n_classes u32 | T u32 | beta_start f64 | beta_end f64 |
    epochs u32 | avg_lr f64 | param_count u64 | param_count float64 weights

The manifest (``manifest.txt``) is UTF-8 ``key = value`` lines binding a
cache to its model hash, seeds, timestep plan, and compression config; it
is the interchange surface for external gradient producers.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .diffusion import Dataset, DenoiserModel
from .errors import ConfigError, FormatError
from .sketch import SketchConfig, SketchContext
from . import rng

PERM_MAGIC = b"DMPM"
SIGN_MAGIC = b"DMSG"
SHARD_MAGIC = b"DMIN"
DATASET_MAGIC = b"DMDS"
MODEL_MAGIC = b"DMMD"
SHARD_VERSION = 1
SCHEMA_VERSION = 1

MANIFEST_NAME = "manifest.txt"
PERM_NAME = "perm.dmpm"
SIGN_NAME = "signs.dmsg"


# ---------------------------------------------------------------------------
# size formulas (tested byte-exactly)


def perm_file_bytes(padded_len: int) -> int:
    return 12 + 4 * padded_len


def sign_file_bytes(padded_len: int) -> int:
    return 12 + (padded_len + 7) // 8


def record_bytes(S: int, v: int) -> int:
    return 8 + S * v * 4


def shard_bytes(record_count: int, S: int, v: int) -> int:
    return 20 + record_count * record_bytes(S, v)


# ---------------------------------------------------------------------------
# manifest


_MANIFEST_KEYS = (
    "schema_version", "model_hash", "param_count", "padded_len", "target_dim",
    "plan_steps", "T", "sketch_seed", "noise_seed", "dtype", "sample_count",
    "epochs", "avg_lr", "normalize", "forward_noise",
)


@dataclass(frozen=True)
class Manifest:
    model_hash: str
    param_count: int
    padded_len: int
    target_dim: int
    plan_steps: tuple[int, ...]
    T: int
    sketch_seed: int
    noise_seed: int
    sample_count: int
    epochs: int
    avg_lr: float
    schema_version: int = SCHEMA_VERSION
    dtype: str = "f32"
    normalize: bool = True
    forward_noise: str = "scaled"

    def check(self) -> None:
        """Raise ConfigError on internal inconsistency."""
        if self.padded_len % self.target_dim != 0:
            raise ConfigError(
                f"padded_len {self.padded_len} not divisible by "
                f"target_dim {self.target_dim}"
            )
        if self.padded_len < self.param_count:
            raise ConfigError("padded_len smaller than param_count")
        if self.padded_len - self.param_count >= self.target_dim:
            raise ConfigError("padded_len is not the smallest multiple")
        steps = self.plan_steps
        if not steps or list(steps) != sorted(set(steps)):
            raise ConfigError("plan_steps must be strictly increasing")
        if steps[0] < 1 or steps[-1] > self.T:
            raise ConfigError(f"plan steps must lie in [1, {self.T}]")
        if self.dtype != "f32":
            raise ConfigError(f"unsupported cache dtype {self.dtype!r}")
        if self.forward_noise not in ("scaled", "unscaled"):
            raise ConfigError(f"unknown forward_noise {self.forward_noise!r}")

    def to_text(self) -> str:
        vals = {
            "schema_version": self.schema_version,
            "model_hash": self.model_hash,
            "param_count": self.param_count,
            "padded_len": self.padded_len,
            "target_dim": self.target_dim,
            "plan_steps": ",".join(str(s) for s in self.plan_steps),
            "T": self.T,
            "sketch_seed": self.sketch_seed,
            "noise_seed": self.noise_seed,
            "dtype": self.dtype,
            "sample_count": self.sample_count,
            "epochs": self.epochs,
            "avg_lr": repr(self.avg_lr),
            "normalize": "true" if self.normalize else "false",
            "forward_noise": self.forward_noise,
        }
        return "".join(f"{k} = {vals[k]}\n" for k in _MANIFEST_KEYS)


def parse_keyvalues(text: str) -> dict[str, str]:
    """Parse the ``key = value`` dialect (also used by experiment configs)."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FormatError(f"line {lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


def manifest_from_text(text: str) -> Manifest:
    kv = parse_keyvalues(text)
    missing = [k for k in _MANIFEST_KEYS if k not in kv]
    if missing:
        raise FormatError(f"manifest missing keys: {', '.join(missing)}")
    try:
        return Manifest(
            schema_version=int(kv["schema_version"]),
            model_hash=kv["model_hash"],
            param_count=int(kv["param_count"]),
            padded_len=int(kv["padded_len"]),
            target_dim=int(kv["target_dim"]),
            plan_steps=tuple(int(s) for s in kv["plan_steps"].split(",") if s),
            T=int(kv["T"]),
            sketch_seed=int(kv["sketch_seed"]),
            noise_seed=int(kv["noise_seed"]),
            dtype=kv["dtype"],
            sample_count=int(kv["sample_count"]),
            epochs=int(kv["epochs"]),
            avg_lr=float(kv["avg_lr"]),
            normalize=kv["normalize"] == "true",
            forward_noise=kv["forward_noise"],
        )
    except ValueError as exc:
        raise FormatError(f"malformed manifest value: {exc}") from exc


def write_manifest(manifest: Manifest, directory: Path) -> Path:
    path = Path(directory) / MANIFEST_NAME
    path.write_text(manifest.to_text(), encoding="utf-8")
    return path


def read_manifest(directory: Path) -> Manifest:
    path = Path(directory) / MANIFEST_NAME
    if not path.exists():
        raise FormatError(f"no manifest at {path}")
    return manifest_from_text(path.read_text(encoding="utf-8"))


def manifest_hash(directory: Path) -> str:
    """SHA-256 of the manifest file bytes; binds indexes to caches."""
    raw = (Path(directory) / MANIFEST_NAME).read_bytes()
    return hashlib.sha256(raw).hexdigest()


def model_hash(model: DenoiserModel) -> str:
    """Content hash of the flat weights (little-endian float64 bytes)."""
    return hashlib.sha256(model.weights.astype("<f8").tobytes()).hexdigest()


# ---------------------------------------------------------------------------
# sketch context files


def write_context(ctx: SketchContext, directory: Path) -> None:
    directory = Path(directory)
    n = ctx.config.padded_len
    perm_path = directory / PERM_NAME
    with open(perm_path, "wb") as f:
        f.write(PERM_MAGIC)
        f.write(struct.pack("<Q", n))
        f.write(ctx.perm.astype("<u4").tobytes())
    sign_path = directory / SIGN_NAME
    with open(sign_path, "wb") as f:
        f.write(SIGN_MAGIC)
        f.write(struct.pack("<Q", n))
        f.write(rng.pack_sign_bytes(ctx.sign_words, n))


def _read_header(path: Path, magic: bytes) -> tuple[bytes, int]:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise FormatError(f"{path}: too short for header", offset=len(raw))
    if raw[:4] != magic:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}", offset=0)
    (n,) = struct.unpack_from("<Q", raw, 4)
    return raw, n


def read_context(directory: Path, manifest: Manifest | None = None) -> SketchContext:
    directory = Path(directory)
    if manifest is None:
        manifest = read_manifest(directory)
    raw, n = _read_header(directory / PERM_NAME, PERM_MAGIC)
    if n != manifest.padded_len:
        raise FormatError(
            f"permutation length {n} does not match manifest "
            f"padded_len {manifest.padded_len}", offset=4,
        )
    if len(raw) != perm_file_bytes(n):
        raise FormatError(
            f"permutation file has {len(raw)} bytes, expected {perm_file_bytes(n)}",
            offset=min(len(raw), perm_file_bytes(n)),
        )
    perm = np.frombuffer(raw, dtype="<u4", offset=12).astype(np.uint32)

    raw, n2 = _read_header(directory / SIGN_NAME, SIGN_MAGIC)
    if n2 != n:
        raise FormatError(f"sign length {n2} != permutation length {n}", offset=4)
    if len(raw) != sign_file_bytes(n):
        raise FormatError(
            f"sign file has {len(raw)} bytes, expected {sign_file_bytes(n)}",
            offset=min(len(raw), sign_file_bytes(n)),
        )
    words = rng.words_from_sign_bytes(raw[12:], n)
    config = SketchConfig(
        manifest.param_count, manifest.target_dim, manifest.sketch_seed, n
    )
    return SketchContext(config, perm, words)


# ---------------------------------------------------------------------------
# gradient shards


def shard_paths(directory: Path) -> list[Path]:
    return sorted(Path(directory).glob("shard-*.dmin"))


def create_shard(path: Path, S: int, v: int) -> None:
    with open(path, "wb") as f:
        f.write(SHARD_MAGIC)
        f.write(struct.pack("<HIHQ", SHARD_VERSION, v, S, 0))


def _read_shard_header(f, path: Path) -> tuple[int, int, int]:
    head = f.read(20)
    if len(head) < 20:
        raise FormatError(f"{path}: truncated shard header", offset=len(head))
    if head[:4] != SHARD_MAGIC:
        raise FormatError(f"{path}: bad shard magic {head[:4]!r}", offset=0)
    version, v, S, count = struct.unpack("<HIHQ", head[4:])
    if version != SHARD_VERSION:
        raise FormatError(f"{path}: unsupported shard version {version}", offset=4)
    return v, S, count


def append_records(path: Path, records: Iterable[tuple[int, np.ndarray]]) -> int:
    """Append (sample_id, sketches) records; returns the new record count.

    Each record goes out in a single write, and the header count is
    rewritten only after all appends land, so a torn write shows up as a
    partial trailing record on scan rather than silent corruption.
    """
    path = Path(path)
    with open(path, "r+b") as f:
        v, S, count = _read_shard_header(f, path)
        f.seek(0, 2)
        appended = 0
        for sample_id, sk in records:
            sk = np.ascontiguousarray(sk, dtype="<f4")
            if sk.shape != (S, v):
                raise FormatError(
                    f"record shape {sk.shape} does not match shard ({S}, {v})"
                )
            f.write(struct.pack("<Q", int(sample_id)) + sk.tobytes())
            appended += 1
        f.seek(12)
        f.write(struct.pack("<Q", count + appended))
    return count + appended


def stream_scan(
    path: Path, expect_v: int | None = None, expect_S: int | None = None
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (sample_id, (S, v) float32 sketches) in file order.

    Bounded memory: one record is resident at a time.  Truncated trailing
    data raises FormatError naming the byte offset where the bad record
    starts.
    """
    path = Path(path)
    with open(path, "rb") as f:
        v, S, count = _read_shard_header(f, path)
        if expect_v is not None and v != expect_v:
            raise FormatError(f"{path}: shard v={v}, expected {expect_v}", offset=6)
        if expect_S is not None and S != expect_S:
            raise FormatError(f"{path}: shard S={S}, expected {expect_S}", offset=10)
        rec = record_bytes(S, v)
        offset = 20
        seen = 0
        while True:
            chunk = f.read(rec)
            if not chunk:
                break
            if len(chunk) < rec:
                raise FormatError(
                    f"{path}: partial record ({len(chunk)} of {rec} bytes)",
                    offset=offset,
                )
            (sample_id,) = struct.unpack_from("<Q", chunk)
            values = np.frombuffer(chunk, dtype="<f4", offset=8).reshape(S, v)
            yield int(sample_id), values
            offset += rec
            seen += 1
        if seen != count:
            raise FormatError(
                f"{path}: header claims {count} records, found {seen}",
                offset=offset,
            )


def scan_cache(directory: Path, manifest: Manifest | None = None) -> Iterator[tuple[int, np.ndarray]]:
    """Scan all shards of a cache in shard order."""
    directory = Path(directory)
    if manifest is None:
        manifest = read_manifest(directory)
    S, v = len(manifest.plan_steps), manifest.target_dim
    for path in shard_paths(directory):
        yield from stream_scan(path, expect_v=v, expect_S=S)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.findings

    def __str__(self) -> str:
        if self.ok:
            return "cache valid: no findings"
        return "\n".join(f"- {f}" for f in self.findings)


def validate(directory: Path, manifest: Manifest | None = None) -> ValidationReport:
    """Cross-check a cache directory; collects findings, never raises."""
    directory = Path(directory)
    findings: list[str] = []
    if manifest is None:
        try:
            manifest = read_manifest(directory)
        except (FormatError, OSError) as exc:
            return ValidationReport((f"manifest: {exc}",))
    try:
        manifest.check()
    except ConfigError as exc:
        findings.append(f"manifest: {exc}")

    if len(manifest.model_hash) != 64 or any(
        c not in "0123456789abcdef" for c in manifest.model_hash
    ):
        findings.append("manifest: model_hash is not 64 hex digits")

    for name, magic, size_fn in (
        (PERM_NAME, PERM_MAGIC, perm_file_bytes),
        (SIGN_NAME, SIGN_MAGIC, sign_file_bytes),
    ):
        path = directory / name
        if not path.exists():
            findings.append(f"{name}: missing")
            continue
        try:
            raw, n = _read_header(path, magic)
        except FormatError as exc:
            findings.append(f"{name}: {exc}")
            continue
        if n != manifest.padded_len:
            findings.append(
                f"{name}: length field {n} != manifest padded_len {manifest.padded_len}"
            )
        expected = size_fn(n)
        if len(raw) != expected:
            findings.append(f"{name}: {len(raw)} bytes, expected {expected}")

    S, v = len(manifest.plan_steps), manifest.target_dim
    rec = record_bytes(S, v)
    total = 0
    shards = shard_paths(directory)
    if not shards:
        findings.append("no gradient shards found")
    for path in shards:
        size = path.stat().st_size
        try:
            with open(path, "rb") as f:
                sv, sS, count = _read_shard_header(f, path)
        except FormatError as exc:
            findings.append(f"{path.name}: {exc}")
            continue
        if (sv, sS) != (v, S):
            findings.append(
                f"{path.name}: shard (S={sS}, v={sv}) != manifest (S={S}, v={v})"
            )
            continue
        expected = shard_bytes(count, S, v)
        if size != expected:
            whole = (size - 20) // rec if size >= 20 else 0
            findings.append(
                f"{path.name}: {size} bytes, expected {expected} for {count} "
                f"records (integrity break at byte offset {20 + whole * rec})"
            )
        total += count
    if shards and total != manifest.sample_count:
        findings.append(
            f"shards hold {total} records, manifest says {manifest.sample_count}"
        )
    return ValidationReport(tuple(findings))


# ---------------------------------------------------------------------------
# dataset and model checkpoints


def save_dataset(dataset: Dataset, path: Path) -> None:
    path = Path(path)
    has_labels = dataset.labels is not None
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<HQIB", 1, len(dataset), dataset.xs.shape[1], int(has_labels)))
        f.write(np.ascontiguousarray(dataset.xs, dtype="<f4").tobytes())
        if has_labels:
            f.write(np.ascontiguousarray(dataset.labels, dtype="<i4").tobytes())


def load_dataset(path: Path) -> Dataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 19 or raw[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file", offset=0)
    version, count, dim, has_labels = struct.unpack_from("<HQIB", raw, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported dataset version {version}", offset=4)
    expected = 19 + count * dim * 4 + (count * 4 if has_labels else 0)
    if len(raw) != expected:
        raise FormatError(
            f"{path}: {len(raw)} bytes, expected {expected}",
            offset=min(len(raw), expected),
        )
    xs = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=19)
    xs = xs.reshape(count, dim).astype(np.float32)
    labels = None
    if has_labels:
        labels = np.frombuffer(
            raw, dtype="<i4", count=count, offset=19 + count * dim * 4
        ).astype(np.int32)
    return Dataset(xs, labels)


@dataclass(frozen=True)
class Checkpoint:
    """Trained model plus everything needed to rebuild its training context."""

    model: DenoiserModel
    T: int
    beta_start: float
    beta_end: float
    epochs: int
    avg_lr: float


def save_checkpoint(ck: Checkpoint, path: Path) -> None:
    m = ck.model
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(struct.pack(
            "<HIIIIddIdQ",
            1, m.data_dim, m.hidden_dim, m.n_classes, ck.T,
            ck.beta_start, ck.beta_end, ck.epochs, ck.avg_lr, m.n_params,
        ))
        f.write(m.weights.astype("<f8").tobytes())


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    header = struct.calcsize("<HIIIIddIdQ") + 4
    if len(raw) < header or raw[:4] != MODEL_MAGIC:
        raise FormatError(f"{path}: not a model checkpoint", offset=0)
    (version, d, h, c, T, beta_start, beta_end, epochs, avg_lr, n_params) = (
        struct.unpack_from("<HIIIIddIdQ", raw, 4)
    )
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    expected = header + n_params * 8
    if len(raw) != expected:
        raise FormatError(
            f"{path}: {len(raw)} bytes, expected {expected}",
            offset=min(len(raw), expected),
        )
    weights = np.frombuffer(raw, dtype="<f8", offset=header).astype(np.float32)
    model = DenoiserModel(d, h, c, weights)
    return Checkpoint(model, T, beta_start, beta_end, epochs, avg_lr)


# ---------------------------------------------------------------------------
# cache writer


DEFAULT_SHARD_LIMIT = 1 << 30  # split shards at 1 GiB for parallel scans


class CacheWriter:
    """Create a cache directory: manifest + context + sharded records."""

    def __init__(self, directory: Path, manifest: Manifest, ctx: SketchContext,
                 shard_limit: int = DEFAULT_SHARD_LIMIT):
        manifest.check()
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.manifest = manifest
        self.shard_limit = shard_limit
        self._S = len(manifest.plan_steps)
        self._v = manifest.target_dim
        self._written = 0
        self._shard_idx = 0
        self._shard_count = 0
        write_context(ctx, self.directory)
        create_shard(self._shard_path(), self._S, self._v)

    def _shard_path(self) -> Path:
        return self.directory / f"shard-{self._shard_idx:04d}.dmin"

    def add(self, records: Iterable[tuple[int, np.ndarray]]) -> None:
        rec = record_bytes(self._S, self._v)
        pending: list[tuple[int, np.ndarray]] = []
        for record in records:
            if 20 + (self._shard_count + len(pending) + 1) * rec > self.shard_limit \
                    and (self._shard_count + len(pending)) > 0:
                self._flush(pending)
                pending = []
                self._shard_idx += 1
                self._shard_count = 0
                create_shard(self._shard_path(), self._S, self._v)
            pending.append(record)
        self._flush(pending)

    def _flush(self, pending) -> None:
        if pending:
            append_records(self._shard_path(), pending)
            self._shard_count += len(pending)
            self._written += len(pending)

    def finish(self) -> Manifest:
        final = replace(self.manifest, sample_count=self._written)
        write_manifest(final, self.directory)
        return final
