"""Binary fingerprints, Tanimoto algebra and deduplication keys.

The built-in featurizer hashes character n-grams of the structure string with
FNV-1a 64-bit (fixed constants, see ``_util.fnv1a64``) into a fixed-width bit
vector; it is a chemistry-free stand-in that preserves the binary-sparse
geometry the downstream forest and similarity machinery assume.  Externally
computed fingerprints (e.g. real circular fingerprints) enter through
``load_fingerprints``.

Convention: two all-zero fingerprints have Tanimoto 1.0 — featureless items
are maximally similar for dedup purposes.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._util import fnv1a64
from .errors import FeatureError

DEFAULT_WIDTH = 2048
DEFAULT_NGRAM = (2, 4)


@dataclass(frozen=True)
class Fingerprint:
    """Fixed-width binary feature vector with a cached popcount."""

    bits: np.ndarray  # bool, read-only
    popcount: int

    @classmethod
    def from_bits(cls, bits: np.ndarray) -> "Fingerprint":
        bits = np.asarray(bits, dtype=bool).copy()
        bits.flags.writeable = False
        return cls(bits=bits, popcount=int(bits.sum()))

    @property
    def width(self) -> int:
        return int(self.bits.shape[0])


def hashed_ngram_fingerprint(
    structure: str, n_min: int = 2, n_max: int = 4, width: int = DEFAULT_WIDTH
) -> Fingerprint:
    """Hash every character n-gram of length n_min..n_max into a bit vector.

    Deterministic across platforms (fixed hash, fixed constants).  A structure
    shorter than n_min has no n-grams and yields the zero fingerprint with a
    warning; an empty structure is an error.
    """
    if not structure:
        raise FeatureError("empty structure string")
    if not (1 <= n_min <= n_max):
        raise FeatureError(f"bad n-gram range [{n_min}, {n_max}]")
    if width < 1 or (width & (width - 1)) != 0:
        raise FeatureError(f"width must be a power of two, got {width}")
    bits = np.zeros(width, dtype=bool)
    data = structure.encode("utf-8")
    if len(structure) < n_min:
        warnings.warn(f"structure shorter than n_min={n_min}: zero fingerprint")
    mask = width - 1
    for n in range(n_min, n_max + 1):
        for i in range(len(data) - n + 1):
            bits[fnv1a64(data[i : i + n]) & mask] = True
    return Fingerprint.from_bits(bits)


def featurize_structures(
    structures, n_min: int = 2, n_max: int = 4, width: int = DEFAULT_WIDTH
) -> np.ndarray:
    """Feature matrix (n, width) for a structure list.

    Pure function of (structures, parameters): identical structures produce
    identical rows, so matrices are bit-identical across runs and worker
    counts.  Distinct structures are featurized once and broadcast.
    """
    cache: dict[str, np.ndarray] = {}
    out = np.zeros((len(structures), width), dtype=bool)
    for i, s in enumerate(structures):
        row = cache.get(s)
        if row is None:
            row = hashed_ngram_fingerprint(s, n_min, n_max, width).bits
            cache[s] = row
        out[i] = row
    return out


def load_fingerprints(path) -> dict[str, Fingerprint]:
    """Read a compound_id,hex_bits CSV of externally computed fingerprints.

    Hex digits are MSB-first: bit j of the fingerprint is bit j of the hex
    string read left to right.  All rows must share one width; a compound id
    repeated with different bits is fatal, repeated identically is accepted.
    """
    out: dict[str, Fingerprint] = {}
    width: Optional[int] = None
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["compound_id", "hex_bits"]:
            raise FeatureError(f"{path}: expected header compound_id,hex_bits")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FeatureError(f"{path}:{lineno}: expected 2 fields")
            cid, hexbits = row[0].strip(), row[1].strip()
            try:
                raw = bytes.fromhex(hexbits)
            except ValueError:
                raise FeatureError(f"{path}:{lineno}: bad hex") from None
            bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8)).astype(bool)
            if width is None:
                width = bits.shape[0]
            elif bits.shape[0] != width:
                raise FeatureError(
                    f"{path}:{lineno}: width {bits.shape[0]} != {width}", code_line=lineno
                )
            fp = Fingerprint.from_bits(bits)
            if cid in out:
                if not np.array_equal(out[cid].bits, fp.bits):
                    raise FeatureError(f"{path}:{lineno}: conflicting bits for {cid}")
                continue
            out[cid] = fp
    if not out:
        raise FeatureError(f"{path}: no fingerprints")
    return out


def fingerprint_coverage(fps: dict[str, Fingerprint], compound_ids) -> list[str]:
    """Compound ids missing from a fingerprint file (the coverage report)."""
    return sorted({c for c in compound_ids if c not in fps})


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    """Bit-vector Jaccard index; 1.0 when both vectors are all-zero."""
    if a.width != b.width:
        raise FeatureError(f"width mismatch {a.width} != {b.width}")
    union = int(np.count_nonzero(a.bits | b.bits))
    if union == 0:
        return 1.0
    inter = int(np.count_nonzero(a.bits & b.bits))
    return inter / union


def tanimoto_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Pairwise Tanimoto between row sets of two bool matrices -> (|A|, |B|)."""
    if A.shape[1] != B.shape[1]:
        raise FeatureError(f"width mismatch {A.shape[1]} != {B.shape[1]}")
    Af = A.astype(np.float32)
    Bf = B.astype(np.float32)
    inter = Af @ Bf.T
    pa = Af.sum(axis=1)[:, None]
    pb = Bf.sum(axis=1)[None, :]
    union = pa + pb - inter
    out = np.where(union > 0, inter / np.maximum(union, 1e-30), 1.0)
    return out


def max_train_similarity(test: Fingerprint, train: list[Fingerprint]) -> float:
    """Maximum Tanimoto of a test item over a non-empty training set."""
    if not train:
        raise FeatureError("empty training set")
    return max(tanimoto(test, t) for t in train)


def max_train_similarity_rows(test_rows: np.ndarray, train_rows: np.ndarray) -> np.ndarray:
    if train_rows.shape[0] == 0:
        raise FeatureError("empty training set")
    return tanimoto_matrix(test_rows, train_rows).max(axis=1)


def dedup_key(structure: str, overrides: Optional[dict] = None, compound_id: Optional[str] = None) -> str:
    """Deduplication key: the exact structure string by default.

    Whitespace-differing strings are distinct keys under the default.  A key
    file (compound_id -> key) overrides for externally canonicalised
    structures; the override is looked up by compound id.
    """
    if overrides is not None and compound_id is not None and compound_id in overrides:
        return overrides[compound_id]
    return structure


def load_key_overrides(path) -> dict[str, str]:
    """Read a compound_id,key override CSV."""
    out: dict[str, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["compound_id", "key"]:
            raise FeatureError(f"{path}: expected header compound_id,key")
        for row in reader:
            if row:
                out[row[0].strip()] = row[1]
    return out


def record_dedup_keys(cohort, overrides: Optional[dict] = None) -> np.ndarray:
    """Per-record dedup keys for a cohort (object array, cohort order)."""
    return np.array(
        [
            dedup_key(r.structure, overrides=overrides, compound_id=r.compound_id)
            for r in cohort.records
        ],
        dtype=object,
    )


def save_fingerprints(fps: dict[str, Fingerprint], path) -> None:
    """Inverse of load_fingerprints (hex MSB-first, sorted by compound id)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["compound_id", "hex_bits"])
        for cid in sorted(fps):
            packed = np.packbits(fps[cid].bits.astype(np.uint8))
            writer.writerow([cid, packed.tobytes().hex()])
