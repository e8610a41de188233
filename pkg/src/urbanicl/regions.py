"""Regions, profiles and their file formats, splitting, and a synthetic city.

A city is a fixed partition into ``N`` regions with dense ids ``0..N-1``.
A profile assigns one indicator value to every region. Profiles are
z-scored individually so that masked entries are on the same scale as the
standard normal noise the sampler starts from.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError

SOURCE_TAGS = ("poi-category", "mobility-inflow", "mobility-outflow", "synthetic", "indicator")


def _frozen(values, dtype=np.float64) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class RegionSet:
    count: int
    names: Optional[tuple] = None

    def __post_init__(self):
        if int(self.count) < 2:
            raise ConfigError(f"a city needs at least 2 regions, got {self.count}")
        if self.names is not None:
            object.__setattr__(self, "names", tuple(str(n) for n in self.names))
            if len(self.names) != self.count:
                raise ConfigError(f"{len(self.names)} names for {self.count} regions")

    @property
    def ids(self) -> range:
        return range(self.count)


@dataclass(frozen=True)
class Profile:
    values: np.ndarray
    indicator_name: str = "indicator"
    norm_mean: Optional[float] = None
    norm_std: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values))
        if self.values.ndim != 1:
            raise DataError(f"profile values must be a vector, got shape {self.values.shape}")

    def __len__(self):
        return len(self.values)

    @property
    def is_normalized(self) -> bool:
        return self.norm_mean is not None and self.norm_std is not None


@dataclass(frozen=True)
class ProfileMatrix:
    profiles: tuple
    source_tags: tuple
    region_set: RegionSet

    def __post_init__(self):
        object.__setattr__(self, "profiles", tuple(self.profiles))
        object.__setattr__(self, "source_tags", tuple(self.source_tags))
        if len(self.profiles) != len(self.source_tags):
            raise DataError("one source tag per profile is required")
        for k, (prof, tag) in enumerate(zip(self.profiles, self.source_tags)):
            if len(prof) != self.region_set.count:
                raise DataError(
                    f"profile {k} ({prof.indicator_name}) has {len(prof)} values, "
                    f"expected {self.region_set.count}"
                )
            if not np.all(np.isfinite(prof.values)):
                raise DataError(f"profile {k} ({prof.indicator_name}) has NaN/Inf values")
            if tag not in SOURCE_TAGS:
                raise DataError(f"profile {k}: unknown source tag {tag!r}")

    def __len__(self):
        return len(self.profiles)

    def values(self, tags: Optional[Sequence[str]] = None) -> np.ndarray:
        """Stack profile values into an ``(M, N)`` array, optionally filtered by tag."""
        rows = [p.values for p, t in zip(self.profiles, self.source_tags) if tags is None or t in tags]
        if not rows:
            return np.zeros((0, self.region_set.count))
        return np.stack(rows)

    def select(self, tags: Sequence[str]) -> "ProfileMatrix":
        keep = [k for k, t in enumerate(self.source_tags) if t in tags]
        return self.subset(keep)

    def exclude(self, tags: Sequence[str]) -> "ProfileMatrix":
        keep = [k for k, t in enumerate(self.source_tags) if t not in tags]
        return self.subset(keep)

    def subset(self, indices: Sequence[int]) -> "ProfileMatrix":
        return ProfileMatrix(
            [self.profiles[k] for k in indices],
            [self.source_tags[k] for k in indices],
            self.region_set,
        )


@dataclass(frozen=True)
class Split:
    train_idx: tuple
    val_idx: tuple
    test_idx: tuple
    seed: int = 0

    def __post_init__(self):
        for name in ("train_idx", "val_idx", "test_idx"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        all_ids = self.train_idx + self.val_idx + self.test_idx
        if len(set(all_ids)) != len(all_ids):
            raise DataError("split parts overlap")

    @property
    def n_regions(self) -> int:
        return len(self.train_idx) + len(self.val_idx) + len(self.test_idx)

    def observed_mask(self) -> np.ndarray:
        """Mask bits for in-context inference: train regions observed, the rest unknown."""
        bits = np.ones(self.n_regions, dtype=np.int8)
        bits[list(self.train_idx)] = 0
        return bits


@dataclass(frozen=True)
class ReferenceEmbeddings:
    matrix: np.ndarray
    source: str = "unknown"

    def __post_init__(self):
        object.__setattr__(self, "matrix", _frozen(self.matrix))
        if self.matrix.ndim != 2:
            raise DataError(f"reference embeddings must be 2-D, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise DataError("reference embeddings contain NaN/Inf")
        norms = np.linalg.norm(self.matrix, axis=1)
        if np.any(norms == 0):
            bad = np.flatnonzero(norms == 0)[:5].tolist()
            raise DataError(f"reference embeddings have zero-norm rows (e.g. {bad}); cosine undefined")

    @property
    def shape(self):
        return self.matrix.shape


# normalization -------------------------------------------------------------


def normalize(profile: Profile) -> Profile:
    """Z-score a profile and remember the statistics.

    Uses the population standard deviation. A constant profile maps to all
    zeros with ``norm_std = 1``.
    """
    x = profile.values
    if len(x) < 2:
        raise DataError("normalization needs at least 2 regions")
    mean = float(np.mean(x))
    std = float(np.std(x))
    if std <= 1e-12 * max(1.0, abs(mean)):
        return replace(profile, values=np.zeros_like(x), norm_mean=mean, norm_std=1.0)
    return replace(profile, values=(x - mean) / std, norm_mean=mean, norm_std=std)


def denormalize(profile: Profile) -> Profile:
    if not profile.is_normalized:
        raise DataError(f"profile {profile.indicator_name!r} carries no normalization statistics")
    values = profile.values * profile.norm_std + profile.norm_mean
    return replace(profile, values=values, norm_mean=None, norm_std=None)


def normalize_matrix(matrix: ProfileMatrix) -> ProfileMatrix:
    return ProfileMatrix([normalize(p) for p in matrix.profiles], matrix.source_tags, matrix.region_set)


# splitting -----------------------------------------------------------------


def make_split(region_set: RegionSet, fractions=(0.7, 0.1, 0.2), seed: int = 0) -> Split:
    """Random train/val/test partition of the region ids.

    Part sizes use largest-remainder rounding, so they always sum to ``N``.
    With ``N >= 3`` every part gets at least one region.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ConfigError(f"split fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)!r}")
    n = region_set.count
    exact = [f * n for f in fractions]
    sizes = [math.floor(e) for e in exact]
    order = sorted(range(3), key=lambda k: (-(exact[k] - sizes[k]), k))
    for k in order[: n - sum(sizes)]:
        sizes[k] += 1
    if n >= 3:
        # rounding can empty a small part; borrow from the largest one
        for k in range(3):
            if sizes[k] == 0:
                sizes[max(range(3), key=lambda j: sizes[j])] -= 1
                sizes[k] = 1
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return Split(
        sorted(perm[:a].tolist()), sorted(perm[a:b].tolist()), sorted(perm[b:].tolist()), seed=int(seed)
    )


def save_split(split: Split, path) -> None:
    payload = {
        "train": list(split.train_idx),
        "val": list(split.val_idx),
        "test": list(split.test_idx),
        "seed": split.seed,
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_split(path, region_set: Optional[RegionSet] = None) -> Split:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        split = Split(payload["train"], payload["val"], payload["test"], seed=int(payload.get("seed", 0)))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a valid split file ({exc})") from exc
    if region_set is not None and sorted(split.train_idx + split.val_idx + split.test_idx) != list(
        region_set.ids
    ):
        raise DataError(f"{path}: split does not cover region ids 0..{region_set.count - 1} exactly once")
    return split


# file ingestion ------------------------------------------------------------


def _parse_float(cell: str, where: str) -> float:
    if cell is None or cell.strip() == "":
        raise DataError(f"{where}: missing value")
    try:
        value = float(cell)
    except ValueError:
        raise DataError(f"{where}: non-numeric value {cell!r}") from None
    if not math.isfinite(value):
        raise DataError(f"{where}: non-finite value {cell!r}")
    return value


def load_profile_csv(path, region_set: RegionSet) -> Profile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows or len(rows[0]) != 2 or rows[0][0].strip() != "region_id":
        raise DataError(f"{path}:1: header must be 'region_id,<indicator_name>'")
    name = rows[0][1].strip()
    values = np.full(region_set.count, np.nan)
    seen = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{path}:{lineno}: ragged row with {len(row)} cells, expected 2")
        try:
            rid = int(row[0])
        except ValueError:
            raise DataError(f"{path}:{lineno}, column region_id: non-numeric region id {row[0]!r}") from None
        if rid < 0 or rid >= region_set.count:
            raise DataError(f"{path}:{lineno}: unknown region id {rid} (N={region_set.count})")
        if rid in seen:
            raise DataError(f"{path}:{lineno}: duplicate region id {rid}")
        seen.add(rid)
        values[rid] = _parse_float(row[1], f"{path}:{lineno}, column {name}")
    if len(seen) != region_set.count:
        missing = sorted(set(region_set.ids) - seen)[:5]
        raise DataError(f"{path}: no value for region ids {missing}")
    return Profile(values, indicator_name=name)


def save_profile_csv(profile: Profile, path) -> None:
    lines = [f"region_id,{profile.indicator_name}"]
    lines += [f"{i},{float(v)!r}" for i, v in enumerate(profile.values)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_profile_matrix_json(path, region_set: Optional[RegionSet] = None) -> ProfileMatrix:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: cannot parse profile matrix ({exc})") from exc
    if not isinstance(payload, dict) or "regions" not in payload or "profiles" not in payload:
        raise DataError(f"{path}: expected keys 'regions' and 'profiles'")
    n = payload["regions"]
    if region_set is None:
        region_set = RegionSet(int(n))
    elif n != region_set.count:
        raise DataError(f"{path}: file has {n} regions, expected {region_set.count}")
    profiles, tags = [], []
    for k, entry in enumerate(payload["profiles"]):
        vals = entry.get("values")
        if not isinstance(vals, list) or len(vals) != region_set.count:
            got = len(vals) if isinstance(vals, list) else type(vals).__name__
            raise DataError(f"{path}: profile {k} is ragged ({got} values, expected {region_set.count})")
        row = []
        for j, v in enumerate(vals):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                raise DataError(f"{path}: profile {k}, region {j}: invalid value {v!r}")
            row.append(float(v))
        profiles.append(Profile(row, indicator_name=str(entry.get("name", f"profile_{k}"))))
        tags.append(str(entry.get("tag", "synthetic")))
    return ProfileMatrix(profiles, tags, region_set)


def save_profile_matrix_json(matrix: ProfileMatrix, path) -> None:
    payload = {
        "regions": matrix.region_set.count,
        "profiles": [
            {"name": p.indicator_name, "tag": tag, "values": [float(v) for v in p.values]}
            for p, tag in zip(matrix.profiles, matrix.source_tags)
        ],
    }
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_profiles(path, region_set: RegionSet) -> ProfileMatrix:
    """Read a profile CSV (one profile) or a profile-matrix JSON file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if path.suffix.lower() == ".csv":
        return ProfileMatrix([load_profile_csv(path, region_set)], ["indicator"], region_set)
    return load_profile_matrix_json(path, region_set)


def save_reference_embeddings(ref: ReferenceEmbeddings, path) -> None:
    payload = {"source": ref.source, "matrix": ref.matrix.tolist()}
    Path(path).write_text(json.dumps(payload) + "\n", encoding="utf-8")


def load_reference_embeddings(path, region_set: Optional[RegionSet] = None) -> ReferenceEmbeddings:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        ref = ReferenceEmbeddings(np.asarray(payload["matrix"], dtype=np.float64), str(payload.get("source", "")))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: not a valid reference-embedding file ({exc})") from exc
    if region_set is not None and ref.shape[0] != region_set.count:
        raise DataError(f"{path}: {ref.shape[0]} embedding rows for {region_set.count} regions")
    return ref


# synthetic city ------------------------------------------------------------


def generate_synthetic_city(
    n_regions: int,
    n_profiles: int,
    latent_dim: int,
    noise_std: float,
    seed: int,
    n_indicators: int = 0,
    indicator_noise_std: Optional[float] = None,
):
    """Linear latent-factor city.

    Each region gets a latent vector (a row of ``Z``, columns centred) and
    each profile is ``Z @ w + noise`` followed by z-scoring. Because ``Z`` is
    centred, noiseless profiles stay exactly inside ``span(Z)`` after
    normalization. ``Z`` is returned as reference embeddings.

    ``n_indicators`` extra profiles tagged ``"indicator"`` are appended as
    held-out downstream tasks drawn from the same model, with their own
    noise level ``indicator_noise_std`` (defaults to ``noise_std``) so that
    tasks can be only partly explained by the region factors.
    """
    if n_regions < 2:
        raise ConfigError(f"n_regions must be >= 2, got {n_regions}")
    if not 0 < latent_dim < n_regions:
        raise ConfigError(f"latent_dim must be in [1, n_regions), got {latent_dim}")
    if indicator_noise_std is None:
        indicator_noise_std = noise_std
    if noise_std < 0 or indicator_noise_std < 0:
        raise ConfigError(f"noise levels must be >= 0, got {noise_std}, {indicator_noise_std}")
    if n_profiles < 0 or n_indicators < 0:
        raise ConfigError("profile counts must be non-negative")

    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((n_regions, latent_dim))
    latent -= latent.mean(axis=0)
    total = n_profiles + n_indicators
    loadings = rng.standard_normal((total, latent_dim))
    noise = rng.standard_normal((total, n_regions))
    noise[:n_profiles] *= noise_std
    noise[n_profiles:] *= indicator_noise_std
    raw = loadings @ latent.T + noise

    region_set = RegionSet(n_regions)
    profiles, tags = [], []
    for k in range(total):
        is_task = k >= n_profiles
        name = f"indicator_{k - n_profiles}" if is_task else f"synthetic_{k}"
        profiles.append(normalize(Profile(raw[k], indicator_name=name)))
        tags.append("indicator" if is_task else "synthetic")
    matrix = ProfileMatrix(profiles, tags, region_set)
    return matrix, ReferenceEmbeddings(latent, source="synthetic-latent")
