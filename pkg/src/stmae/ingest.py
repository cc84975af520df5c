"""Time-series ingestion: CSV IO, synthetic datasets, CV splits, segment sampling.

File formats
------------
Time series: headerless CSV, one row per ROI, one comma-separated column per
timepoint, '.' as decimal radix, '\\n' line endings. Floats are written with
``repr`` so a save/load round trip is byte-identical.

Manifest: JSON lines, one subject per line with fields ``subject_id``,
``path`` (relative to the manifest file) and ``labels`` (object with optional
keys ``class`` in {0, 1} and ``target`` a float).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

DEFAULT_WINDOW = 50


@dataclass
class RoiTimeSeries:
    """One subject's ROI x time signal matrix."""

    subject_id: str
    P: np.ndarray  # (N, T_max) float64

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        if self.P.ndim != 2:
            raise DataFormatError(f"{self.subject_id}: expected 2-D matrix, got {self.P.ndim}-D")
        if self.N < 2 or self.T_max < 2:
            raise DataFormatError(
                f"{self.subject_id}: need at least 2 ROIs and 2 timepoints, got {self.P.shape}"
            )
        if not np.isfinite(self.P).all():
            raise DataFormatError(f"{self.subject_id}: non-finite entries in time series")

    @property
    def N(self) -> int:
        return self.P.shape[0]

    @property
    def T_max(self) -> int:
        return self.P.shape[1]


@dataclass
class ManifestEntry:
    subject_id: str
    path: str
    labels: dict = field(default_factory=dict)


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")  # directory manifest paths are relative to

    def __post_init__(self):
        ids = [e.subject_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataFormatError(f"duplicate subject_ids in manifest: {dupes}")

    def __len__(self) -> int:
        return len(self.entries)

    def subject_ids(self) -> list[str]:
        return [e.subject_id for e in self.entries]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else Path(self.root) / p

    def load_series(self, entry: ManifestEntry) -> RoiTimeSeries:
        ts = load_timeseries(self.resolve(entry))
        return RoiTimeSeries(entry.subject_id, ts.P)


@dataclass
class FoldSplit:
    """Partition of subjects into k folds; fold index of each subject."""

    k: int
    assignments: dict[str, int]

    def test_ids(self, fold: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [s for s, f in self.assignments.items() if f != fold]


def _format_float(v: float) -> str:
    return repr(float(v))


def load_timeseries(path: str | Path, subject_id: str | None = None) -> RoiTimeSeries:
    """Parse a headerless CSV into a RoiTimeSeries.

    Raises DataFormatError naming the offending row (and column for parse
    failures); row/column positions are 1-based.
    """
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"time-series file not found: {path}")
    rows: list[list[float]] = []
    width = None
    with open(path, "r", encoding="ascii") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line == "" and width is not None:
                continue  # trailing blank line
            cells = line.split(",")
            if width is None:
                width = len(cells)
            elif len(cells) != width:
                raise DataFormatError(
                    f"{path}: row {i} has {len(cells)} columns, expected {width}"
                )
            parsed = []
            for j, cell in enumerate(cells, start=1):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise DataFormatError(
                        f"{path}: non-numeric cell at row {i}, column {j}: {cell!r}"
                    ) from None
            rows.append(parsed)
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    return RoiTimeSeries(subject_id or path.stem, np.array(rows, dtype=np.float64))


def save_timeseries(ts: RoiTimeSeries, path: str | Path) -> None:
    """Write the canonical CSV form (repr floats, '\\n' endings)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for row in ts.P:
            fh.write(",".join(_format_float(v) for v in row))
            fh.write("\n")


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"manifest not found: {path}")
    entries = []
    with open(path, "r", encoding="ascii") as fh:
        for i, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}: bad JSON on line {i}: {exc}") from None
            for key in ("subject_id", "path"):
                if key not in obj:
                    raise DataFormatError(f"{path}: line {i} missing field {key!r}")
            entries.append(ManifestEntry(obj["subject_id"], obj["path"], obj.get("labels", {})))
    manifest = DatasetManifest(entries, root=path.parent)
    missing = [e.subject_id for e in entries if not manifest.resolve(e).exists()]
    if missing:
        raise DataFormatError(f"{path}: unresolvable series paths for subjects {missing}")
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(
                {"subject_id": e.subject_id, "path": e.path, "labels": e.labels},
                sort_keys=True,
            ))
            fh.write("\n")


@dataclass
class SynthSpec:
    """Knobs for the synthetic community-coupled signal generator.

    Each community c carries a latent signal s_c(t), a moving average (width
    ``ma_width``) of unit Gaussian noise. ROI i in community c emits

        p_i(t) = s_c(t) + class_contrast * y * s_a(t) + beta * s_b(t) + noise_sigma * n_i(t)

    where y in {0, 1} is the class label, beta ~ U[0, 1] is the per-subject
    regression target, and a/b are two distinct partner communities
    (a = c XOR 1, b = (c + 2) mod C). Class information lives only in the
    c<->a coupling, so ``class_contrast = 0`` makes labels uninformative while
    the regression channel stays intact. Consecutive subjects (one per class)
    share a beta draw, so class-conditional beta distributions match exactly
    and class comparisons are not confounded by the regression channel.
    """

    n_communities: int = 4
    ma_width: int = 5
    class_contrast: float = 0.6
    noise_sigma: float = 0.5

    def __post_init__(self):
        if self.n_communities < 2:
            raise ConfigError("need at least 2 communities for cross-community coupling")
        if self.ma_width < 1:
            raise ConfigError("ma_width must be >= 1")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    kernel = np.ones(width) / width
    return np.convolve(x, kernel, mode="valid")


def _class_partner(c: int, n_communities: int) -> int:
    a = c ^ 1
    return a if a < n_communities else (c + 1) % n_communities


def _reg_partner(c: int, n_communities: int) -> int:
    return (c + 2) % n_communities


def synth_subject(n_rois: int, n_timepoints: int, y: int, beta: float,
                  spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Generate one subject's (n_rois, n_timepoints) signal matrix."""
    C = spec.n_communities
    latents = np.stack([
        _moving_average(rng.standard_normal(n_timepoints + spec.ma_width - 1), spec.ma_width)
        for _ in range(C)
    ])
    communities = np.arange(n_rois) % C
    P = np.empty((n_rois, n_timepoints))
    for i, c in enumerate(communities):
        P[i] = (
            latents[c]
            + spec.class_contrast * y * latents[_class_partner(c, C)]
            + beta * latents[_reg_partner(c, C)]
            + spec.noise_sigma * rng.standard_normal(n_timepoints)
        )
    return P


def synth_dataset(n_subjects: int, n_rois: int, n_timepoints: int, seed: int,
                  spec: SynthSpec | None = None, out_dir: str | Path = ".") -> DatasetManifest:
    """Generate a labeled synthetic dataset on disk and return its manifest.

    Output is a pure function of (seed, spec): repeated calls produce
    bit-identical files. Classes alternate by subject index, so the split is
    balanced to within one subject.
    """
    spec = spec or SynthSpec()
    if n_subjects < 2:
        raise ConfigError("n_subjects must be >= 2")
    if n_rois < 4:
        raise ConfigError("n_rois must be >= 4")
    if n_timepoints < 2 * DEFAULT_WINDOW:
        raise ConfigError(f"n_timepoints must be >= {2 * DEFAULT_WINDOW}")
    if spec.n_communities > n_rois:
        raise ConfigError(f"community count {spec.n_communities} exceeds n_rois {n_rois}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    entries = []
    for s in range(n_subjects):
        rng = np.random.default_rng((seed, s))
        y = s % 2
        # beta shared within each (class-0, class-1) pair: common random numbers
        beta = float(np.random.default_rng((seed, 1_000_003, s // 2)).uniform(0.0, 1.0))
        P = synth_subject(n_rois, n_timepoints, y, beta, spec, rng)
        subject_id = f"sub-{s:04d}"
        fname = f"{subject_id}.csv"
        save_timeseries(RoiTimeSeries(subject_id, P), out_dir / fname)
        entries.append(ManifestEntry(subject_id, fname, {"class": y, "target": beta}))
    manifest = DatasetManifest(entries, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest


def split_folds(manifest: DatasetManifest, k: int, seed: int) -> FoldSplit:
    """Stratified k-fold assignment, deterministic in the seed.

    Stratifies on the ``class`` label when every subject has one; per-fold
    class counts then differ from an even split by at most one subject.
    """
    if k < 2:
        raise ConfigError("k must be >= 2")
    if k > len(manifest):
        raise ConfigError(f"k={k} exceeds number of subjects {len(manifest)}")
    rng = np.random.default_rng(seed)
    stratify = all("class" in e.labels for e in manifest.entries)
    groups: dict[object, list[str]] = {}
    for e in manifest.entries:
        key = e.labels["class"] if stratify else 0
        groups.setdefault(key, []).append(e.subject_id)
    assignments: dict[str, int] = {}
    for key in sorted(groups, key=str):
        ids = groups[key]
        order = rng.permutation(len(ids))
        for pos, idx in enumerate(order):
            assignments[ids[idx]] = pos % k
    return FoldSplit(k, assignments)


def sample_segment(ts: RoiTimeSeries, length: int,
                   rng: np.random.Generator) -> tuple[RoiTimeSeries, int]:
    """Sample a random contiguous segment of ``length`` timepoints.

    Returns the slice and its start offset s, with s uniform over all valid
    positions. The slice equals ``ts.P[:, s:s+length]``.
    """
    if length > ts.T_max:
        raise ConfigError(
            f"segment length {length} exceeds series length {ts.T_max} for "
            f"{ts.subject_id}; pad the series or skip the subject"
        )
    if length < 2:
        raise ConfigError("segment length must be >= 2")
    s = int(rng.integers(0, ts.T_max - length + 1))
    return RoiTimeSeries(ts.subject_id, ts.P[:, s:s + length].copy()), s
