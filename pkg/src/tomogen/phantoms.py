"""Synthetic chest-phantom volumes with analytically known abnormalities.

Volumes live on a (Z, H, W) voxel grid in Hounsfield units, clipped to
[-1000, +1000]. The background is a low-frequency noise texture in the
lung range inside an ellipsoidal body shell; abnormalities are additive
and their voxel support is recoverable in closed form, which gives every
generated record an exact oracle mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .util import HU_MAX, HU_MIN, array_hash, derive_seed

KINDS = ("nodule", "effusion", "central_mass")

IMPRESSION_PHRASES = {
    "nodule": "nodule",
    "effusion": "effusion",
    "central_mass": "central mass",
}
NO_FINDING_PHRASE = "no abnormality"
PROMPT_TEMPLATE = "{age} years old {sex}: {impression}"

# Background texture (HU) and body geometry in normalized [0,1]^3 coordinates.
LUNG_LO, LUNG_HI = -900.0, -600.0
SHELL_HU = -20.0
NOISE_LATTICE = (5, 7, 7)  # coarse noise nodes; fixed so renders are resolution-consistent
BODY_AXES = (0.55, 0.46, 0.46)  # ellipsoid semi-axes along (z, y, x)
INTERIOR_FRACTION = 0.86  # lung interior / body shell boundary
SOFT_EDGE = 0.3  # soft-edge width of nodule/central_mass ellipsoids


@dataclass
class Volume:
    """A 3-D scalar grid in HU with voxel metadata."""

    data: np.ndarray  # (Z, H, W) float32
    spacing: tuple[float, float, float] = (5.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"volume dims must be >= 1, got {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class AbnormalitySpec:
    """Procedural abnormality: kind, fractional placement, and HU offset."""

    kind: str
    center: tuple[float, float, float] = (0.5, 0.5, 0.5)
    size: float = 0.1
    intensity: float = 400.0

    def __post_init__(self):
        if self.kind not in KINDS and self.kind != "none":
            raise ValueError(f"unknown abnormality kind {self.kind!r}")
        if self.kind == "none":
            return
        if not all(0.0 <= c <= 1.0 for c in self.center):
            raise ValueError(f"center must lie in [0,1]^3, got {self.center}")
        if not 0.0 < self.size <= 0.5:
            raise ValueError(f"size must be in (0, 0.5], got {self.size}")


@dataclass(frozen=True)
class PromptRecord:
    """Structured prompt: age/sex metadata plus impression phrases."""

    age: int
    sex: str
    impressions: tuple[str, ...]
    rendered: str

    @staticmethod
    def build(age: int, sex: str, kinds: Sequence[str]) -> "PromptRecord":
        if not 1 <= age <= 120:
            raise ValueError(f"age must be in [1, 120], got {age}")
        if sex not in ("male", "female"):
            raise ValueError(f"sex must be 'male' or 'female', got {sex!r}")
        present = [k for k in KINDS if k in kinds]
        phrases = tuple(IMPRESSION_PHRASES[k] for k in present) or (NO_FINDING_PHRASE,)
        rendered = PROMPT_TEMPLATE.format(age=age, sex=sex, impression=". ".join(phrases))
        return PromptRecord(age=age, sex=sex, impressions=phrases, rendered=rendered)


def clip_hu(volume: Volume) -> Volume:
    """Clamp every voxel to the practical HU range [-1000, +1000]."""
    return Volume(np.clip(volume.data, HU_MIN, HU_MAX), volume.spacing, volume.id)


def apply_window(volume: Volume, lo: float, hi: float) -> Volume:
    """Linear window map with clipping: (clip(v, lo, hi) - lo) / (hi - lo)."""
    if lo >= hi:
        raise ValueError(f"window requires lo < hi, got [{lo}, {hi}]")
    data = (np.clip(volume.data, lo, hi) - lo) / (hi - lo)
    return Volume(data.astype(np.float32), volume.spacing, volume.id)


def _normalized_coords(shape):
    z, y, x = (np.arange(n, dtype=np.float64) for n in shape)
    uz = (z + 0.5) / shape[0]
    uy = (y + 0.5) / shape[1]
    ux = (x + 0.5) / shape[2]
    return uz[:, None, None], uy[None, :, None], ux[None, None, :]


def _body_radius(shape):
    uz, uy, ux = _normalized_coords(shape)
    az, ay, ax = BODY_AXES
    return np.sqrt(
        ((uz - 0.5) / az) ** 2 + ((uy - 0.5) / ay) ** 2 + ((ux - 0.5) / ax) ** 2
    )


def _lung_interior(shape) -> np.ndarray:
    return _body_radius(shape) <= INTERIOR_FRACTION


def _background(shape, rng: np.random.Generator) -> np.ndarray:
    lattice = rng.uniform(LUNG_LO, LUNG_HI, size=NOISE_LATTICE)
    uz, uy, ux = _normalized_coords(shape)
    coords = np.stack(
        np.broadcast_arrays(
            uz * (NOISE_LATTICE[0] - 1),
            uy * (NOISE_LATTICE[1] - 1),
            ux * (NOISE_LATTICE[2] - 1),
        )
    )
    lung = map_coordinates(lattice, coords, order=1, mode="nearest")
    rho = _body_radius(shape)
    vol = np.full(shape, HU_MIN, dtype=np.float64)
    vol[rho <= 1.0] = SHELL_HU
    interior = rho <= INTERIOR_FRACTION
    vol[interior] = lung[interior]
    return vol


def _ellipsoid_field(spec: AbnormalitySpec, shape):
    """Soft-edged ellipsoid weight in [0,1] and its exact support mask."""
    uz, uy, ux = _normalized_coords(shape)
    cz, cy, cx = spec.center
    rho = np.sqrt(
        ((uz - cz) / spec.size) ** 2
        + ((uy - cy) / spec.size) ** 2
        + ((ux - cx) / spec.size) ** 2
    )
    w = np.zeros(shape, dtype=np.float64)
    core = rho <= 1.0 - SOFT_EDGE
    edge = (rho > 1.0 - SOFT_EDGE) & (rho < 1.0)
    w[core] = 1.0
    w[edge] = 0.5 * (1.0 + np.cos(np.pi * (rho[edge] - (1.0 - SOFT_EDGE)) / SOFT_EDGE))
    return w, rho < 1.0


def _effusion_field(spec: AbnormalitySpec, shape):
    """Horizontal fluid layer filling the bottom `size` fraction of the lung."""
    uz, uy, ux = _normalized_coords(shape)
    del uz, ux
    layer = np.broadcast_to(uy >= 1.0 - spec.size, shape)
    mask = layer & _lung_interior(shape)
    return mask.astype(np.float64), mask


def abnormality_field(spec: AbnormalitySpec, shape):
    """Additive weight field (scaled by spec.intensity) and oracle support mask."""
    if spec.kind == "none":
        zeros = np.zeros(shape, dtype=np.float64)
        return zeros, zeros.astype(bool)
    if spec.kind == "effusion":
        return _effusion_field(spec, shape)
    return _ellipsoid_field(spec, shape)


def _validate_shape(shape):
    if len(shape) != 3:
        raise ValueError(f"shape must be (Z, H, W), got {shape}")
    names = ("Z", "H", "W")
    for name, dim in zip(names, shape):
        if int(dim) != dim or dim < 8:
            raise ValueError(f"shape dimension {name}={dim} must be an integer >= 8")
    return tuple(int(d) for d in shape)


def make_phantom(
    specs: Sequence[AbnormalitySpec],
    shape: tuple[int, int, int],
    seed: int,
    spacing: tuple[float, float, float] = (5.0, 1.0, 1.0),
) -> tuple[Volume, PromptRecord, list[np.ndarray]]:
    """Render a phantom volume, its prompt, and per-abnormality oracle masks.

    Deterministic given ``seed``. Raises on invalid shapes and on spec pairs
    whose supports overlap by more than 50% of either one's volume.
    """
    shape = _validate_shape(shape)
    specs = [s for s in specs if s.kind != "none"]

    fields = [abnormality_field(s, shape) for s in specs]
    masks = [m for _, m in fields]
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            inter = np.count_nonzero(masks[i] & masks[j])
            lim = 0.5 * min(np.count_nonzero(masks[i]), np.count_nonzero(masks[j]))
            if inter > lim:
                raise ValueError(
                    f"abnormality specs {i} and {j} overlap beyond 50% of a spec's volume"
                )

    rng = np.random.default_rng(seed)
    vol = _background(shape, rng)
    for spec, (w, _) in zip(specs, fields):
        vol += spec.intensity * w

    age = int(rng.integers(18, 91))
    sex = "male" if rng.integers(0, 2) == 0 else "female"
    prompt = PromptRecord.build(age, sex, [s.kind for s in specs])

    vol = np.clip(vol, HU_MIN, HU_MAX).astype(np.float32)
    vid = f"phantom-{seed & 0xFFFFFFFF:08x}"
    return Volume(vol, spacing, vid), prompt, masks


def sample_record_specs(
    rng: np.random.Generator,
    label_vocab: Sequence[str],
    prevalence: float = 0.35,
) -> list[AbnormalitySpec]:
    """Draw a non-overlapping abnormality set; each label present w.p. `prevalence`."""
    present = [k for k in label_vocab if rng.random() < prevalence]
    specs: list[AbnormalitySpec] = []
    if "central_mass" in present:
        specs.append(
            AbnormalitySpec(
                kind="central_mass",
                center=(
                    0.5 + rng.uniform(-0.05, 0.05),
                    0.42 + rng.uniform(-0.05, 0.05),
                    0.5 + rng.uniform(-0.05, 0.05),
                ),
                size=rng.uniform(0.18, 0.26),
                intensity=rng.uniform(300.0, 500.0),
            )
        )
    if "nodule" in present:
        for _ in range(64):
            side = 1.0 if rng.random() < 0.5 else -1.0
            cand = AbnormalitySpec(
                kind="nodule",
                center=(
                    rng.uniform(0.3, 0.7),
                    rng.uniform(0.25, 0.5),
                    0.5 + side * rng.uniform(0.18, 0.3),
                ),
                size=rng.uniform(0.09, 0.15),
                intensity=rng.uniform(350.0, 550.0),
            )
            if not specs or _overlap_fraction(cand, specs[0]) < 0.4:
                specs.append(cand)
                break
        else:  # pragma: no cover - extremely unlikely with the ranges above
            raise RuntimeError("failed to place a non-overlapping nodule")
    if "effusion" in present:
        specs.append(
            AbnormalitySpec(
                kind="effusion",
                center=(0.5, 1.0, 0.5),
                size=rng.uniform(0.12, 0.2),
                intensity=rng.uniform(600.0, 800.0),
            )
        )
    return specs


def _overlap_fraction(a: AbnormalitySpec, b: AbnormalitySpec) -> float:
    """Ellipsoid support overlap on a coarse lattice, relative to the smaller one.

    Kept comfortably below the 50% render precondition (the sampler accepts
    under 0.4) so lattice discretization cannot flip a pair into rejection.
    """
    grid = (np.arange(32) + 0.5) / 32
    zz, yy, xx = np.meshgrid(grid, grid, grid, indexing="ij")

    def support(spec):
        rho2 = (
            ((zz - spec.center[0]) / spec.size) ** 2
            + ((yy - spec.center[1]) / spec.size) ** 2
            + ((xx - spec.center[2]) / spec.size) ** 2
        )
        return rho2 < 1.0

    ma, mb = support(a), support(b)
    smaller = min(np.count_nonzero(ma), np.count_nonzero(mb))
    if smaller == 0:
        return 0.0
    return np.count_nonzero(ma & mb) / smaller


# ---------------------------------------------------------------------------
# Volume files and dataset manifests
# ---------------------------------------------------------------------------


def save_volume(vol: Volume, raw_path: Path, meta_path: Path) -> None:
    """Write little-endian f32 raw buffer (Z-major, row-major) plus JSON sidecar."""
    raw_path = Path(raw_path)
    data = np.ascontiguousarray(vol.data, dtype="<f4")
    raw_path.write_bytes(data.tobytes())
    meta = {
        "id": vol.id,
        "shape": list(vol.shape),
        "spacing": list(vol.spacing),
        "hu_range": [HU_MIN, HU_MAX],
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_volume(raw_path: Path, meta_path: Path | None = None) -> Volume:
    raw_path = Path(raw_path)
    if meta_path is None:
        meta_path = raw_path.with_suffix(".json")
    try:
        meta = json.loads(Path(meta_path).read_text())
        buf = raw_path.read_bytes()
    except OSError as e:
        raise OSError(f"failed reading volume at {raw_path}: {e}") from e
    shape = tuple(meta["shape"])
    data = np.frombuffer(buf, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(
            f"{raw_path}: raw buffer holds {data.size} voxels, sidecar says {shape}"
        )
    return Volume(data.reshape(shape).copy(), tuple(meta["spacing"]), meta["id"])


@dataclass
class DatasetRecord:
    id: str
    split: str
    labels: tuple[str, ...]
    prompt: str
    volume_file: str
    meta_file: str


@dataclass
class PhantomDataset:
    """Reader over a built dataset directory."""

    root: Path
    manifest: dict = field(repr=False)
    records: list[DatasetRecord] = field(repr=False)

    @staticmethod
    def open(root: Path) -> "PhantomDataset":
        root = Path(root)
        manifest = json.loads((root / "manifest.json").read_text())
        records = [DatasetRecord(**r) for r in manifest["records"]]
        return PhantomDataset(root=root, manifest=manifest, records=records)

    @property
    def label_vocab(self) -> list[str]:
        return list(self.manifest["label_vocab"])

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.manifest["shape"])

    def split(self, name: str) -> list[DatasetRecord]:
        return [r for r in self.records if r.split == name]

    def volume(self, rec: DatasetRecord) -> Volume:
        return load_volume(self.root / rec.volume_file, self.root / rec.meta_file)

    def label_matrix(self, recs: Sequence[DatasetRecord]) -> np.ndarray:
        vocab = self.label_vocab
        out = np.zeros((len(recs), len(vocab)), dtype=np.float32)
        for i, r in enumerate(recs):
            for k in r.labels:
                out[i, vocab.index(k)] = 1.0
        return out

    def manifest_hash(self) -> str:
        return array_hash(np.frombuffer((self.root / "manifest.json").read_bytes(), np.uint8))


def build_dataset(
    out_dir: Path,
    n_train: int,
    n_test: int,
    shape: tuple[int, int, int],
    label_vocab: Sequence[str] = KINDS,
    seed: int = 0,
    prevalence: float = 0.35,
    exclude_label_sets: Sequence[Sequence[str]] = (),
    spacing: tuple[float, float, float] = (5.0, 1.0, 1.0),
) -> PhantomDataset:
    """Generate and persist a train/test phantom dataset with an index manifest.

    Train/test records use disjoint id namespaces. ``exclude_label_sets``
    drops exact label combinations from *training* records (resampled), which
    supports held-out-prompt experiments. Rebuilding with the same arguments
    produces a byte-identical manifest.
    """
    if n_train < 1 or n_test < 1:
        raise ValueError(f"need n_train, n_test >= 1, got {n_train}, {n_test}")
    shape = _validate_shape(shape)
    for k in label_vocab:
        if k not in KINDS:
            raise ValueError(f"unknown label {k!r}; known: {KINDS}")
    excluded = {tuple(sorted(s)) for s in exclude_label_sets}

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out_dir}: {e}") from e

    records = []
    counts = {k: 0 for k in label_vocab}
    for split, n in (("train", n_train), ("test", n_test)):
        for i in range(n):
            rng = np.random.default_rng(derive_seed(seed, split, i, "specs"))
            for attempt in range(256):
                specs = sample_record_specs(rng, label_vocab, prevalence)
                labels = tuple(sorted(s.kind for s in specs))
                if split == "train" and labels in excluded:
                    continue
                break
            else:
                raise RuntimeError(
                    f"could not sample labels outside excluded sets for {split}-{i}"
                )
            vol, prompt, _ = make_phantom(
                specs, shape, derive_seed(seed, split, i, "vol"), spacing
            )
            rec_id = f"{split}-{i:04d}"
            vol.id = rec_id
            raw_name, meta_name = f"{rec_id}.raw", f"{rec_id}.json"
            try:
                save_volume(vol, out_dir / raw_name, out_dir / meta_name)
            except OSError as e:
                raise OSError(f"failed writing record {rec_id} under {out_dir}: {e}") from e
            for k in labels:
                counts[k] += 1
            records.append(
                DatasetRecord(
                    id=rec_id,
                    split=split,
                    labels=labels,
                    prompt=prompt.rendered,
                    volume_file=raw_name,
                    meta_file=meta_name,
                )
            )

    total = n_train + n_test
    manifest = {
        "shape": list(shape),
        "spacing": list(spacing),
        "label_vocab": list(label_vocab),
        "seed": seed,
        "prevalence": prevalence,
        "excluded_label_sets": sorted(list(s) for s in excluded),
        "n_train": n_train,
        "n_test": n_test,
        "label_frequencies": {k: counts[k] / total for k in label_vocab},
        "records": [vars(r) for r in records],
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )
    return PhantomDataset.open(out_dir)
