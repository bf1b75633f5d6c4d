"""Deterministic synthetic visible/infrared dataset.

Each identity owns a latent patch matrix. Visible observations are a fixed
linear mix of that latent plus noise. Infrared observations collapse the
first half of the coordinates ("appearance") onto a signature shared by the
identity's collision group while keeping the second half ("structure")
identity-specific, so identities inside one group are near-collisions in
infrared but distinct in visible. The visible:infrared sample ratio and a
training-set reduction tool model modality imbalance.

Retrieval direction is infrared -> visible: every query is infrared and the
gallery holds one visible sample per held-out identity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

FORMAT_TAG = "bit-synth-v1"

VIS = "vis"
IR = "ir"

TRAIN = "train"
QUERY = "query"
GALLERY = "gallery"

# fraction of identities assigned to the training split
TRAIN_ID_FRACTION = 0.8

# visible-domain mixing strength: 0 leaves latents untouched, 1 applies a
# full random rotation; intermediate values keep the modality gap learnable
# by a small shared encoder
VIS_MIX_BETA = 0.4

# amplitude of the identity-specific "structure" coordinate block relative
# to the group-shared "appearance" block
STRUCT_GAIN = 1.0

NUM_VIS_CAMERAS = 4
NUM_IR_CAMERAS = 2


class ConfigError(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


class DatasetVersionError(DatasetFormatError):
    pass


@dataclass(frozen=True)
class GenConfig:
    num_identities: int = 50
    vis_per_id: int = 8
    ir_per_id: int = 4
    num_patches: int = 8
    raw_dim: int = 16
    noise_sigma: float = 0.1
    collision_groups: int = 10
    seed: int = 0

    def validate(self) -> "GenConfig":
        if self.num_identities < 1:
            raise ConfigError("num_identities must be positive")
        if self.vis_per_id < 1 or self.ir_per_id < 1:
            raise ConfigError("samples per identity must be >= 1")
        if self.num_patches < 1 or self.raw_dim < 1:
            raise ConfigError("num_patches and raw_dim must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not 1 <= self.collision_groups <= self.num_identities:
            raise ConfigError(
                "collision_groups must lie in [1, num_identities], got "
                f"{self.collision_groups} for {self.num_identities} identities")
        return self

    def to_dict(self) -> dict:
        return {
            "num_identities": self.num_identities,
            "vis_per_id": self.vis_per_id,
            "ir_per_id": self.ir_per_id,
            "num_patches": self.num_patches,
            "raw_dim": self.raw_dim,
            "noise_sigma": self.noise_sigma,
            "collision_groups": self.collision_groups,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "GenConfig":
        known = set(GenConfig().to_dict())
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown gen config keys: {sorted(unknown)}")
        return GenConfig(**d).validate()


@dataclass
class SynthSample:
    identity: int
    modality: str
    patches: np.ndarray
    camera: int

    def __eq__(self, other):
        return (isinstance(other, SynthSample)
                and self.identity == other.identity
                and self.modality == other.modality
                and self.camera == other.camera
                and np.array_equal(self.patches, other.patches))


@dataclass
class Dataset:
    config: GenConfig
    samples: list[SynthSample] = field(default_factory=list)
    splits: list[str] = field(default_factory=list)

    def __eq__(self, other):
        return (isinstance(other, Dataset)
                and self.config == other.config
                and self.splits == other.splits
                and self.samples == other.samples)

    def indices(self, split=None, modality=None):
        out = []
        for i, (s, sp) in enumerate(zip(self.samples, self.splits)):
            if split is not None and sp != split:
                continue
            if modality is not None and s.modality != modality:
                continue
            out.append(i)
        return out

    def subset(self, split=None, modality=None) -> list[SynthSample]:
        return [self.samples[i] for i in self.indices(split, modality)]

    def train_identities(self) -> list[int]:
        return sorted({s.identity for s in self.subset(split=TRAIN)})

    def test_identities(self) -> list[int]:
        ids = {s.identity for s, sp in zip(self.samples, self.splits)
               if sp in (QUERY, GALLERY)}
        return sorted(ids)


def group_of(identity: int, cfg: GenConfig) -> int:
    """Contiguous-block group assignment (balanced partition)."""
    return identity * cfg.collision_groups // cfg.num_identities


def num_train_identities(cfg: GenConfig) -> int:
    n = cfg.num_identities
    return max(1, min(n - 1, round(TRAIN_ID_FRACTION * n))) if n > 1 else 1


def generate(cfg: GenConfig) -> Dataset:
    """Build the full dataset as a pure function of the config seed.

    Training identities contribute vis_per_id visible and ir_per_id infrared
    samples. Held-out identities contribute one visible sample (the gallery
    entry) and ir_per_id infrared query samples.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_app = cfg.raw_dim // 2

    # latent attribute matrix per identity: a global "appearance" vector
    # broadcast over all patches (clothing-level cue) plus per-patch
    # "structure" coordinates (body-geometry cue)
    appearance = rng.standard_normal((cfg.num_identities, n_app))
    structure = STRUCT_GAIN * rng.standard_normal(
        (cfg.num_identities, cfg.num_patches, cfg.raw_dim - n_app))
    latents = np.concatenate(
        [np.repeat(appearance[:, None, :], cfg.num_patches, axis=1),
         structure], axis=2)
    # group signature: the appearance vector shared by all identities of a
    # collision group in the infrared domain, also constant over patches
    signatures = rng.standard_normal((cfg.collision_groups, n_app))
    # fixed visible-domain mixing map, shared by every identity
    rotation = np.linalg.qr(rng.standard_normal((cfg.raw_dim, cfg.raw_dim)))[0]
    vis_mix = (1.0 - VIS_MIX_BETA) * np.eye(cfg.raw_dim) + VIS_MIX_BETA * rotation

    n_train = num_train_identities(cfg)
    ds = Dataset(config=cfg)
    for identity in range(cfg.num_identities):
        z = latents[identity]
        is_train = identity < n_train
        n_vis = cfg.vis_per_id if is_train else 1
        for s in range(n_vis):
            noise = rng.standard_normal(z.shape) * cfg.noise_sigma
            patches = z @ vis_mix + noise
            ds.samples.append(SynthSample(
                identity=identity, modality=VIS, patches=patches,
                camera=s % NUM_VIS_CAMERAS))
            ds.splits.append(TRAIN if is_train else GALLERY)
        ir_base = z.copy()
        ir_base[:, :n_app] = signatures[group_of(identity, cfg)]
        for s in range(cfg.ir_per_id):
            noise = rng.standard_normal(z.shape) * cfg.noise_sigma
            ds.samples.append(SynthSample(
                identity=identity, modality=IR, patches=ir_base + noise,
                camera=NUM_VIS_CAMERAS + s % NUM_IR_CAMERAS))
            ds.splits.append(TRAIN if is_train else QUERY)
    return ds


def reduce_modality(ds: Dataset, modality: str, fraction: float,
                    seed: int) -> Dataset:
    """Drop floor(fraction * count) training samples of one modality.

    Removal is a seeded uniform draw; candidates whose removal would leave
    their identity without any sample of the modality are passed over and
    redrawn from the remaining pool. Test splits are untouched.
    """
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"fraction must lie in [0, 1), got {fraction}")
    if modality not in (VIS, IR):
        raise ConfigError(f"unknown modality {modality!r}")
    candidates = ds.indices(split=TRAIN, modality=modality)
    n_remove = int(np.floor(fraction * len(candidates)))
    if n_remove == 0:
        return Dataset(config=ds.config, samples=list(ds.samples),
                       splits=list(ds.splits))

    remaining_per_id: dict[int, int] = {}
    for i in candidates:
        ident = ds.samples[i].identity
        remaining_per_id[ident] = remaining_per_id.get(ident, 0) + 1

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(candidates))
    removed: set[int] = set()
    for pos in order:
        if len(removed) == n_remove:
            break
        idx = candidates[pos]
        ident = ds.samples[idx].identity
        if remaining_per_id[ident] <= 1:
            continue
        remaining_per_id[ident] -= 1
        removed.add(idx)
    if len(removed) < n_remove:
        raise ConfigError(
            f"cannot remove {n_remove} {modality} samples without emptying "
            "an identity")

    out = Dataset(config=ds.config)
    for i, (s, sp) in enumerate(zip(ds.samples, ds.splits)):
        if i in removed:
            continue
        out.samples.append(s)
        out.splits.append(sp)
    return out


def sample_pk_batch(ds: Dataset, p: int, k: int, seed: int,
                    step: int) -> list[SynthSample]:
    """Draw p identities with k visible and k infrared samples each.

    Deterministic in (seed, step). Identities with fewer than k samples of
    a modality are sampled with replacement. Returns the visible block
    (identity-major) followed by the infrared block.
    """
    train_idx = ds.indices(split=TRAIN)
    if not train_idx:
        raise ValueError("train split is empty")
    by_id: dict[int, dict[str, list[int]]] = {}
    for i in train_idx:
        s = ds.samples[i]
        by_id.setdefault(s.identity, {VIS: [], IR: []})[s.modality].append(i)
    ids = sorted(ident for ident, mods in by_id.items()
                 if mods[VIS] and mods[IR])
    if not ids:
        raise ValueError("no identity has both modalities in the train split")

    rng = np.random.default_rng([seed, step])
    chosen = rng.choice(ids, size=p, replace=len(ids) < p)
    vis_block, ir_block = [], []
    for ident in chosen:
        for modality, block in ((VIS, vis_block), (IR, ir_block)):
            pool = by_id[ident][modality]
            picks = rng.choice(pool, size=k, replace=len(pool) < k)
            block.extend(ds.samples[i] for i in picks)
    return vis_block + ir_block


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def save(ds: Dataset, path: str):
    doc = {
        "format": FORMAT_TAG,
        "config": ds.config.to_dict(),
        "samples": [
            {
                "id": s.identity,
                "modality": s.modality,
                "split": sp,
                "camera": s.camera,
                "patches": s.patches.tolist(),
            }
            for s, sp in zip(ds.samples, ds.splits)
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load(path: str) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(
            f"malformed dataset file at byte {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "format" not in doc:
        raise DatasetFormatError("dataset file missing format tag")
    if doc["format"] != FORMAT_TAG:
        raise DatasetVersionError(
            f"unsupported dataset format {doc['format']!r}, "
            f"expected {FORMAT_TAG!r}")
    try:
        cfg = GenConfig.from_dict(doc["config"])
        ds = Dataset(config=cfg)
        for rec in doc["samples"]:
            patches = np.asarray(rec["patches"], dtype=np.float64)
            if patches.shape != (cfg.num_patches, cfg.raw_dim):
                raise DatasetFormatError(
                    f"sample patch shape {patches.shape} does not match "
                    f"config ({cfg.num_patches}, {cfg.raw_dim})")
            if rec["split"] not in (TRAIN, QUERY, GALLERY):
                raise DatasetFormatError(f"unknown split {rec['split']!r}")
            ds.samples.append(SynthSample(
                identity=int(rec["id"]), modality=rec["modality"],
                patches=patches, camera=int(rec["camera"])))
            ds.splits.append(rec["split"])
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"malformed dataset record: {exc}") from exc
    return ds
