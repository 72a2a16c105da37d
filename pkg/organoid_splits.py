"""
Organoid Dataset Splits
Pretext / main / evaluation partition stratified by source, nested pretext fractions and
label budgets, and k-fold cross-validation folds; all drawn from seeded permutations
"""

import hashlib
import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field, model_validator

from organoid_config import atomic_write_text
from organoid_errors import (
    BudgetTooLarge,
    EmptyDataset,
    FractionOutOfRange,
    MissingFile,
    OrganoidValidationError,
    TooFewItems,
    UnknownScenario,
    ValidatedModel,
)
from organoid_imaging import CropInfo, parse_crop_id

logger = logging.getLogger(__name__)

SPLITS = ("pretext", "main", "evaluation")
PRETEXT_FRACTIONS = (0.1, 0.5, 1.0)
LABEL_BUDGETS = tuple(range(200, 1001, 100))
SUPERVISED_FRACTIONS = tuple(round(0.1 * step, 1) for step in range(1, 11))
PRETEXT_TRAIN_SHARE = 0.8
MINIMAL_LABELS = 114

# stream ids, so the three permutations of one seed are independent
_PRETEXT_STREAM = 1
_MAIN_STREAM = 2
_FOLD_STREAM = 3


class ManifestEntry(CropInfo):
    """One crop's provenance plus where it is used"""
    split: Literal["pretext", "main", "evaluation"] = Field(description="Partition the crop belongs to")
    fold: Optional[int] = Field(default=None, ge=0, description="Cross-validation fold, main-task subset only")


class DatasetManifest(ValidatedModel):
    """Every crop with its split; the single source of truth for train and evaluate"""
    entries: List[ManifestEntry] = Field(description="Crops ordered by crop id")
    seed: int = Field(default=26, description="Seed the permutations were drawn from")
    created_from: str = Field(description="Hash of the settings that produced the manifest")

    @model_validator(mode="after")
    def _check_hygiene(self):
        seen, base_split = set(), {}
        for entry in self.entries:
            if entry.crop_id in seen:
                raise OrganoidValidationError(f"crop '{entry.crop_id}' listed twice")
            seen.add(entry.crop_id)
            # rotations of one window must never straddle splits
            if base_split.setdefault(entry.base_id, entry.split) != entry.split:
                raise OrganoidValidationError(
                    f"window '{entry.base_id}' appears in both {base_split[entry.base_id]} and {entry.split}"
                )
        return self

    def by_id(self) -> Dict[str, ManifestEntry]:
        return {entry.crop_id: entry for entry in self.entries}

    def counts(self) -> Dict[str, int]:
        counts = {split: 0 for split in SPLITS}
        for entry in self.entries:
            counts[entry.split] += 1
        return counts


class PretextSubset(ValidatedModel):
    train: List[str] = Field(description="Pretext-train crop ids")
    validate_ids: List[str] = Field(description="Pretext-validate crop ids (checkpoint selection)")

    @property
    def ids(self) -> List[str]:
        return self.train + self.validate_ids


class ScenarioConfig(ValidatedModel):
    """One of the four experiment cases, with the value that varies along its axis"""
    scenario: Literal[
        "S1_pretext_fractions", "S2_small_labels", "S3_200_to_1000", "S4_supervised_fractions"
    ] = Field(description="Experiment case")
    pretext_fraction: Optional[float] = Field(default=None, description="Share of the pretext split (SSL runs)")
    label_budget: Optional[int] = Field(default=None, description="Labelled training images for the main task")
    supervised_fraction: Optional[float] = Field(default=None, description="Share of the main split (S4)")

    @model_validator(mode="after")
    def _check_axis(self):
        if self.pretext_fraction is not None and self.pretext_fraction not in PRETEXT_FRACTIONS:
            raise OrganoidValidationError(f"pretext fraction must be one of {PRETEXT_FRACTIONS}")
        if self.scenario == "S3_200_to_1000" and self.label_budget is not None \
                and self.label_budget not in LABEL_BUDGETS:
            raise OrganoidValidationError(f"S3 label budget {self.label_budget} not in 200..1000 step 100")
        if self.scenario == "S4_supervised_fractions" and self.supervised_fraction is not None \
                and round(self.supervised_fraction, 6) not in SUPERVISED_FRACTIONS:
            raise OrganoidValidationError(f"S4 fraction {self.supervised_fraction} not in 0.1..1.0 step 0.1")
        return self

    @classmethod
    def for_case(cls, case: int) -> "ScenarioConfig":
        names = {
            1: "S1_pretext_fractions",
            2: "S2_small_labels",
            3: "S3_200_to_1000",
            4: "S4_supervised_fractions",
        }
        if case not in names:
            raise UnknownScenario(f"scenario case must be 1-4, got {case}")
        return cls(scenario=names[case])

    @property
    def case(self) -> int:
        return int(self.scenario[1])


def config_hash(settings: dict) -> str:
    canonical = json.dumps(settings, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def _split_sizes(n: int, pretext_share: float, main_share: float) -> Tuple[int, int, int]:
    n_pretext = math.floor(pretext_share * n + 0.5)
    n_main = min(math.floor(main_share * n + 0.5), n - n_pretext)
    return n_pretext, n_main, n - n_pretext - n_main


def make_splits(
    crops: Sequence[CropInfo],
    seed: int = 26,
    pretext_share: float = 0.4,
    main_share: float = 0.4,
) -> DatasetManifest:
    """Shuffle each source's base windows and deal them 40/40/20; rotations follow their window"""
    if not crops:
        raise EmptyDataset("no crops to split; the crop store is empty")
    if pretext_share < 0 or main_share < 0 or pretext_share + main_share > 1:
        raise FractionOutOfRange(f"split shares {pretext_share}/{main_share} do not fit in 1")

    windows: Dict[str, set] = defaultdict(set)
    for crop in crops:
        windows[crop.source_id].add(crop.base_id)

    rng = np.random.default_rng(seed)
    assignment: Dict[str, str] = {}
    for source_id in sorted(windows):
        base_ids = sorted(windows[source_id])
        order = [base_ids[i] for i in rng.permutation(len(base_ids))]
        n_pretext, n_main, n_eval = _split_sizes(len(order), pretext_share, main_share)
        for position, base_id in enumerate(order):
            if position < n_pretext:
                assignment[base_id] = "pretext"
            elif position < n_pretext + n_main:
                assignment[base_id] = "main"
            else:
                assignment[base_id] = "evaluation"
        logger.debug("Source %s: %d windows -> %d/%d/%d", source_id, len(order), n_pretext, n_main, n_eval)

    entries = sorted(
        (ManifestEntry(**crop.info().model_dump(), split=assignment[crop.base_id]) for crop in crops),
        key=lambda entry: entry.crop_id,
    )
    settings = {"seed": seed, "pretext_share": pretext_share, "main_share": main_share,
                "crops": len(entries), "sources": sorted(windows)}
    manifest = DatasetManifest(entries=entries, seed=seed, created_from=config_hash(settings))
    logger.info("Split %d crops from %d sources: %s", len(entries), len(windows), manifest.counts())
    return manifest


def split_ids(manifest: DatasetManifest, split: str) -> List[str]:
    if split not in SPLITS:
        raise OrganoidValidationError(f"unknown split '{split}'; expected one of {SPLITS}")
    return [entry.crop_id for entry in manifest.entries if entry.split == split]


def _permuted(manifest: DatasetManifest, split: str, stream: int) -> List[str]:
    ids = split_ids(manifest, split)
    return [ids[i] for i in _rng(manifest.seed, stream).permutation(len(ids))]


def pretext_subset(manifest: DatasetManifest, fraction: float) -> PretextSubset:
    """Prefix of a fixed permutation of the pretext split, cut 80/20 into train/validate"""
    if not 0.0 < fraction <= 1.0:
        raise FractionOutOfRange(f"pretext fraction must lie in (0,1], got {fraction}")
    order = _permuted(manifest, "pretext", _PRETEXT_STREAM)
    n = math.floor(fraction * len(order))
    if n < 2:
        raise TooFewItems(f"{fraction:g} of {len(order)} pretext crops leaves {n}; need at least 2")
    n_train = math.floor(PRETEXT_TRAIN_SHARE * n)
    return PretextSubset(train=order[:n_train], validate_ids=order[n_train:n])


def main_permutation(manifest: DatasetManifest) -> List[str]:
    """The one ordering of the main split all budgets and fractions are prefixes of"""
    return _permuted(manifest, "main", _MAIN_STREAM)


def label_budget_subset(manifest: DatasetManifest, n: int) -> List[str]:
    order = main_permutation(manifest)
    if n < 1 or n > len(order):
        raise BudgetTooLarge(f"label budget {n} exceeds the main split ({len(order)} crops)")
    return order[:n]


def supervised_fraction_subset(manifest: DatasetManifest, fraction: float) -> List[str]:
    if not 0.0 < fraction <= 1.0:
        raise FractionOutOfRange(f"supervised fraction must lie in (0,1], got {fraction}")
    order = main_permutation(manifest)
    n = math.floor(fraction * len(order) + 1e-9)
    if n < 1:
        raise TooFewItems(f"{fraction:g} of {len(order)} main crops is empty")
    return order[:n]


def _window_of(crop_id: str) -> str:
    try:
        return parse_crop_id(crop_id)[0]
    except OrganoidValidationError:
        return crop_id


def make_folds(ids: Sequence[str], k: int = 5, seed: int = 26) -> List[List[str]]:
    """Seeded shuffle cut into k contiguous folds; the first len % k folds get one extra id.

    Rotations of one base window always land in the same fold, so fold sizes are only
    near-equal when the ids carry rotations.
    """
    if k < 2:
        raise TooFewItems(f"k-fold needs k >= 2, got {k}")
    groups: Dict[str, List[str]] = {}
    for crop_id in ids:
        groups.setdefault(_window_of(crop_id), []).append(crop_id)
    if len(groups) < k:
        raise TooFewItems(f"{len(ids)} ids from {len(groups)} windows cannot fill {k} folds")
    members = list(groups.values())
    shuffled = [members[i] for i in _rng(seed, _FOLD_STREAM).permutation(len(members))]
    size, extra = divmod(len(ids), k)
    targets = [size + (1 if index < extra else 0) for index in range(k)]
    folds: List[List[str]] = [[]]
    for position, group in enumerate(shuffled):
        index = len(folds) - 1
        remaining = len(shuffled) - position
        if folds[index] and index < k - 1 and (len(folds[index]) >= targets[index] or remaining == k - 1 - index):
            folds.append([])
        folds[-1].extend(group)
    return folds


def fold_partition(folds: Sequence[Sequence[str]], index: int) -> Tuple[List[str], List[str]]:
    """(training ids, validation ids) for fold `index`"""
    if not 0 <= index < len(folds):
        raise OrganoidValidationError(f"fold {index} outside 0..{len(folds) - 1}")
    train = [crop_id for i, fold in enumerate(folds) if i != index for crop_id in fold]
    return train, list(folds[index])


def assign_folds(manifest: DatasetManifest, ids: Sequence[str], k: int = 5, seed: Optional[int] = None) -> DatasetManifest:
    """Copy of the manifest with fold numbers recorded for `ids`"""
    folds = make_folds(ids, k, manifest.seed if seed is None else seed)
    fold_of = {crop_id: index for index, fold in enumerate(folds) for crop_id in fold}
    known = manifest.by_id()
    unknown = [crop_id for crop_id in fold_of if crop_id not in known]
    if unknown:
        raise OrganoidValidationError(f"{len(unknown)} ids are not in the manifest, e.g. '{unknown[0]}'")
    entries = [entry.model_copy(update={"fold": fold_of.get(entry.crop_id)}) for entry in manifest.entries]
    return manifest.model_copy(update={"entries": entries})


def manifest_text(manifest: DatasetManifest) -> str:
    return json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def manifest_hash(manifest: DatasetManifest) -> str:
    return hashlib.sha256(manifest_text(manifest).encode("utf-8")).hexdigest()[:16]


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    atomic_write_text(path, manifest_text(manifest))
    logger.info("Wrote manifest %s (%d crops, hash %s)", path, len(manifest.entries), manifest_hash(manifest))
    return path


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"no manifest at {path}; run 'split' first")
    try:
        return DatasetManifest(**json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as e:
        raise OrganoidValidationError(f"manifest {path} is invalid: {e}") from e
