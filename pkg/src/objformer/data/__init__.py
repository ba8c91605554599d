"""Dataset format, label construction, synthetic pairs and augmentation."""

from .dataset import (
    DatasetManifest,
    LabeledBatch,
    SampleRecord,
    load_dataset,
    load_sample,
    make_batch,
    read_manifest,
    save_dataset,
    save_sample,
)
from .netpbm import NetpbmError
from .sample import (
    BACKGROUND,
    CLASS_NAMES,
    MAP_PALETTE,
    CategoryPalette,
    SamplePair,
    check_invariants,
    generate_change_labels,
    generate_partial_labels,
)
from .synth import synth_generate
from .transforms import DIRECTIONS, apply_registration_offset, attach_maps, augment

__all__ = [
    "BACKGROUND",
    "CLASS_NAMES",
    "CategoryPalette",
    "DIRECTIONS",
    "DatasetManifest",
    "LabeledBatch",
    "MAP_PALETTE",
    "NetpbmError",
    "SamplePair",
    "SampleRecord",
    "apply_registration_offset",
    "attach_maps",
    "augment",
    "check_invariants",
    "generate_change_labels",
    "generate_partial_labels",
    "load_dataset",
    "load_sample",
    "make_batch",
    "read_manifest",
    "save_dataset",
    "save_sample",
    "synth_generate",
]
