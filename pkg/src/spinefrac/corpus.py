"""On-disk case layout shared by the phantom generator, CLI and evaluation.

    <corpus>/manifest.json
    <corpus>/<case_id>/image.nii        native-resolution intensities
    <corpus>/<case_id>/annotations.csv  name,grade,x_mm,y_mm,z_mm
    <corpus>/<case_id>/labels.nii       label volume on the resampled grid
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .labels import AnnotationSet, parse_annotations
from .volume_io import Volume, load_volume, preprocess

IMAGE_FILE = "image.nii"
ANNOTATION_FILE = "annotations.csv"
LABEL_FILE = "labels.nii"
MANIFEST_FILE = "manifest.json"


@dataclass
class Case:
    """A preprocessed case: image resampled and normalized, labels aligned to it."""

    case_id: str
    image: Volume
    labels: Volume
    annotations: AnnotationSet

    @property
    def positive(self) -> bool:
        return self.annotations.has_fracture


def read_manifest(corpus_dir) -> dict:
    with open(Path(corpus_dir) / MANIFEST_FILE, encoding="utf-8") as fh:
        return json.load(fh)


def load_case(case_dir, target_spacing: float = 1.0) -> Case:
    case_dir = Path(case_dir)
    image = preprocess(load_volume(case_dir / IMAGE_FILE), target_spacing)
    labels = load_volume(case_dir / LABEL_FILE)
    if labels.shape != image.shape:
        raise ValueError(f"{case_dir}: labels {labels.shape} do not match resampled image {image.shape}")
    annotations = parse_annotations(case_dir / ANNOTATION_FILE, case_id=case_dir.name)
    return Case(case_dir.name, image, labels, annotations)


def load_corpus(corpus_dir, target_spacing: float = 1.0) -> list[Case]:
    manifest = read_manifest(corpus_dir)
    return [load_case(Path(corpus_dir) / c["case_id"], target_spacing) for c in manifest["cases"]]
