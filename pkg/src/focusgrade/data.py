"""Synthetic planted-region dataset: generation, disk format, augmentation,
and patient-level cross-validation splits.

Grade semantics mirror the clinical rule the grading task encodes: grade 0
(II on disk) images carry no diagnostic structure, grade 1 (III) one planted
structure, grade 2 (IV) both a dark irregular blob and a bright streak
cluster. All images share a label-independent texture plus faint clutter so
that grading actually requires finding the planted structures, and the
ground-truth focus mask marks exactly the planted pixels.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import pnm
from .frl import bilinear_upsample
from .mca import BIOMARKER_NAMES, CNV_VALUES, BiomarkerPanel

GRADES_ON_DISK = (2, 3, 4)  # II, III, IV


@dataclass
class Sample:
    sample_id: str
    patient_id: str
    image: np.ndarray  # [H, W, 3] float32 in [0, 1]
    grade: int  # 0..2
    panel: Optional[BiomarkerPanel]
    focus_mask: Optional[np.ndarray]  # [H, W] bool


@dataclass
class GeneratorConfig:
    n_patients: int = 120
    rois_per_patient: int = 2
    image_size: int = 64
    seed: int = 0
    grade_probs: tuple = (1 / 3, 1 / 3, 1 / 3)
    # background texture
    noise_cells: int = 8
    noise_strength: float = 0.10
    fine_noise: float = 0.02
    clutter_count: tuple = (2, 5)
    clutter_contrast: float = 0.10
    # planted structures
    blob_radius: tuple = (5.0, 9.0)
    blob_contrast: tuple = (0.25, 0.40)
    streak_count: tuple = (2, 4)
    streak_length: tuple = (8.0, 16.0)
    streak_width: float = 1.4
    streak_contrast: tuple = (0.25, 0.40)
    # biomarker status probabilities per grade (II, III, IV)
    p_idh_mutant: tuple = (0.8, 0.6, 0.1)
    p_codel: tuple = (0.5, 0.3, 0.05)
    p_cnv_nonzero: tuple = (0.1, 0.3, 0.6)

    def __post_init__(self):
        for name in ("grade_probs", "p_idh_mutant", "p_codel", "p_cnv_nonzero"):
            probs = getattr(self, name)
            if len(probs) != 3 or any(p < 0 or p > 1 for p in probs):
                raise ValueError(f"{name} must be three probabilities in [0, 1]")
        if abs(sum(self.grade_probs) - 1.0) > 1e-9:
            raise ValueError(f"grade_probs sum to {sum(self.grade_probs)}, not 1")
        if self.n_patients < 1 or self.rois_per_patient < 1:
            raise ValueError("need at least one patient and one ROI per patient")


# ---------------------------------------------------------------------------
# image synthesis


def _texture(rng: np.random.Generator, cfg: GeneratorConfig) -> np.ndarray:
    n = cfg.image_size
    base = rng.uniform(0.55, 0.85, size=3)
    img = np.empty((n, n, 3))
    coarse = rng.standard_normal((cfg.noise_cells, cfg.noise_cells, 3))
    for c in range(3):
        img[:, :, c] = base[c] + cfg.noise_strength * bilinear_upsample(
            coarse[:, :, c], n, n
        )
    img += cfg.fine_noise * rng.standard_normal((n, n, 3))
    return img


def _blob_mask(rng: np.random.Generator, n: int, radius: tuple) -> np.ndarray:
    r0 = rng.uniform(*radius)
    margin = r0 + 2.0
    cy = rng.uniform(margin, n - margin)
    cx = rng.uniform(margin, n - margin)
    yy, xx = np.mgrid[0:n, 0:n]
    ang = np.arctan2(yy - cy, xx - cx)
    k1, k2 = rng.integers(2, 5), rng.integers(5, 9)
    p1, p2 = rng.uniform(0, 2 * np.pi, 2)
    wobble = 1.0 + 0.18 * np.sin(k1 * ang + p1) + 0.10 * np.sin(k2 * ang + p2)
    return np.hypot(yy - cy, xx - cx) <= r0 * wobble


def _segment_mask(n: int, y0, x0, y1, x1, width: float) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n]
    dy, dx = y1 - y0, x1 - x0
    length2 = dy * dy + dx * dx
    t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / max(length2, 1e-9), 0.0, 1.0)
    dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
    return dist <= width / 2.0


def _streaks_mask(rng: np.random.Generator, n: int, cfg: GeneratorConfig) -> np.ndarray:
    count = rng.integers(cfg.streak_count[0], cfg.streak_count[1] + 1)
    cy = rng.uniform(12, n - 12)
    cx = rng.uniform(12, n - 12)
    mask = np.zeros((n, n), bool)
    for _ in range(count):
        ang = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(*cfg.streak_length)
        oy = cy + rng.uniform(-4, 4)
        ox = cx + rng.uniform(-4, 4)
        mask |= _segment_mask(
            n, oy, ox, oy + length * np.sin(ang), ox + length * np.cos(ang),
            cfg.streak_width,
        )
    return mask


def _add_clutter(rng: np.random.Generator, img: np.ndarray, cfg: GeneratorConfig) -> None:
    n = cfg.image_size
    count = rng.integers(cfg.clutter_count[0], cfg.clutter_count[1] + 1)
    for _ in range(count):
        contrast = rng.uniform(0.4, 1.0) * cfg.clutter_contrast * rng.choice([-1.0, 1.0])
        if rng.random() < 0.5:
            mask = _blob_mask(rng, n, (2.5, 5.0))
        else:
            y0, x0 = rng.uniform(6, n - 6, 2)
            ang = rng.uniform(0, 2 * np.pi)
            length = rng.uniform(5, 10)
            mask = _segment_mask(
                n, y0, x0, y0 + length * np.sin(ang), x0 + length * np.cos(ang), 1.2
            )
        img[mask] += contrast


def _render_sample(rng: np.random.Generator, grade: int, cfg: GeneratorConfig):
    n = cfg.image_size
    img = _texture(rng, cfg)
    _add_clutter(rng, img, cfg)
    focus = np.zeros((n, n), bool)

    wants_blob = grade == 2 or (grade == 1 and rng.random() < 0.5)
    wants_streaks = grade == 2 or (grade == 1 and not wants_blob)
    if wants_blob:
        mask = _blob_mask(rng, n, cfg.blob_radius)
        depth = rng.uniform(*cfg.blob_contrast)
        img[mask] -= depth * np.array([1.0, 0.9, 0.9])
        focus |= mask
    if wants_streaks:
        mask = _streaks_mask(rng, n, cfg)
        gain = rng.uniform(*cfg.streak_contrast)
        img[mask] += gain * np.array([1.0, 0.45, 0.45])
        focus |= mask

    return np.clip(img, 0.0, 1.0).astype(np.float32), focus


def _draw_panel(rng: np.random.Generator, grade: int, cfg: GeneratorConfig) -> BiomarkerPanel:
    idh = int(rng.random() < cfg.p_idh_mutant[grade])
    codel = int(rng.random() < cfg.p_codel[grade])
    cnv = []
    for _ in range(4):
        if rng.random() < cfg.p_cnv_nonzero[grade]:
            cnv.append(int(rng.choice([-2, -1, 1, 2])))
        else:
            cnv.append(0)
    return BiomarkerPanel(idh, codel, *cnv)


def generate_samples(cfg: GeneratorConfig) -> list[Sample]:
    """Deterministic from the seed; per-patient RNG streams are spawned from
    the master seed so generation order never changes the bytes."""
    root = np.random.SeedSequence(cfg.seed)
    samples: list[Sample] = []
    for pi, patient_seq in enumerate(root.spawn(cfg.n_patients)):
        child_seqs = patient_seq.spawn(cfg.rois_per_patient + 1)
        prng = np.random.default_rng(child_seqs[0])
        grade = int(prng.choice(3, p=np.asarray(cfg.grade_probs, float)))
        panel = _draw_panel(prng, grade, cfg)
        patient_id = f"p{pi:04d}"
        for ri in range(cfg.rois_per_patient):
            rrng = np.random.default_rng(child_seqs[ri + 1])
            image, focus = _render_sample(rrng, grade, cfg)
            samples.append(
                Sample(
                    sample_id=f"{patient_id}_r{ri}",
                    patient_id=patient_id,
                    image=image,
                    grade=grade,
                    panel=panel,
                    focus_mask=focus,
                )
            )
    return samples


def generate(cfg: GeneratorConfig, out_dir) -> list[Sample]:
    samples = generate_samples(cfg)
    save_dataset(samples, out_dir)
    return samples


# ---------------------------------------------------------------------------
# disk format: images/<id>.ppm, masks/<id>.pgm, labels.csv

LABEL_COLUMNS = ["sample_id", "patient_id", "grade"] + list(BIOMARKER_NAMES)


def _panel_to_row(panel: BiomarkerPanel) -> list[str]:
    return [
        "mut" if panel.idh else "wt",
        "codel" if panel.codel_1p19q else "intact",
        str(panel.cnv_pten),
        str(panel.cnv_egfr),
        str(panel.cnv_card11),
        str(panel.cnv_fgfr2),
    ]


def save_dataset(samples: list[Sample], out_dir) -> None:
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    with open(os.path.join(out_dir, "labels.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LABEL_COLUMNS)
        for s in samples:
            _write_sample_files(s, img_dir, mask_dir)
            row = [s.sample_id, s.patient_id, str(GRADES_ON_DISK[s.grade])]
            writer.writerow(row + (_panel_to_row(s.panel) if s.panel else [""] * 6))


def save(sample: Sample, out_dir) -> None:
    """Append one sample, creating the directory skeleton if needed."""
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)
    labels_path = os.path.join(out_dir, "labels.csv")
    fresh = not os.path.exists(labels_path)
    with open(labels_path, "a", newline="") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(LABEL_COLUMNS)
        _write_sample_files(sample, img_dir, mask_dir)
        row = [sample.sample_id, sample.patient_id, str(GRADES_ON_DISK[sample.grade])]
        writer.writerow(row + (_panel_to_row(sample.panel) if sample.panel else [""] * 6))


def _write_sample_files(s: Sample, img_dir, mask_dir) -> None:
    pnm.write_ppm(os.path.join(img_dir, f"{s.sample_id}.ppm"), np.rint(s.image * 255.0))
    if s.focus_mask is not None:
        pnm.write_pgm(
            os.path.join(mask_dir, f"{s.sample_id}.pgm"),
            s.focus_mask.astype(np.uint8) * 255,
        )


def _parse_panel(row: dict, labels_path) -> Optional[BiomarkerPanel]:
    if any(name not in row or row[name] in (None, "") for name in BIOMARKER_NAMES):
        return None
    sid = row["sample_id"]
    idh, codel = row["idh"], row["codel_1p19q"]
    if idh not in ("wt", "mut"):
        raise ValueError(f"{labels_path}: sample {sid}: idh must be wt or mut, got {idh!r}")
    if codel not in ("intact", "codel"):
        raise ValueError(
            f"{labels_path}: sample {sid}: codel_1p19q must be intact or codel, got {codel!r}"
        )
    cnv = []
    for name in BIOMARKER_NAMES[2:]:
        try:
            v = int(row[name])
        except ValueError:
            raise ValueError(f"{labels_path}: sample {sid}: {name} is not an integer") from None
        if v not in CNV_VALUES:
            raise ValueError(f"{labels_path}: sample {sid}: {name}={v} outside {CNV_VALUES}")
        cnv.append(v)
    return BiomarkerPanel(int(idh == "mut"), int(codel == "codel"), *cnv)


def load(data_dir) -> list[Sample]:
    """Read a dataset directory back; biomarker columns and masks may be
    absent, in which case panel / focus_mask are None."""
    labels_path = os.path.join(data_dir, "labels.csv")
    if not os.path.exists(labels_path):
        raise ValueError(f"{labels_path}: missing labels file")
    samples: list[Sample] = []
    with open(labels_path, newline="") as f:
        reader = csv.DictReader(f)
        for col in ("sample_id", "patient_id", "grade"):
            if col not in (reader.fieldnames or []):
                raise ValueError(f"{labels_path}: missing required column {col!r}")
        for row in reader:
            sid = row["sample_id"]
            try:
                grade_disk = int(row["grade"])
            except ValueError:
                raise ValueError(f"{labels_path}: sample {sid}: grade is not an integer") from None
            if grade_disk not in GRADES_ON_DISK:
                raise ValueError(
                    f"{labels_path}: sample {sid}: grade {grade_disk} not in {GRADES_ON_DISK}"
                )
            img_path = os.path.join(data_dir, "images", f"{sid}.ppm")
            if not os.path.exists(img_path):
                raise ValueError(f"{labels_path}: sample {sid}: missing image {img_path}")
            image = pnm.read_ppm(img_path).astype(np.float32) / 255.0
            mask_path = os.path.join(data_dir, "masks", f"{sid}.pgm")
            focus = pnm.read_pgm(mask_path) > 127 if os.path.exists(mask_path) else None
            samples.append(
                Sample(
                    sample_id=sid,
                    patient_id=row["patient_id"],
                    image=image,
                    grade=grade_disk - 2,
                    panel=_parse_panel(row, labels_path),
                    focus_mask=focus,
                )
            )
    return samples


# ---------------------------------------------------------------------------
# augmentation and splits


def augment(image: np.ndarray, rng: np.random.Generator, mask: Optional[np.ndarray] = None):
    """Flips, pad-4 random crop, per-channel brightness; the mask rides along
    through the geometric part. Output stays in [0, 1]."""
    img = image
    if rng.random() < 0.5:
        img = img[:, ::-1]
        mask = mask[:, ::-1] if mask is not None else None
    if rng.random() < 0.5:
        img = img[::-1]
        mask = mask[::-1] if mask is not None else None
    h, w = img.shape[:2]
    oy = int(rng.integers(0, 9))
    ox = int(rng.integers(0, 9))
    padded = np.pad(img, ((4, 4), (4, 4), (0, 0)), mode="reflect")
    img = padded[oy : oy + h, ox : ox + w]
    if mask is not None:
        mpad = np.pad(mask, 4, mode="constant")
        mask = mpad[oy : oy + h, ox : ox + w]
    scale = rng.uniform(0.8, 1.2, size=3)
    img = np.clip(img * scale.astype(img.dtype), 0.0, 1.0)
    return img, mask


def kfold_split(samples: list[Sample], k: int = 5, seed: int = 0):
    """Patient-level folds, grade-stratified, near-equal patient counts."""
    patient_grade: dict[str, int] = {}
    order: list[str] = []
    for s in samples:
        if s.patient_id not in patient_grade:
            patient_grade[s.patient_id] = s.grade
            order.append(s.patient_id)
    if k < 2:
        raise ValueError(f"need k >= 2 folds, got {k}")
    if k > len(order):
        raise ValueError(f"k={k} folds but only {len(order)} patients")

    rng = np.random.default_rng(seed)
    by_grade: dict[int, list[str]] = {}
    for pid in order:
        by_grade.setdefault(patient_grade[pid], []).append(pid)
    dealt: list[str] = []
    for grade in sorted(by_grade):
        group = by_grade[grade]
        rng.shuffle(group)
        dealt.extend(group)

    fold_of = {pid: i % k for i, pid in enumerate(dealt)}
    folds = []
    for i in range(k):
        test = [s for s in samples if fold_of[s.patient_id] == i]
        train = [s for s in samples if fold_of[s.patient_id] != i]
        assert not {s.patient_id for s in train} & {s.patient_id for s in test}
        folds.append((train, test))
    return folds
