"""Training and segmentation of whole volumes."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import asmof, cnn, crf, grouping, groupone, ingest
from .config import PipelineConfig
from .core import (DEFAULT_ORIENTATION, GROUP_I, GROUP_II, GROUP_III, GroupPartition, Subject, Volume,
                   generate_phantom, group_labels_from_mask, normalize_intensity,
                   random_phantom_spec)

log = logging.getLogger(__name__)

SHAPE_GROUPS = (GROUP_II, GROUP_III)


@dataclass
class Bundle:
    groups: grouping.GroupModels
    shapes: dict[int, asmof.ShapeModel]
    appearance: dict[int, asmof.AppearanceModel]
    cnn: cnn.CnnModel
    crf: crf.CrfParams
    gp: groupone.GpModel
    orientation: str = DEFAULT_ORIENTATION


@dataclass
class TrainLogs:
    cnn_history: list = field(default_factory=list)
    crf_trials: list = field(default_factory=list)
    svm_accuracy: tuple = ()
    seconds: float = 0.0


# --- helpers --------------------------------------------------------------------------

def reference_labels(s: Subject, cfg: PipelineConfig) -> np.ndarray:
    if s.groups is not None:
        return np.asarray(s.groups)
    if s.mask is None:
        raise ValueError(f"subject {s.name} has neither group labels nor a mask")
    return group_labels_from_mask(s.mask, cfg.phantom.group_low, cfg.phantom.group_high)


def skull_rect(img) -> grouping.Rect:
    return grouping.extract_skull_rect(img)


def rect_center(r: grouping.Rect) -> tuple[float, float]:
    return r.x + (r.w - 1) / 2.0, r.y + (r.h - 1) / 2.0


def _shape_training_set(subjects, norms, labels, group, n):
    images, masks, shapes = [], [], []
    for s, vn, lab in zip(subjects, norms, labels):
        for z in np.flatnonzero(lab == group):
            try:
                shp = asmof.landmarks_from_mask(s.mask[z], n)
            except asmof.ShapeError:
                continue
            images.append(vn[z])
            masks.append(s.mask[z])
            shapes.append(shp)
    return images, masks, shapes


def _centered(shape):
    p = asmof.as_points(shape)
    return (p - p.mean(axis=0)).ravel()


def _cnn_rows(mask_or_none, vn, lab, band):
    rows = []
    for z in range(vn.shape[0]):
        region = np.zeros(vn.shape[1:], dtype=bool)
        if lab[z] == GROUP_I:
            r = skull_rect(vn[z])
            region[r.y:r.y + r.h, r.x:r.x + r.w] = True
        else:
            region = cnn.boundary_band(mask_or_none[z], band)
        yy, xx = np.nonzero(region)
        rows.append(np.column_stack([np.full(len(yy), z), yy, xx]))
    return np.concatenate(rows)


# --- training ---------------------------------------------------------------------------

def train_pipeline(subjects: list[Subject], cfg: PipelineConfig = PipelineConfig()):
    """Fit every stage on subjects with reference masks; returns ``(Bundle, TrainLogs)``."""
    t0 = time.perf_counter()
    if not subjects:
        raise ValueError("no training subjects")
    for s in subjects:
        if s.mask is None:
            raise ValueError(f"training subject {s.name} has no reference mask")
    logs = TrainLogs()
    norms = [normalize_intensity(s.volume.data) for s in subjects]
    labels = [reference_labels(s, cfg) for s in subjects]

    # slice grouping
    feats = [grouping.volume_features(s.volume, cfg.hog) for s in subjects]
    svm_kw = dict(epochs=cfg.svm.epochs, lr=cfg.svm.lr, reg=cfg.svm.reg)
    groups = grouping.train_group_classifiers(
        [(s.volume, lab) for s, lab in zip(subjects, labels)], cfg.hog, svm_kw, features=feats)
    logs.svm_accuracy = (groups.m12.train_accuracy, groups.m23.train_accuracy)

    # shape and appearance models per group
    shapes, appearance = {}, {}
    for g in SHAPE_GROUPS:
        images, masks, lms = _shape_training_set(subjects, norms, labels, g, cfg.asm.n)
        if len(lms) < 2:
            raise ValueError(f"group {g}: fewer than two usable training slices")
        shapes[g] = asmof.build_shape_model([_centered(x) for x in lms], cfg.asm.f_v, cfg.asm.q)
        appearance[g] = asmof.train_appearance(images, masks, lms, cfg.asm)
        log.info("group %d: %d training shapes, %d modes", g, len(lms), shapes[g].t)

    # CNN on reference bands and group-I skull rectangles
    rows, ys = [], []
    for i, (s, vn, lab) in enumerate(zip(subjects, norms, labels)):
        r = _cnn_rows(s.mask, vn, lab, cfg.tune.band)
        rows.append(np.column_stack([np.full(len(r), i), r]))
        ys.append(s.mask[r[:, 0], r[:, 1], r[:, 2]])
    index = cnn.PixelIndex(norms, np.concatenate(rows), cfg.cnn.patch)
    model = cnn.init_weights(cfg.cnn, cfg.seed)
    result = cnn.train(model, index, np.concatenate(ys), cfg.train, cfg.adam)
    logs.cnn_history = result.history

    # CRF tuning on evenly spread group II/III reference slices
    candidates = [(i, z) for i, lab in enumerate(labels) for z in np.flatnonzero(lab != GROUP_I)]
    pick = np.linspace(0, len(candidates) - 1, min(cfg.tune.slices, len(candidates))).round().astype(int)
    items = []
    for i, z in (candidates[p] for p in pick):
        m = subjects[i].mask[z].astype(np.float64)
        band = cnn.boundary_band(m > 0, cfg.tune.band)
        yy, xx = np.nonzero(band)
        m[yy, xx] = cnn.predict_pixels(result.model, norms[i], np.full(len(yy), z), yy, xx)
        box = np.argwhere(m > 0)
        mg = int(np.ceil(3 * cfg.crf.sigma_gamma))
        r0, c0 = np.maximum(box.min(axis=0) - mg, 0)
        r1, c1 = np.minimum(box.max(axis=0) + mg + 1, m.shape)
        items.append((m[r0:r1, c0:c1], norms[i][z, r0:r1, c0:c1],
                      subjects[i].mask[z, r0:r1, c0:c1].astype(bool)))
    crf_params, logs.crf_trials = crf.tune_params(items, cfg.tune.trials, cfg.seed, cfg.crf)

    # centroid trajectory
    entries = []
    for s in subjects:
        zs = [z for z in range(s.mask.shape[0]) if s.mask[z].any()]
        entries.append((np.array(zs, dtype=np.float64),
                        np.array([groupone.centroid_norm(s.mask[z]) for z in zs]),
                        (0, s.mask.shape[0] - 1)))
    gp = groupone.gp_fit(entries)

    logs.seconds = time.perf_counter() - t0
    return Bundle(groups, shapes, appearance, result.model, crf_params, gp), logs


# --- segmentation --------------------------------------------------------------------------

@dataclass
class SegmentInfo:
    partition: GroupPartition
    shift: float
    asm_masks: np.ndarray
    prob: np.ndarray
    seconds: float


def segment_volume(bundle: Bundle, volume: Volume, cfg: PipelineConfig = PipelineConfig()):
    """Return ``(uint8 mask (nz, ny, nx), SegmentInfo)``."""
    t0 = time.perf_counter()
    if volume.orientation != bundle.orientation:
        raise ValueError(f"volume orientation {volume.orientation!r} does not match the "
                         f"model's {bundle.orientation!r}")
    vn = normalize_intensity(volume.data)
    nz = vn.shape[0]
    feats = grouping.volume_features(volume, bundle.groups.hog)
    part = grouping.assign_groups(bundle.groups, features=feats, window=cfg.svm.window)
    labels = part.labels

    asm_masks = np.zeros(vn.shape, dtype=bool)
    rects = {}
    for z in range(nz):
        r = skull_rect(vn[z])
        rects[z] = tuple(r)
        if labels[z] == GROUP_I:
            continue
        g = int(labels[z])
        init = asmof.initial_shape(bundle.shapes[g], rect_center(r))
        shape = asmof.asm_search(vn[z], bundle.shapes[g], bundle.appearance[g], cfg.asm, init)
        asm_masks[z] = asmof.shape_to_mask(shape, vn[z].shape)

    prob = cnn.refine(vn, asm_masks, labels == GROUP_I, rects, bundle.cnn, cfg.tune.band)

    finals = {}
    for z in np.flatnonzero(labels != GROUP_I):
        finals[int(z)] = crf.crf_window(prob[z], vn[z], bundle.crf)

    span = (0, nz - 1)
    items = [(groupone.convert_range(*span, groupone.GP_LO, groupone.GP_HI, z), m)
             for z, m in finals.items()]
    shift = groupone.estimate_shift(items, bundle.gp)

    # anchors must be non-empty: fall back to the nearest non-empty final towards the middle
    k1, k4 = part.k1, part.k4
    anchors = dict(finals)
    for anchor, step in ((k1, 1), (k4 - 1, -1)):
        z = anchor
        while z in finals and not finals[z].any():
            z += step
        if z in finals and z != anchor:
            anchors[anchor] = finals[z]
    g1 = groupone.process_group_one(prob, vn, k1, k4, anchors, bundle.gp, shift,
                                    cfg.groupone, bundle.crf)

    out = np.zeros(vn.shape, dtype=np.uint8)
    for z, m in {**finals, **g1}.items():
        out[z] = m
    info = SegmentInfo(part, shift, asm_masks, prob, time.perf_counter() - t0)
    log.info("segmented %d slices in %.1fs (partition %s, shift %.2f)", nz, info.seconds,
             part.ks, shift)
    return out, info


# --- bundle (de)serialisation -----------------------------------------------------------------

def bundle_state(b: Bundle) -> dict:
    s = {}
    hog = b.groups.hog
    s.update({"grouping.m12.w": b.groups.m12.w, "grouping.m12.b": b.groups.m12.b,
              "grouping.m23.w": b.groups.m23.w, "grouping.m23.b": b.groups.m23.b,
              "grouping.rates": list(b.groups.rates.as_tuple()),
              "grouping.hog": [hog.size, hog.cell, hog.block, hog.bins, hog.subrect_fraction]})
    for g in SHAPE_GROUPS:
        s.update(asmof.shape_model_state(b.shapes[g], f"shape{g}"))
        s.update(asmof.appearance_state(b.appearance[g], f"appearance{g}"))
    s.update(cnn.model_state(b.cnn))
    s.update(crf.params_state(b.crf))
    s.update(groupone.gp_state(b.gp))
    s["meta.orientation"] = b.orientation
    return s


def bundle_from_state(s: dict) -> Bundle:
    size, cell, block, bins, frac = s["grouping.hog"]
    hog = grouping.HogParams(int(size), int(cell), int(block), int(bins), float(frac))
    groups = grouping.GroupModels(grouping.LinearSvm(s["grouping.m12.w"], s["grouping.m12.b"]),
                                  grouping.LinearSvm(s["grouping.m23.w"], s["grouping.m23.b"]),
                                  grouping.GroupRates(*s["grouping.rates"]), hog)
    shapes = {g: asmof.shape_model_from_state(s, f"shape{g}") for g in SHAPE_GROUPS}
    app = {g: asmof.appearance_from_state(s, f"appearance{g}") for g in SHAPE_GROUPS}
    return Bundle(groups, shapes, app, cnn.model_from_state(s), crf.params_from_state(s),
                  groupone.gp_from_state(s), s["meta.orientation"])


def save_bundle(path, b: Bundle):
    ingest.save_bundle(path, bundle_state(b))


def load_bundle(path) -> Bundle:
    return bundle_from_state(ingest.load_bundle(path))


# --- phantoms ----------------------------------------------------------------------------------

def phantom_subjects(seeds, cfg: PipelineConfig = PipelineConfig()) -> list[Subject]:
    out = []
    for seed in seeds:
        spec = random_phantom_spec(int(seed), cfg.phantom.dims, cfg.phantom.noise_sigma,
                                   cfg.phantom.skull_thickness)
        vol, mask = generate_phantom(spec)
        out.append(Subject(f"subject_{int(seed):03d}", vol, mask,
                           group_labels_from_mask(mask, cfg.phantom.group_low, cfg.phantom.group_high)))
    return out
