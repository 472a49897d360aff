"""Longitudinal cohort data model and pair sampling.

A cohort is patients -> eyes -> dated visits -> scan files, with an
optional conversion day per eye. This module owns manifest (de)serialization
and validation, min-max time-gap scaling, conversion-window labeling,
eye-level stratified splitting, and the two-visit pair sampler used for
pretraining.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from tinc.errors import ValidationError

logger = logging.getLogger(__name__)

DEFAULT_GAP_RANGE = (90, 540)
DEFAULT_DV_BOUNDS = (0, 540)
DEFAULT_WINDOW_DAYS = 183
LATERALITIES = ("left", "right")


@dataclass
class VisitRecord:
    day: int
    volume_id: str
    scans: list

    def to_dict(self):
        return {"day": self.day, "volume_id": self.volume_id, "scans": list(self.scans)}


@dataclass
class EyeRecord:
    laterality: str
    conversion_day: Optional[int]
    visits: list

    def to_dict(self):
        out = {
            "laterality": self.laterality,
            "visits": [v.to_dict() for v in self.visits],
        }
        if self.conversion_day is not None:
            out["conversion_day"] = self.conversion_day
        return out


@dataclass
class PatientRecord:
    id: str
    eyes: list

    def to_dict(self):
        return {"id": self.id, "eyes": [e.to_dict() for e in self.eyes]}


def eye_id(patient_id, laterality):
    return f"{patient_id}_{laterality}"


@dataclass
class CohortManifest:
    patients: list
    root: Path = field(default_factory=Path)

    def to_dict(self):
        return {"patients": [p.to_dict() for p in self.patients]}

    def iter_eyes(self):
        for patient in self.patients:
            for eye in patient.eyes:
                yield patient, eye

    def eye_map(self):
        return {eye_id(p.id, e.laterality): (p, e) for p, e in self.iter_eyes()}

    def resolve(self, scan_path):
        return Path(self.root) / scan_path

    def validate(self):
        seen_scans = set()
        seen_eyes = set()
        for patient, eye in self.iter_eyes():
            key = eye_id(patient.id, eye.laterality)
            if key in seen_eyes:
                raise ValidationError(f"duplicate eye {key}")
            seen_eyes.add(key)
            if eye.laterality not in LATERALITIES:
                raise ValidationError(
                    f"eye {key}: laterality must be one of {LATERALITIES}")
            if not eye.visits:
                raise ValidationError(f"eye {key} has no visits")
            days = [v.day for v in eye.visits]
            if any(b <= a for a, b in zip(days, days[1:])):
                raise ValidationError(f"eye {key}: visit days must strictly increase")
            if eye.conversion_day is not None and eye.conversion_day < days[0]:
                raise ValidationError(
                    f"eye {key}: conversion_day {eye.conversion_day} precedes "
                    f"first visit day {days[0]}")
            for visit in eye.visits:
                for scan in visit.scans:
                    if scan in seen_scans:
                        raise ValidationError(f"duplicate scan reference {scan!r}")
                    seen_scans.add(scan)
        return self


def manifest_from_dict(data, root=Path(".")):
    patients = []
    for pd in data["patients"]:
        eyes = []
        for ed in pd["eyes"]:
            visits = [VisitRecord(day=int(vd["day"]), volume_id=vd["volume_id"],
                                  scans=list(vd["scans"])) for vd in ed["visits"]]
            conv = ed.get("conversion_day")
            eyes.append(EyeRecord(laterality=ed["laterality"],
                                  conversion_day=None if conv is None else int(conv),
                                  visits=visits))
        patients.append(PatientRecord(id=pd["id"], eyes=eyes))
    return CohortManifest(patients=patients, root=Path(root))


def load_manifest(path):
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return manifest_from_dict(data, root=path.parent).validate()


def save_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Time scaling and labels
# ---------------------------------------------------------------------------

def scale_time_delta(gap_days, v_min, v_max):
    """Min-max scale an absolute visit gap to [0, 1], clamped."""
    if v_min >= v_max:
        raise ValidationError(f"v_min ({v_min}) must be < v_max ({v_max})")
    if gap_days < 0:
        raise ValidationError(f"gap_days must be >= 0, got {gap_days}")
    scaled = (gap_days - v_min) / (v_max - v_min)
    return float(min(1.0, max(0.0, scaled)))


def scale_time_signed(v1_day, v2_day, v_max):
    """Signed scaled gap (v1 - v2) / v_max in [-1, 1]; antisymmetric in order."""
    if v_max <= 0:
        raise ValidationError(f"v_max must be positive, got {v_max}")
    return float((v1_day - v2_day) / v_max)


def label_conversion(scan_day, conversion_day, window_days=DEFAULT_WINDOW_DAYS):
    """True iff the eye converts within (0, window_days] after the scan."""
    if window_days <= 0:
        raise ValidationError(f"window_days must be positive, got {window_days}")
    if conversion_day is None:
        return False
    gap = conversion_day - scan_day
    return 0 < gap <= window_days


@dataclass(frozen=True)
class SupervisedScan:
    patient_id: str
    eye_id: str
    volume_id: str
    day: int
    path: str
    label: bool


def build_supervised_dataset(manifest, window_days=DEFAULT_WINDOW_DAYS):
    """All pre-conversion scans with conversion-within-window labels.

    Scans at or after the conversion day never appear: the task predicts an
    upcoming conversion, so post-conversion scans are out of domain.
    """
    out = []
    for patient, eye in manifest.iter_eyes():
        key = eye_id(patient.id, eye.laterality)
        for visit in eye.visits:
            if eye.conversion_day is not None and visit.day >= eye.conversion_day:
                continue
            label = label_conversion(visit.day, eye.conversion_day, window_days)
            for scan in visit.scans:
                out.append(SupervisedScan(patient_id=patient.id, eye_id=key,
                                          volume_id=visit.volume_id, day=visit.day,
                                          path=scan, label=label))
    return out


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    train: frozenset
    val: frozenset
    test: frozenset
    ratios: tuple

    def to_dict(self):
        return {
            "train": sorted(self.train),
            "val": sorted(self.val),
            "test": sorted(self.test),
            "ratios": list(self.ratios),
        }

    def split_of(self, key):
        if key in self.train:
            return "train"
        if key in self.val:
            return "val"
        if key in self.test:
            return "test"
        return None


def _largest_remainder(total, ratios):
    quotas = [total * r for r in ratios]
    base = [int(np.floor(q)) for q in quotas]
    short = total - sum(base)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:short]:
        base[i] += 1
    return base


def split_patients(manifest, ratios=(0.6, 0.2, 0.2), seed=0, group_by_patient=True):
    """Deterministic eye-level split stratified by conversion status.

    The allocation unit is the patient (all of a patient's eyes stay in one
    split, avoiding fellow-eye leakage); a patient counts as a converter if
    any eye converts. With single-eye patients the per-class counts are
    exact largest-remainder allocations.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValidationError(f"ratios must be three nonnegative reals, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must sum to 1, got {ratios}")

    units = {}
    if group_by_patient:
        for patient in manifest.patients:
            keys = [eye_id(patient.id, e.laterality) for e in patient.eyes]
            converter = any(e.conversion_day is not None for e in patient.eyes)
            units[patient.id] = (keys, converter)
    else:
        for patient, eye in manifest.iter_eyes():
            key = eye_id(patient.id, eye.laterality)
            units[key] = ([key], eye.conversion_day is not None)

    rng = np.random.default_rng(seed)
    buckets = ([], [], [])
    for cls in (True, False):
        members = sorted(u for u, (_, c) in units.items() if c is cls)
        if not members:
            name = "converter" if cls else "non-converter"
            raise ValidationError(f"cannot stratify: no {name} eyes in manifest")
        members = [members[i] for i in rng.permutation(len(members))]
        counts = _largest_remainder(len(members), ratios)
        pos = 0
        for split_idx, count in enumerate(counts):
            for unit in members[pos:pos + count]:
                buckets[split_idx].extend(units[unit][0])
            pos += count
    return SplitAssignment(train=frozenset(buckets[0]), val=frozenset(buckets[1]),
                           test=frozenset(buckets[2]), ratios=tuple(ratios))


# ---------------------------------------------------------------------------
# Pair sampling
# ---------------------------------------------------------------------------

@dataclass
class PairBatch:
    """A batch of two-visit pairs: views, scaled gaps, and provenance."""

    x1: object
    x2: object
    dv: np.ndarray
    delta_signed: np.ndarray
    patient_ids: list
    eye_ids: list
    day1: np.ndarray
    day2: np.ndarray

    def __len__(self):
        return len(self.patient_ids)


def eligible_visit_pairs(eye, gap_range_days=DEFAULT_GAP_RANGE):
    """Ordered visit-index pairs whose absolute gap lies inside the range."""
    lo, hi = gap_range_days
    days = [v.day for v in eye.visits]
    pairs = []
    for i in range(len(days)):
        for j in range(len(days)):
            if i != j and lo <= abs(days[i] - days[j]) <= hi:
                pairs.append((i, j))
    return pairs


def eligible_eyes(manifest, gap_range_days=DEFAULT_GAP_RANGE, warn=True):
    """Eyes with at least one in-range visit pair, in manifest order."""
    out = []
    for patient, eye in manifest.iter_eyes():
        key = eye_id(patient.id, eye.laterality)
        pairs = eligible_visit_pairs(eye, gap_range_days)
        if pairs:
            out.append((key, patient, eye, pairs))
        elif warn:
            logger.warning("eye %s has no visit pair with gap in %s; skipped",
                           key, gap_range_days)
    return out


def sample_pair_batch(manifest, n, gap_range_days=DEFAULT_GAP_RANGE, seed=0,
                      augmenter=None, dv_bounds=DEFAULT_DV_BOUNDS, eyes=None):
    """Sample n same-eye two-visit pairs with scaled time gaps.

    Eyes are drawn without replacement until the eligible pool is exhausted,
    then reshuffled (sampling across eyes with replacement when n exceeds the
    pool; the two scans of a pair always come from distinct visits). Each
    view gets an independent augmentation stream. With ``augmenter=None`` the
    views are resolved scan paths.

    ``eyes`` optionally fixes the eye sequence (used by the trainer to keep
    one-pass-per-epoch semantics across batches).
    """
    if n < 1:
        raise ValidationError(f"batch size must be >= 1, got {n}")
    pool = eligible_eyes(manifest, gap_range_days)
    if not pool:
        raise ValidationError(
            f"no eye has a visit pair with gap in {gap_range_days}")
    by_key = {key: (patient, eye, pairs) for key, patient, eye, pairs in pool}
    rng = np.random.default_rng(seed)

    if eyes is None:
        keys = [key for key, _, _, _ in pool]
        order = []
        while len(order) < n:
            order.extend(keys[i] for i in rng.permutation(len(keys)))
        order = order[:n]
    else:
        unknown = [k for k in eyes if k not in by_key]
        if unknown:
            raise ValidationError(f"requested ineligible or unknown eyes: {unknown}")
        if len(eyes) != n:
            raise ValidationError(f"got {len(eyes)} eye keys for batch size {n}")
        order = list(eyes)

    v_min, v_max = dv_bounds
    x1, x2 = [], []
    dv = np.empty(n)
    delta = np.empty(n)
    day1 = np.empty(n, dtype=np.int64)
    day2 = np.empty(n, dtype=np.int64)
    patient_ids, eye_keys = [], []
    for i, key in enumerate(order):
        patient, eye, pairs = by_key[key]
        vi, vj = pairs[rng.integers(len(pairs))]
        visit1, visit2 = eye.visits[vi], eye.visits[vj]
        scan1 = visit1.scans[rng.integers(len(visit1.scans))]
        scan2 = visit2.scans[rng.integers(len(visit2.scans))]
        path1 = str(manifest.resolve(scan1))
        path2 = str(manifest.resolve(scan2))
        if augmenter is None:
            x1.append(path1)
            x2.append(path2)
        else:
            rng1, rng2 = rng.spawn(2)
            x1.append(augmenter(path1, rng1))
            x2.append(augmenter(path2, rng2))
        gap = abs(visit1.day - visit2.day)
        dv[i] = scale_time_delta(gap, v_min, v_max)
        delta[i] = scale_time_signed(visit1.day, visit2.day, v_max)
        day1[i] = visit1.day
        day2[i] = visit2.day
        patient_ids.append(patient.id)
        eye_keys.append(key)
    if augmenter is not None:
        x1 = np.stack(x1)
        x2 = np.stack(x2)
    return PairBatch(x1=x1, x2=x2, dv=dv, delta_signed=delta,
                     patient_ids=patient_ids, eye_ids=eye_keys,
                     day1=day1, day2=day2)
