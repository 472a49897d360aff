"""Synthetic longitudinal pseudo-B-scan cohort generator.

Each eye gets a latent progression state s(t) in [0, 1] (piecewise-linear,
non-decreasing) and a fixed quadratic layer contour. A scan renders a bright
reference line on the contour, a tissue band above it whose thickness grows
with s, and a lesion blob below it whose amplitude grows affinely with s,
plus optional speckle noise. Converters cross s = 0.8 inside the study
window; non-converters stay below 0.5. The ground truth (trajectory knots,
conversion day, contour) is written to a sidecar for diagnostics.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from tinc import cohort, imageio
from tinc.errors import ValidationError

CONVERSION_THRESHOLD = 0.8
NONCONVERTER_CEIL = 0.5
LESION_BASE_AMPLITUDE = 0.08
LESION_AMPLITUDE_GAIN = 0.42

# seed namespaces, so the per-purpose RNG streams never collide
_TRAIT_TAG = 1
_JITTER_TAG = 2
_NOISE_TAG = 3
_ASSIGN_TAG = 4


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 100
    visits_per_eye: int = 10
    visit_interval_days: int = 30
    scans_per_visit: int = 6
    image_size: tuple = (128, 128)
    converter_fraction: float = 0.25
    noise_sigma: float = 0.08
    progression_rate_range: tuple = (5e-4, 5e-3)
    seed: int = 0

    def validate(self):
        counts = {
            "n_patients": self.n_patients,
            "visits_per_eye": self.visits_per_eye,
            "visit_interval_days": self.visit_interval_days,
            "scans_per_visit": self.scans_per_visit,
        }
        for name, value in counts.items():
            if value < 1:
                raise ValidationError(f"{name} must be positive, got {value}")
        h, w = self.image_size
        if h < 32 or w < 32:
            raise ValidationError(f"image_size must be at least 32x32, got {h}x{w}")
        if not 0.0 <= self.converter_fraction <= 1.0:
            raise ValidationError(
                f"converter_fraction must be in [0, 1], got {self.converter_fraction}")
        if self.noise_sigma < 0:
            raise ValidationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        lo, hi = self.progression_rate_range
        if not 0 < lo < hi:
            raise ValidationError(
                f"progression_rate_range must satisfy 0 < lo < hi, got {(lo, hi)}")
        return self

    @property
    def span_days(self):
        return (self.visits_per_eye - 1) * self.visit_interval_days


@dataclass
class PatientState:
    """Everything render_scan needs about one synthetic eye."""

    patient_id: str
    laterality: str
    base_texture_seed: int
    knots: list
    converter: bool
    conversion_day: Optional[int]
    contour: tuple
    lesion_x: int
    ripple_phase: float

    def progression(self, day):
        days = np.array([k[0] for k in self.knots], dtype=np.float64)
        vals = np.array([k[1] for k in self.knots], dtype=np.float64)
        return float(np.interp(day, days, vals))


def _first_crossing_day(knots, threshold, last_day):
    days = np.array([k[0] for k in knots], dtype=np.float64)
    vals = np.array([k[1] for k in knots], dtype=np.float64)
    grid = np.arange(0, last_day + 1)
    s = np.interp(grid, days, vals)
    hits = np.nonzero(s >= threshold)[0]
    return int(grid[hits[0]]) if hits.size else None


def _converter_knots(rng, cfg):
    """Slope-driven trajectory with both rates from the upper half of the range."""
    lo, hi = cfg.progression_rate_range
    mid = 0.5 * (lo + hi)
    span = cfg.span_days
    s0 = rng.uniform(0.10, 0.25)
    r1, r2 = rng.uniform(mid, hi, size=2)
    knot_day = int(round(rng.uniform(0.2, 0.6) * span))
    knot_day = min(max(knot_day, 1), span - 1)
    s_knot = s0 + r1 * knot_day
    s_end = s_knot + r2 * (span - knot_day)
    knots = [[0, s0], [knot_day, s_knot], [span, s_end]]
    # guarantee the 0.8 crossing happens inside the window
    if s_end < CONVERSION_THRESHOLD:
        scale = (CONVERSION_THRESHOLD + 0.05 - s0) / (s_end - s0)
        knots = [[0, s0], [knot_day, s0 + (s_knot - s0) * scale],
                 [span, s0 + (s_end - s0) * scale]]
    # clamp at 1 with an explicit vertex so the knot list stays exact truth
    days = np.array([k[0] for k in knots], dtype=np.float64)
    vals = np.array([k[1] for k in knots], dtype=np.float64)
    if vals[-1] > 1.0:
        cross = np.interp(1.0, vals, days)
        keep = [[int(d), float(v)] for d, v in knots if v < 1.0]
        knots = keep + [[int(round(cross)), 1.0], [span, 1.0]]
        knots = [k for i, k in enumerate(knots)
                 if i == 0 or k[0] > knots[i - 1][0]]
    return [[int(k[0]), float(min(k[1], 1.0))] for k in knots]


def _nonconverter_knots(rng, cfg):
    """Endpoint-driven trajectory kept strictly below the converter threshold."""
    span = cfg.span_days
    s0 = rng.uniform(0.05, 0.15)
    s_end = rng.uniform(s0 + 0.03, NONCONVERTER_CEIL - 0.05)
    knot_day = int(round(rng.uniform(0.25, 0.7) * span))
    knot_day = min(max(knot_day, 1), span - 1)
    s_knot = s0 + (s_end - s0) * rng.uniform(0.2, 0.8)
    return [[0, float(s0)], [knot_day, float(s_knot)], [span, float(s_end)]]


def _make_state(patient_idx, converter, cfg):
    rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, _TRAIT_TAG, patient_idx)))
    h, w = cfg.image_size
    # contour sampled in centered form, stored expanded as raw (a, b, c)
    a = rng.uniform(0.001, 0.004) * rng.choice([-1.0, 1.0])
    slope = rng.uniform(-0.15, 0.15)
    center_y = 0.45 * h + rng.uniform(-4.0, 4.0)
    cx = w / 2.0
    b = slope - 2.0 * a * cx
    c = a * cx * cx - slope * cx + center_y
    knots = _converter_knots(rng, cfg) if converter else _nonconverter_knots(rng, cfg)
    conversion_day = None
    if converter:
        conversion_day = _first_crossing_day(knots, CONVERSION_THRESHOLD, cfg.span_days)
        if conversion_day is None:
            raise ValidationError(
                f"internal: converter trajectory missed threshold, knots {knots}")
    return PatientState(
        patient_id=f"p{patient_idx:04d}",
        laterality=str(rng.choice(cohort.LATERALITIES)),
        base_texture_seed=int(rng.integers(2**31)),
        knots=knots,
        converter=converter,
        conversion_day=conversion_day,
        contour=(float(a), float(b), float(c)),
        lesion_x=int(rng.integers(int(0.3 * w), int(0.7 * w))),
        ripple_phase=float(rng.uniform(0, 2 * np.pi)),
    )


def render_scan(state, day, scan_index, cfg):
    """Render one pseudo-B-scan; returns (float image in [0,1], contour)."""
    h, w = cfg.image_size
    a, b, c = state.contour
    s = state.progression(day)
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    yc = a * xs * xs + b * xs + c

    image = np.zeros((h, w)) + 0.04 + 0.02 * (ys / h)
    ripple = 0.30 + 0.03 * np.sin(2 * np.pi * xs / 23.0 + state.ripple_phase)
    thickness = 16.0 + 10.0 * s
    band = (ys >= yc - thickness) & (ys < yc)
    image = np.where(band, ripple, image)
    image = np.where((ys >= yc) & (ys < yc + 2.0), 0.95, image)

    jitter_rng = np.random.default_rng(np.random.SeedSequence(
        (state.base_texture_seed, _JITTER_TAG, int(day), int(scan_index))))
    dx = jitter_rng.uniform(-2.0, 2.0)
    amplitude = LESION_BASE_AMPLITUDE + LESION_AMPLITUDE_GAIN * s
    x_l = state.lesion_x + dx
    y_l = (a * state.lesion_x ** 2 + b * state.lesion_x + c) + 12.0
    blob = amplitude * np.exp(-((xs - x_l) ** 2 / (2 * 4.0 ** 2)
                                + (ys - y_l) ** 2 / (2 * 3.0 ** 2)))
    image = image + blob * (ys >= yc + 2.0)

    if cfg.noise_sigma > 0:
        noise_rng = np.random.default_rng(np.random.SeedSequence(
            (state.base_texture_seed, _NOISE_TAG, int(day), int(scan_index))))
        image = image + noise_rng.normal(0.0, cfg.noise_sigma, size=(h, w))
    return np.clip(image, 0.0, 1.0), state.contour


def lesion_region_mean(image, state, cfg):
    """Mean intensity over the fixed window under the contour at the lesion site.

    The window tracks the eye's nominal lesion center (not the per-scan
    jitter), so the statistic is a pure function of the rendered pixels.
    """
    h, w = cfg.image_size
    a, b, c = state.contour
    y0 = int(round(a * state.lesion_x ** 2 + b * state.lesion_x + c)) + 4
    x0 = state.lesion_x
    rows = slice(max(y0, 0), min(y0 + 25, h))
    cols = slice(max(x0 - 16, 0), min(x0 + 17, w))
    return float(np.asarray(image)[rows, cols].mean())


def n_converters(n_patients, fraction):
    return int(np.floor(n_patients * fraction + 0.5))


def generate_cohort(cfg, out_dir):
    """Write images, manifest.json, and truth.json; returns (manifest, truth)."""
    cfg.validate()
    out_dir = Path(out_dir)
    assign_rng = np.random.default_rng(
        np.random.SeedSequence((cfg.seed, _ASSIGN_TAG)))
    k = n_converters(cfg.n_patients, cfg.converter_fraction)
    converter_idx = set(assign_rng.permutation(cfg.n_patients)[:k].tolist())

    patients = []
    truth = {}
    for idx in range(cfg.n_patients):
        state = _make_state(idx, idx in converter_idx, cfg)
        key = cohort.eye_id(state.patient_id, state.laterality)
        visits = []
        for v in range(cfg.visits_per_eye):
            day = v * cfg.visit_interval_days
            volume_id = f"{key}_v{v:02d}"
            scans = []
            for scan_index in range(cfg.scans_per_visit):
                image, _ = render_scan(state, day, scan_index, cfg)
                rel = f"images/{key}/{volume_id}_s{scan_index}.pgm"
                imageio.write_pgm(out_dir / rel, image)
                scans.append(rel)
            visits.append(cohort.VisitRecord(day=day, volume_id=volume_id,
                                             scans=scans))
        patients.append(cohort.PatientRecord(id=state.patient_id, eyes=[
            cohort.EyeRecord(laterality=state.laterality,
                             conversion_day=state.conversion_day,
                             visits=visits)]))
        truth[key] = {
            "knots": state.knots,
            "conversion_day": state.conversion_day,
            "contour": list(state.contour),
            "lesion_x": state.lesion_x,
        }

    manifest = cohort.CohortManifest(patients=patients, root=out_dir).validate()
    cohort.save_manifest(manifest, out_dir / "manifest.json")
    with open(out_dir / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest, truth


def load_truth(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def state_from_truth(eye_key, entry, cfg):
    """Rebuild a renderable PatientState from a truth.json entry."""
    patient_id, _ = eye_key.rsplit("_", 1)
    state = _make_state(int(patient_id[1:]), entry["conversion_day"] is not None, cfg)
    if state.knots != entry["knots"] or list(state.contour) != entry["contour"]:
        raise ValidationError(f"truth entry for {eye_key} does not match config seed")
    return state
