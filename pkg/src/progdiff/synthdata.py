"""Synthetic longitudinal cohort: soft-edged anatomical regions on a
noisy background, with region radii drifting linearly in age so that
"atrophy" regions shrink and "fluid" regions grow per subject.

Persistence: one directory per subject holding one image and one mask
file per visit, both in a small self-describing binary format, plus JSON
metadata; splits are by subject, never by visit.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

REGION_ORDER = ("hippocampus", "amygdala", "lat_ventricle", "thalamus", "csf")
SHRINK = ("hippocampus", "amygdala", "thalamus")
GROW = ("lat_ventricle", "csf")

IMG_MAGIC = b"MBIM"

# age deltas are fed to the model in decades
AGE_SCALE = 10.0


class Geometry:
    """Canonical region layout, scaled to the target image size."""

    def __init__(self, image_size=32, noise_amp=0.02,
                 edge_width=0.6, jitter=0.7):
        self.image_size = int(image_size)
        self.noise_amp = float(noise_amp)
        self.edge_width = float(edge_width)
        self.jitter = float(jitter)
        s = self.image_size / 32.0
        self.scale = s
        self.brain_center = (16.0 * s, 16.0 * s)
        self.brain_radius = 12.5 * s
        self.csf_width = 1.3 * s
        self.csf_drift = 0.5    # csf ring thickens at half the disc rate
        # (row, col, radius, intensity) in canonical 32-pixel units
        self.discs = {
            "lat_ventricle": (12.6 * s, 16.0 * s, 2.1 * s, 0.85),
            "thalamus": (17.8 * s, 16.0 * s, 2.2 * s, 0.85),
            "hippocampus": (20.0 * s, 11.6 * s, 2.2 * s, 0.85),
            "amygdala": (20.0 * s, 20.4 * s, 1.9 * s, 0.85),
        }
        self.csf_intensity = 0.7
        self.tissue = 0.35
        self.background = 0.05

    def to_dict(self):
        return {"image_size": self.image_size, "noise_amp": self.noise_amp,
                "edge_width": self.edge_width, "jitter": self.jitter}


class Subject:
    def __init__(self, sid, sex, baseline_age, progression_rate,
                 visits, masks):
        self.id = sid
        self.sex = int(sex)
        self.baseline_age = float(baseline_age)
        self.progression_rate = float(progression_rate)
        self.visits = visits          # list of (age, image)
        self.masks = masks            # list of dict region -> bool (H,W)
        if len(visits) < 2:
            raise ValueError(f"subject {sid}: needs >= 2 visits")
        ages = [a for a, _ in visits]
        if any(b <= a for a, b in zip(ages, ages[1:])):
            raise ValueError(f"subject {sid}: ages must strictly increase")

    def ages(self):
        return [a for a, _ in self.visits]

    def pairs(self):
        """Consecutive-visit training pairs.

        Yields (prior_image, age_delta normalized to decades, sex,
        target_image, target_visit_index)."""
        for k in range(len(self.visits) - 1):
            a0, img0 = self.visits[k]
            a1, img1 = self.visits[k + 1]
            yield img0, (a1 - a0) / AGE_SCALE, self.sex, img1, k + 1


def _smooth_disc(dist, radius, width):
    """1 inside, 0 outside, smoothstep across [radius-w, radius+w]."""
    t = np.clip((radius + width - dist) / (2.0 * width), 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def generate_subject(seed, index, geom: Geometry, n_visits=5,
                     rate_range=(0.06, 0.16)):
    """Deterministic subject from (seed, index); raises if the drifted
    geometry would leave the brain disc."""
    rng = np.random.default_rng((int(seed), int(index)))
    size = geom.image_size
    sid = f"s{index:04d}"
    sex = int(rng.integers(0, 2))
    baseline_age = float(rng.uniform(60.0, 75.0))
    rate = float(rng.uniform(*rate_range)) * geom.scale
    gaps = rng.uniform(0.9, 1.9, n_visits - 1)
    ages = baseline_age + np.concatenate([[0.0], np.cumsum(gaps)])

    jit = geom.jitter
    centers = {}
    radii = {}
    for name, (r, c, rad, _) in geom.discs.items():
        centers[name] = (r + rng.uniform(-jit, jit),
                         c + rng.uniform(-jit, jit))
        radii[name] = rad + rng.uniform(-0.25, 0.25) * geom.scale

    max_span = ages[-1] - ages[0]
    max_drift = rate * max_span
    inner = geom.brain_radius - geom.csf_width - geom.csf_drift * max_drift
    for name in geom.discs:
        direction = 1.0 if name in GROW else -1.0
        worst = radii[name] + max(0.0, direction) * max_drift
        cy, cx = centers[name]
        off = np.hypot(cy - geom.brain_center[0], cx - geom.brain_center[1])
        if off + worst >= inner - 2.0 * geom.edge_width:
            raise ValueError(
                f"subject {sid}: region {name} overflows the brain disc")

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    d_brain = np.hypot(yy - geom.brain_center[0], xx - geom.brain_center[1])

    visits = []
    masks = []
    for k, age in enumerate(ages):
        drift = rate * (age - ages[0])
        img = np.full((size, size), geom.background)
        w_brain = _smooth_disc(d_brain, geom.brain_radius, geom.edge_width)
        img = img * (1 - w_brain) + geom.tissue * w_brain

        csf_outer = geom.brain_radius
        csf_inner = geom.brain_radius - geom.csf_width \
            - geom.csf_drift * drift
        w_csf = (_smooth_disc(d_brain, csf_outer, geom.edge_width)
                 - _smooth_disc(d_brain, csf_inner, geom.edge_width))
        w_csf = np.clip(w_csf, 0.0, 1.0)
        img = img * (1 - w_csf) + geom.csf_intensity * w_csf

        disc_raw = {}
        for name, (_, _, _, intensity) in geom.discs.items():
            cy, cx = centers[name]
            direction = 1.0 if name in GROW else -1.0
            rad = radii[name] + direction * drift
            d = np.hypot(yy - cy, xx - cx)
            w = _smooth_disc(d, rad, geom.edge_width)
            img = img * (1 - w) + intensity * w
            disc_raw[name] = d <= rad

        # masks are painted with shrinking regions taking priority, so
        # they stay pairwise disjoint and per-region monotone even if a
        # drifted disc grazes a neighbor
        vmask = {}
        occupied = np.zeros((size, size), dtype=bool)
        for name in ("hippocampus", "amygdala", "thalamus",
                     "lat_ventricle"):
            vmask[name] = disc_raw[name] & ~occupied
            occupied |= vmask[name]
        vmask["csf"] = ((d_brain <= csf_outer) & (d_brain > csf_inner)
                        & ~occupied)

        noise = rng.uniform(-geom.noise_amp, geom.noise_amp, (size, size))
        img = np.clip(img + noise, 0.0, 1.0)
        # images live on disk as float32; freeze that now so the
        # persistence roundtrip is the identity
        img = np.float64(np.float32(img))
        visits.append((float(age), img))
        masks.append({r: vmask[r] for r in REGION_ORDER})

    return Subject(sid, sex, baseline_age, rate, visits, masks)


def generate_cohort(seed, n_subjects, geom: Geometry, n_visits=5):
    return [generate_subject(seed, i, geom, n_visits)
            for i in range(n_subjects)]


def brain_mask(image):
    """Foreground: everything meaningfully above the background level."""
    return np.asarray(image) > 0.2


# ---------------------------------------------------------------------------
# persistence

def write_image(path, image):
    image = np.asarray(image)
    h, w = image.shape
    payload = IMG_MAGIC + struct.pack("<II", h, w) + \
        np.ascontiguousarray(image, dtype="<f4").tobytes()
    _atomic_write(path, payload)


def read_image(path):
    buf = _read_file(path)
    h, w = _check_header(path, buf)
    want = 12 + 4 * h * w
    if len(buf) != want:
        raise ValueError(f"{path}: expected {want} bytes, got {len(buf)} "
                         f"(truncated at offset {min(len(buf), want)})")
    data = np.frombuffer(buf, dtype="<f4", count=h * w, offset=12)
    return data.astype(np.float64).reshape(h, w)


def write_masks(path, mask_dict):
    first = mask_dict[REGION_ORDER[0]]
    h, w = first.shape
    payload = bytearray(IMG_MAGIC + struct.pack("<II", h, w))
    for name in REGION_ORDER:
        m = np.asarray(mask_dict[name])
        if m.shape != (h, w):
            raise ValueError(f"mask {name}: shape {m.shape} != {(h, w)}")
        payload += m.astype(np.uint8).tobytes()
    _atomic_write(path, bytes(payload))


def read_masks(path):
    buf = _read_file(path)
    h, w = _check_header(path, buf)
    want = 12 + h * w * len(REGION_ORDER)
    if len(buf) != want:
        raise ValueError(f"{path}: expected {want} bytes, got {len(buf)} "
                         f"(truncated at offset {min(len(buf), want)})")
    out = {}
    for i, name in enumerate(REGION_ORDER):
        off = 12 + i * h * w
        out[name] = np.frombuffer(buf, dtype=np.uint8, count=h * w,
                                  offset=off).reshape(h, w).astype(bool)
    return out


def _check_header(path, buf):
    if len(buf) < 12:
        raise ValueError(f"{path}: truncated header at offset {len(buf)}")
    if buf[:4] != IMG_MAGIC:
        raise ValueError(f"{path}: bad magic at offset 0")
    return struct.unpack("<II", buf[4:12])


def _read_file(path):
    with open(path, "rb") as f:
        return f.read()


def _atomic_write(path, payload):
    tmp = f"{path}.tmp-{os.getpid()}"
    try:
        with open(tmp, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_dataset(path, subjects):
    root = os.path.join(path, "subjects")
    os.makedirs(root, exist_ok=True)
    for s in subjects:
        d = os.path.join(root, s.id)
        os.makedirs(d, exist_ok=True)
        for k, (age, img) in enumerate(s.visits):
            write_image(os.path.join(d, f"visit_{k}.img"), img)
            write_masks(os.path.join(d, f"visit_{k}.masks"), s.masks[k])
        meta = {"id": s.id, "sex": s.sex, "baseline_age": s.baseline_age,
                "progression_rate": s.progression_rate, "ages": s.ages()}
        _atomic_write(os.path.join(d, "meta.json"),
                      json.dumps(meta, sort_keys=True, indent=1).encode())


def read_dataset(path):
    root = os.path.join(path, "subjects")
    if not os.path.isdir(root):
        raise FileNotFoundError(f"{root}: no subjects directory")
    subjects = []
    for sid in sorted(os.listdir(root)):
        d = os.path.join(root, sid)
        with open(os.path.join(d, "meta.json"), "rb") as f:
            meta = json.loads(f.read().decode())
        visits = []
        masks = []
        for k, age in enumerate(meta["ages"]):
            img = read_image(os.path.join(d, f"visit_{k}.img"))
            visits.append((float(age), img))
            masks.append(read_masks(os.path.join(d, f"visit_{k}.masks")))
        subjects.append(Subject(meta["id"], meta["sex"],
                                meta["baseline_age"],
                                meta["progression_rate"], visits, masks))
    return subjects


# ---------------------------------------------------------------------------
# splits

class DatasetManifest:
    def __init__(self, train, val, test, seed, geometry):
        self.train = list(train)
        self.val = list(val)
        self.test = list(test)
        self.seed = int(seed)
        self.geometry = dict(geometry)

    def split(self, name):
        return {"train": self.train, "val": self.val,
                "test": self.test}[name]

    def to_dict(self):
        return {"train": self.train, "val": self.val, "test": self.test,
                "seed": self.seed, "geometry": self.geometry}

    @classmethod
    def from_dict(cls, d):
        return cls(d["train"], d["val"], d["test"], d["seed"],
                   d["geometry"])


def make_splits(subjects, seed, geometry=None) -> DatasetManifest:
    """7:1:2 split by subject, remainder to train, seed-deterministic."""
    ids = [s.id for s in subjects]
    if len(ids) < 10:
        raise ValueError(f"make_splits: need >= 10 subjects, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise ValueError("make_splits: duplicate subject ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n = len(ids)
    n_val = n // 10
    n_test = (2 * n) // 10
    n_train = n - n_val - n_test
    return DatasetManifest(shuffled[:n_train],
                           shuffled[n_train:n_train + n_val],
                           shuffled[n_train + n_val:],
                           seed, geometry.to_dict() if geometry else {})


def write_manifest(path, manifest: DatasetManifest):
    _atomic_write(path, json.dumps(manifest.to_dict(), sort_keys=True,
                                   indent=1).encode())


def read_manifest(path):
    with open(path, "rb") as f:
        return DatasetManifest.from_dict(json.loads(f.read().decode()))
