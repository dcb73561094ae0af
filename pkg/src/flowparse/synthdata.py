"""Deterministic synthetic videos of articulated person-like figures.

Each instance is a torso rectangle with a head disk and optional swinging
limbs/hat, moving along a straight path with slow spin.  Every part is a
rigid region with a closed-form pose per frame, so optical flow between
any two frames is exact, not estimated.  The generator writes:

    manifest.json                  frame list, dims, class names, geometry
    frames/%05d.t1                 (3,H,W) float tensors in [0,1]
    labels/%05d_inst.pgm           instance ids (0 = background)
    labels/%05d_part.pgm           part class ids (0 = background)
    flow/%05d_%05d.t1              (2,H,W) backward flow for the pair
                                   (t, t+1): frame t+1's pixel p maps to
                                   frame t position p + flow[p]
    valid/%05d.pgm                 255 where that pair's flow is valid
                                   (same rigid region visible in both
                                   frames), 0 at occlusions/revelations

Directories are byte-identical across runs with the same configuration.
Appearance degradation (blur + noise on chosen frames) emulates motion
blur and defocus; geometry labels and flow always stay clean.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import tensorio
from .errors import ContractViolation, DataError
from .flow import Frame

CLASS_NAMES = ["background", "head", "torso", "arm", "leg", "hat"]
NUM_PART_CLASSES = len(CLASS_NAMES) - 1

_PALETTE = {
    1: (0.92, 0.76, 0.62),  # head
    2: (0.25, 0.45, 0.85),  # torso
    3: (0.85, 0.33, 0.27),  # arm
    4: (0.33, 0.72, 0.35),  # leg
    5: (0.90, 0.83, 0.25),  # hat
}


@dataclass
class SyntheticScene:
    seed: int = 0
    num_frames: int = 12
    height: int = 64
    width: int = 64
    num_instances: int = 2
    max_velocity: float = 3.0      # torso translation, pixels per frame
    max_spin: float = 0.03         # torso rotation, radians per frame
    max_swing: float = 0.25        # limb swing amplitude, radians
    parts_range: tuple = (4, 7)    # regions per instance, within [3, 7]
    velocity_quantum: float = 0.0  # > 0: velocities snap to multiples, no spin/swing
    degrade_frames: tuple = ()     # frame indices that get blur + noise
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ContractViolation(
                f"resolution {(self.height, self.width)} must be multiples of 4"
            )
        if not 1 <= self.num_instances <= 4:
            raise ContractViolation("instance count must be in [1, 4]")
        if self.num_frames < 1:
            raise ContractViolation("need at least one frame")
        lo, hi = self.parts_range
        if not (3 <= lo <= hi <= 7):
            raise ContractViolation("parts_range must lie within [3, 7]")

    def flow_bound(self) -> float:
        """Upper bound on per-pair flow magnitude implied by the motion model."""
        reach = 0.45 * min(self.height, self.width)  # farthest part pixel from center
        return np.sqrt(2.0) * self.max_velocity + (self.max_spin + 2 * self.max_swing) * reach


@dataclass
class _Region:
    """One rigid body part: a shape in local coordinates plus its pose chain."""

    instance: int
    part_class: int
    shape: str               # "disk" or "rect"
    params: list             # disk: [cx, cy, r]; rect: [x0, y0, x1, y1]
    joint: list              # attachment offset in torso coordinates
    swing_amp: float = 0.0
    swing_freq: float = 0.0
    swing_phase: float = 0.0


@dataclass
class _Motion:
    """Straight-line torso path with constant spin."""

    origin: list             # position at t = 0
    velocity: list
    angle0: float
    spin: float


def _rot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def _region_pose(region: _Region, motion: _Motion, t: float):
    """World pose (angle, translation) of a region at frame t."""
    theta = motion.angle0 + motion.spin * t
    swing = region.swing_amp * np.sin(2.0 * np.pi * region.swing_freq * t + region.swing_phase)
    trans = np.asarray(motion.origin) + np.asarray(motion.velocity) * t
    trans = trans + _rot(theta) @ np.asarray(region.joint)
    return theta + swing, trans


def _membership(region: _Region, motion: _Motion, t: float, grid_xy):
    angle, trans = _region_pose(region, motion, t)
    rel = grid_xy - trans[:, None, None]
    inv = _rot(-angle)
    qx = inv[0, 0] * rel[0] + inv[0, 1] * rel[1]
    qy = inv[1, 0] * rel[0] + inv[1, 1] * rel[1]
    if region.shape == "disk":
        cx, cy, r = region.params
        return (qx - cx) ** 2 + (qy - cy) ** 2 <= r * r
    x0, y0, x1, y1 = region.params
    return (qx >= x0) & (qx <= x1) & (qy >= y0) & (qy <= y1)


def _build_instance(rng, scene: SyntheticScene, instance_id: int):
    """Random articulated figure with its motion; all sizes scale with the frame."""
    s = min(scene.height, scene.width) / 64.0
    tw, th = 4.5 * s + rng.uniform(0, 2 * s), 7.0 * s + rng.uniform(0, 2 * s)
    head_r = 3.0 * s + rng.uniform(0, s)
    leg_len, leg_w = 6.5 * s + rng.uniform(0, 2 * s), 1.6 * s
    arm_len, arm_w = 5.5 * s + rng.uniform(0, 1.5 * s), 1.3 * s

    n_parts = int(rng.integers(scene.parts_range[0], scene.parts_range[1] + 1))

    if scene.velocity_quantum > 0:
        steps = int(scene.max_velocity // scene.velocity_quantum)
        vel = scene.velocity_quantum * rng.integers(-steps, steps + 1, size=2).astype(np.float64)
        spin = 0.0
        swing = 0.0
    else:
        vel = rng.uniform(-scene.max_velocity, scene.max_velocity, size=2)
        spin = rng.uniform(-scene.max_spin, scene.max_spin)
        swing = scene.max_swing

    # keep the whole path inside the frame with a margin for the body extent
    reach = th + leg_len + head_r + 2.0
    tmax = scene.num_frames - 1
    origin = np.empty(2)
    for axis, size in enumerate((scene.width, scene.height)):
        lo = reach + max(0.0, -vel[axis] * tmax)
        hi = size - reach - max(0.0, vel[axis] * tmax)
        if hi <= lo:  # motion too fast for this frame size; park in the middle
            vel[axis] = 0.0
            lo, hi = reach, size - reach
            if hi <= lo:
                lo = hi = size / 2.0
        origin[axis] = rng.uniform(lo, hi) if hi > lo else lo

    motion = _Motion(
        origin=list(origin),
        velocity=list(vel),
        angle0=float(rng.uniform(-0.3, 0.3)) if scene.velocity_quantum == 0 else 0.0,
        spin=float(spin),
    )

    def swing_of(phase):
        if swing == 0.0:
            return dict(swing_amp=0.0, swing_freq=0.0, swing_phase=0.0)
        return dict(
            swing_amp=float(rng.uniform(0.4, 1.0) * swing),
            swing_freq=float(rng.uniform(0.08, 0.18)),
            swing_phase=float(phase),
        )

    # paint order: limbs first, then torso, head, hat (later entries in front)
    regions = []
    if n_parts >= 4:
        regions.append(_Region(instance_id, 4, "rect", [-leg_w, 0.0, leg_w, leg_len],
                               [-tw * 0.55, th], **swing_of(0.0)))
        regions.append(_Region(instance_id, 4, "rect", [-leg_w, 0.0, leg_w, leg_len],
                               [tw * 0.55, th], **swing_of(np.pi)))
    else:
        regions.append(_Region(instance_id, 4, "rect", [-tw * 0.8, 0.0, tw * 0.8, leg_len],
                               [0.0, th]))
    if n_parts >= 6:
        regions.append(_Region(instance_id, 3, "rect", [-arm_w, 0.0, arm_w, arm_len],
                               [-tw * 1.05, -th * 0.7], **swing_of(np.pi / 2)))
        regions.append(_Region(instance_id, 3, "rect", [-arm_w, 0.0, arm_w, arm_len],
                               [tw * 1.05, -th * 0.7], **swing_of(3 * np.pi / 2)))
    regions.append(_Region(instance_id, 2, "rect", [-tw, -th, tw, th], [0.0, 0.0]))
    regions.append(_Region(instance_id, 1, "disk", [0.0, 0.0, head_r],
                           [0.0, -(th + head_r * 0.9)]))
    if n_parts in (5, 7):
        regions.append(_Region(instance_id, 5, "rect",
                               [-head_r * 1.1, -head_r * 0.7, head_r * 1.1, 0.0],
                               [0.0, -(th + head_r * 1.8)]))

    texture = {
        "brightness": float(rng.uniform(0.75, 1.0)),
        "freq_x": float(rng.uniform(0.5, 1.4)),
        "freq_y": float(rng.uniform(0.5, 1.4)),
        "phase": float(rng.uniform(0, 2 * np.pi)),
        "amp": float(rng.uniform(0.10, 0.22)),
    }
    return regions, motion, texture


class SceneGeometry:
    """Shared by the generator and the loader: renders label maps, images
    and exact flow from the serialized geometry."""

    def __init__(self, height, width, instances):
        self.height = height
        self.width = width
        # instances: list of (regions, motion, texture); regions already in paint order
        self.instances = instances
        ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
        self._grid = np.stack([xs, ys])
        self._flat_regions = []
        for regions, motion, _tex in instances:
            for r in regions:
                self._flat_regions.append((r, motion))
        self._map_cache = {}

    def maps_at(self, t: int):
        """(region_map, inst_map, part_map); region ids are 1-based paint order."""
        cached = self._map_cache.get(t)
        if cached is not None:
            return cached
        H, W = self.height, self.width
        region_map = np.zeros((H, W), dtype=np.int32)
        inst_map = np.zeros((H, W), dtype=np.uint8)
        part_map = np.zeros((H, W), dtype=np.uint8)
        for idx, (region, motion) in enumerate(self._flat_regions):
            mask = _membership(region, motion, t, self._grid)
            region_map[mask] = idx + 1
            inst_map[mask] = region.instance
            part_map[mask] = region.part_class
        self._map_cache[t] = (region_map, inst_map, part_map)
        return self._map_cache[t]

    def render_image(self, t: int) -> np.ndarray:
        """Clean (3,H,W) appearance in [0,1]; texture rides each part rigidly."""
        H, W = self.height, self.width
        region_map, _inst, _part = self.maps_at(t)
        img = np.empty((3, H, W))
        gx, gy = self._grid[0] / W, self._grid[1] / H
        base = 0.12 + 0.05 * np.sin(2 * np.pi * gx) * np.cos(2 * np.pi * gy)
        img[0] = base
        img[1] = base * 1.08
        img[2] = base * 1.22
        textures = {}
        for i, (regions, motion, tex) in enumerate(self.instances):
            for r in regions:
                textures[id(r)] = tex
        for idx, (region, motion) in enumerate(self._flat_regions):
            mask = region_map == idx + 1
            if not mask.any():
                continue
            angle, trans = _region_pose(region, motion, t)
            rel = self._grid - trans[:, None, None]
            inv = _rot(-angle)
            qx = inv[0, 0] * rel[0] + inv[0, 1] * rel[1]
            qy = inv[1, 0] * rel[0] + inv[1, 1] * rel[1]
            tex = textures[id(region)]
            wave = 1.0 + tex["amp"] * np.sin(tex["freq_x"] * qx + tex["freq_y"] * qy + tex["phase"])
            color = _PALETTE[region.part_class]
            for c in range(3):
                img[c][mask] = np.clip(color[c] * tex["brightness"] * wave[mask], 0.0, 1.0)
        return img

    def flow_between(self, target_t: int, reference_t: int) -> np.ndarray:
        """Exact backward flow: target pixel p came from p + flow[p] in the
        reference frame.  Background pixels carry zero flow."""
        region_map, _, _ = self.maps_at(target_t)
        flow = np.zeros((2, self.height, self.width))
        for idx, (region, motion) in enumerate(self._flat_regions):
            mask = region_map == idx + 1
            if not mask.any():
                continue
            ang_i, tr_i = _region_pose(region, motion, target_t)
            ang_j, tr_j = _region_pose(region, motion, reference_t)
            px = self._grid[0][mask] - tr_i[0]
            py = self._grid[1][mask] - tr_i[1]
            inv = _rot(-ang_i)
            qx = inv[0, 0] * px + inv[0, 1] * py
            qy = inv[1, 0] * px + inv[1, 1] * py
            fwd = _rot(ang_j)
            sx = fwd[0, 0] * qx + fwd[0, 1] * qy + tr_j[0]
            sy = fwd[1, 0] * qx + fwd[1, 1] * qy + tr_j[1]
            flow[0][mask] = sx - self._grid[0][mask]
            flow[1][mask] = sy - self._grid[1][mask]
        return flow

    def valid_mask(self, target_t: int, reference_t: int) -> np.ndarray:
        """True where the flow's source lands on the same rigid region (or
        background on background) inside the reference frame."""
        region_map, _, _ = self.maps_at(target_t)
        ref_map, _, _ = self.maps_at(reference_t)
        flow = self.flow_between(target_t, reference_t)
        sx = np.rint(self._grid[0] + flow[0]).astype(np.intp)
        sy = np.rint(self._grid[1] + flow[1]).astype(np.intp)
        inb = (sx >= 0) & (sx < self.width) & (sy >= 0) & (sy < self.height)
        sxc = np.clip(sx, 0, self.width - 1)
        syc = np.clip(sy, 0, self.height - 1)
        same = ref_map[syc, sxc] == region_map
        return inb & same


def _geometry_to_manifest(geom: SceneGeometry):
    out = []
    for regions, motion, tex in geom.instances:
        out.append({
            "motion": {
                "origin": motion.origin, "velocity": motion.velocity,
                "angle0": motion.angle0, "spin": motion.spin,
            },
            "texture": tex,
            "regions": [
                {
                    "instance": r.instance, "part_class": r.part_class,
                    "shape": r.shape, "params": list(map(float, r.params)),
                    "joint": list(map(float, r.joint)),
                    "swing_amp": r.swing_amp, "swing_freq": r.swing_freq,
                    "swing_phase": r.swing_phase,
                }
                for r in regions
            ],
        })
    return out


def _geometry_from_manifest(height, width, blob) -> SceneGeometry:
    instances = []
    for inst in blob:
        motion = _Motion(**inst["motion"])
        regions = [_Region(**r) for r in inst["regions"]]
        instances.append((regions, motion, inst["texture"]))
    return SceneGeometry(height, width, instances)


def generate(scene: SyntheticScene, out_dir) -> Path:
    """Render the scene to a dataset directory. Deterministic per config."""
    out = Path(out_dir)
    rng = np.random.default_rng(scene.seed)
    instances = [_build_instance(rng, scene, i + 1) for i in range(scene.num_instances)]
    geom = SceneGeometry(scene.height, scene.width, instances)

    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    (out / "flow").mkdir(exist_ok=True)
    (out / "valid").mkdir(exist_ok=True)

    degrade = set(int(i) for i in scene.degrade_frames)
    for t in range(scene.num_frames):
        img = geom.render_image(t)
        if t in degrade:
            if scene.blur_sigma > 0:
                for c in range(3):
                    img[c] = gaussian_filter(img[c], scene.blur_sigma, mode="nearest")
            if scene.noise_sigma > 0:
                img = img + rng.normal(0.0, scene.noise_sigma, size=img.shape)
            img = np.clip(img, 0.0, 1.0)
        tensorio.write_tensor(out / "frames" / f"{t:05d}.t1", img)
        _region, inst_map, part_map = geom.maps_at(t)
        tensorio.write_pgm(out / "labels" / f"{t:05d}_inst.pgm", inst_map)
        tensorio.write_pgm(out / "labels" / f"{t:05d}_part.pgm", part_map)

    for t in range(scene.num_frames - 1):
        flow = geom.flow_between(t + 1, t)
        tensorio.write_tensor(out / "flow" / f"{t:05d}_{t + 1:05d}.t1", flow)
        valid = geom.valid_mask(t + 1, t).astype(np.uint8) * 255
        tensorio.write_pgm(out / "valid" / f"{t:05d}.pgm", valid)

    manifest = {
        "format": "flowparse-dataset-v1",
        "num_frames": scene.num_frames,
        "dims": {"height": scene.height, "width": scene.width, "channels": 3},
        "frames": [f"frames/{t:05d}.t1" for t in range(scene.num_frames)],
        "class_names": CLASS_NAMES,
        "geometry": _geometry_to_manifest(geom),
        "config": {
            "seed": scene.seed,
            "num_instances": scene.num_instances,
            "max_velocity": scene.max_velocity,
            "max_spin": scene.max_spin,
            "max_swing": scene.max_swing,
            "parts_range": list(scene.parts_range),
            "velocity_quantum": scene.velocity_quantum,
            "degrade_frames": sorted(degrade),
            "blur_sigma": scene.blur_sigma,
            "noise_sigma": scene.noise_sigma,
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


class Dataset:
    """Reader for generated dataset directories.

    Serves frames, label maps, stored per-pair flow, and exact analytic
    flow between arbitrary frame pairs (reconstructed from the manifest's
    geometry block).
    """

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no dataset manifest at {manifest_path}")
        self.manifest = json.loads(manifest_path.read_text())
        if self.manifest.get("format") != "flowparse-dataset-v1":
            raise DataError(f"unrecognized dataset format in {manifest_path}")
        self.num_frames = int(self.manifest["num_frames"])
        self.height = int(self.manifest["dims"]["height"])
        self.width = int(self.manifest["dims"]["width"])
        self.class_names = list(self.manifest["class_names"])
        self.geometry = _geometry_from_manifest(
            self.height, self.width, self.manifest["geometry"]
        )
        self._frames = {}

    @property
    def num_part_classes(self) -> int:
        return len(self.class_names) - 1

    def frame(self, t: int) -> Frame:
        if t not in self._frames:
            img = tensorio.read_tensor(self.root / "frames" / f"{t:05d}.t1")
            self._frames[t] = Frame(index=t, image=img)
        return self._frames[t]

    def part_labels(self, t: int) -> np.ndarray:
        return tensorio.read_pgm(self.root / "labels" / f"{t:05d}_part.pgm")

    def instance_labels(self, t: int) -> np.ndarray:
        return tensorio.read_pgm(self.root / "labels" / f"{t:05d}_inst.pgm")

    def stored_flow(self, t: int) -> np.ndarray:
        """Stored flow for the consecutive pair (t, t+1)."""
        return tensorio.read_tensor(self.root / "flow" / f"{t:05d}_{t + 1:05d}.t1")

    def valid_mask(self, t: int) -> np.ndarray:
        return tensorio.read_pgm(self.root / "valid" / f"{t:05d}.pgm") > 127

    def flow_between(self, target_t: int, reference_t: int) -> np.ndarray:
        """Exact flow for any pair, from the manifest's motion model."""
        return self.geometry.flow_between(target_t, reference_t)

    def gt_instances(self, t: int):
        """Ground-truth instances for one frame: box, binary mask, part map."""
        inst_map = self.instance_labels(t)
        part_map = self.part_labels(t)
        out = []
        for k in range(1, inst_map.max() + 1):
            mask = inst_map == k
            if not mask.any():
                continue  # fully occluded in this frame
            ys, xs = np.nonzero(mask)
            box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
            out.append({
                "instance": k,
                "box": box,
                "mask": mask,
                "parts": np.where(mask, part_map, 0).astype(np.uint8),
            })
        return out
