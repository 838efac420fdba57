"""Synthetic moving-sprite scenes with analytic ground-truth flow, the two mask
regimes (stationary and object-like), and frame-directory I/O (PPM/PGM).

Scenes are deterministic functions of their seed: a static band-limited noise
background with 1-3 hard-edged sprites translating at constant velocity.
Ground-truth flow is the sprite velocity on sprite pixels (topmost sprite wins
on overlap, and occluded background keeps the covering sprite's velocity) and
zero elsewhere.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .config import DataError
from . import serial

MASK_AREA_MIN = 0.05
MASK_AREA_MAX = 0.60
_MASK_RETRIES = 64


@dataclass
class SceneSpec:
    seed: int
    frames: int = 12
    height: int = 64
    width: int = 64
    sprite_min_size: int = 14
    sprite_max_size: int = 26
    fractional_velocities: bool = False
    max_flow: float = 10.0  # bound on per-frame displacement, full-res pixels


@dataclass
class MaskSpec:
    seed: int
    mode: str = "stationary"  # stationary | object-like


@dataclass
class Scene:
    frames: np.ndarray  # (t, h, w, 3) in [0, 1]
    flow_fwd: np.ndarray  # (t-1, h/4, w/4, 2) quarter-res, quarter-res pixels
    flow_bwd: np.ndarray
    flow_fwd_full: np.ndarray  # (t-1, h, w, 2) full-res pixels
    flow_bwd_full: np.ndarray
    sprite_cover: np.ndarray  # (t, h, w) bool, any-sprite coverage
    sprites: list = field(default_factory=list)


def _smooth_noise(rng, h, w, cells=8):
    """Band-limited background: coarse noise, bilinearly interpolated."""
    gh, gw = cells + 1, cells + 1
    grid = rng.uniform(0.15, 0.85, (gh, gw, 3))
    ys = np.linspace(0, cells, h)
    xs = np.linspace(0, cells, w)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    return g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx + g10 * fy * (1 - fx) + g11 * fy * fx


def _sprite_coverage(kind, cy, cx, size, h, w):
    """Boolean pixel coverage of a sprite centered at (cy, cx); clipped to canvas."""
    ys, xs = np.mgrid[0:h, 0:w]
    if kind == "rect":
        return (np.abs(ys - cy) <= size / 2) & (np.abs(xs - cx) <= size / 2)
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= (size / 2) ** 2


def _downsample_flow(flow_full):
    """Quarter-resolution flow: 4x4 area mean, values divided by 4."""
    t, h, w, _ = flow_full.shape
    q = flow_full.reshape(t, h // 4, 4, w // 4, 4, 2).mean(axis=(2, 4))
    return q / 4.0


def render_scene(spec):
    """Deterministic scene rendering with exact per-pixel ground-truth flow."""
    rng = np.random.default_rng(spec.seed)
    h, w, t = spec.height, spec.width, spec.frames
    background = _smooth_noise(rng, h, w)
    n_sprites = int(rng.integers(1, 4))
    sprites = []
    velocity_choices = np.array([-6, -4, -3, -2, 2, 3, 4, 6], dtype=float)
    for _ in range(n_sprites):
        kind = "rect" if rng.random() < 0.5 else "disk"
        size = int(rng.integers(spec.sprite_min_size, spec.sprite_max_size + 1))
        color = rng.uniform(0.05, 0.95, 3)
        vy, vx = rng.choice(velocity_choices, 2)
        if rng.random() < 0.3:  # axis-aligned motion is common in the mix
            if rng.random() < 0.5:
                vy = 0.0
            else:
                vx = 0.0
        if spec.fractional_velocities and rng.random() < 0.5:
            vy += rng.choice([-0.5, 0.5])
            vx += rng.choice([-0.5, 0.5])
        speed = max(abs(vy), abs(vx))
        if speed > spec.max_flow:
            scale = spec.max_flow / speed
            vy, vx = vy * scale, vx * scale
        cy = float(rng.uniform(size / 2, h - size / 2))
        cx = float(rng.uniform(size / 2, w - size / 2))
        sprites.append({"kind": kind, "size": size, "color": color, "vel": (vy, vx), "start": (cy, cx)})

    frames = np.empty((t, h, w, 3))
    cover = np.zeros((t, h, w), dtype=bool)
    velocity_map = np.zeros((t, h, w, 2))  # (dx, dy) of the topmost sprite
    for ti in range(t):
        frame = background.copy()
        for s in sprites:
            cy = s["start"][0] + ti * s["vel"][0]
            cx = s["start"][1] + ti * s["vel"][1]
            if not spec.fractional_velocities:
                cy, cx = round(cy), round(cx)
            cov = _sprite_coverage(s["kind"], cy, cx, s["size"], h, w)
            frame[cov] = s["color"]
            cover[ti] |= cov
            velocity_map[ti][cov] = (s["vel"][1], s["vel"][0])
        frames[ti] = frame

    # forward flow at frame i lives on frame i's sprite pixels; backward flow
    # (frame i+1 -> i) is the negated velocity on frame i+1's pixels
    flow_fwd_full = velocity_map[:-1].copy()
    flow_bwd_full = -velocity_map[1:].copy()
    return Scene(
        frames=frames,
        flow_fwd=_downsample_flow(flow_fwd_full),
        flow_bwd=_downsample_flow(flow_bwd_full),
        flow_fwd_full=flow_fwd_full,
        flow_bwd_full=flow_bwd_full,
        sprite_cover=cover,
        sprites=sprites,
    )


def _mask_area(mask):
    return float(mask.mean())


def _stationary_mask(rng, h, w):
    for _ in range(_MASK_RETRIES):
        mask = np.zeros((h, w))
        for _ in range(int(rng.integers(1, 3))):
            mh = int(rng.integers(h // 5, h // 2 + 1))
            mw = int(rng.integers(w // 5, w // 2 + 1))
            y0 = int(rng.integers(0, h - mh + 1))
            x0 = int(rng.integers(0, w - mw + 1))
            mask[y0 : y0 + mh, x0 : x0 + mw] = 1.0
        if MASK_AREA_MIN <= _mask_area(mask) <= MASK_AREA_MAX:
            return mask
    raise DataError("could not sample a stationary mask within area bounds")


def _blob_mask(rng, h, w, cy, cx, radius, wobble):
    ys, xs = np.mgrid[0:h, 0:w]
    theta = np.arctan2(ys - cy, xs - cx)
    r = np.hypot(ys - cy, xs - cx)
    bound = radius * (1.0 + sum(a * np.cos(k * theta + p) for k, a, p in wobble))
    return (r <= bound).astype(float)


def _object_masks(rng, t, h, w):
    for _ in range(_MASK_RETRIES):
        radius = float(rng.uniform(h / 5, h / 3))
        wobble = [(k, float(rng.uniform(0.05, 0.25)), float(rng.uniform(0, 2 * np.pi))) for k in (2, 3, 5)]
        cy = float(rng.uniform(radius, h - radius))
        cx = float(rng.uniform(radius, w - radius))
        masks = np.zeros((t, h, w))
        ok = True
        for ti in range(t):
            masks[ti] = _blob_mask(rng, h, w, cy, cx, radius, wobble)
            if not (MASK_AREA_MIN <= _mask_area(masks[ti]) <= MASK_AREA_MAX):
                ok = False
                break
            cy = float(np.clip(cy + rng.uniform(-3, 3), radius / 2, h - radius / 2))
            cx = float(np.clip(cx + rng.uniform(-3, 3), radius / 2, w - radius / 2))
        if ok:
            return masks
    raise DataError("could not sample object-like masks within area bounds")


def make_masks(spec, t, h, w):
    """(t, h, w, 1) binary corruption masks; 1 marks corrupted pixels."""
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "stationary":
        masks = np.tile(_stationary_mask(rng, h, w), (t, 1, 1))
    elif spec.mode == "object-like":
        masks = _object_masks(rng, t, h, w)
    else:
        raise DataError(f"unknown mask mode {spec.mode!r}")
    return masks[..., None]


# -- frame-directory I/O -----------------------------------------------------------

def write_ppm(path, frame):
    """8-bit binary PPM (P6); frame values in [0, 1]."""
    h, w, _ = frame.shape
    data = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm(path, mask):
    """Binary PGM (P5) with values 0 / 255; mask values in {0, 1}."""
    mask = np.asarray(mask)
    if mask.ndim == 3:
        mask = mask[..., 0]
    h, w = mask.shape
    data = (mask > 0.5).astype(np.uint8) * 255
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _read_netpbm(path, magic):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not raw.startswith(magic):
        raise DataError(f"{path}: expected {magic.decode()} file")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    return raw[pos:], h, w


def read_ppm(path):
    payload, h, w = _read_netpbm(path, b"P6")
    if len(payload) < h * w * 3:
        raise DataError(f"{path}: truncated pixel data")
    img = np.frombuffer(payload[: h * w * 3], dtype=np.uint8).reshape(h, w, 3)
    return img.astype(np.float64) / 255.0


def read_pgm(path):
    payload, h, w = _read_netpbm(path, b"P5")
    if len(payload) < h * w:
        raise DataError(f"{path}: truncated pixel data")
    img = np.frombuffer(payload[: h * w], dtype=np.uint8).reshape(h, w)
    return (img > 127).astype(np.float64)[..., None]


# -- dataset directories -------------------------------------------------------------

def generate_dataset(cfg, out_dir):
    """Render cfg.scenes scenes with frames, both mask regimes, flows, manifest."""
    os.makedirs(out_dir, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(max(cfg.scenes, 1) * 2)
    lines = [f"# flowvip dataset: scenes={cfg.scenes} frames={cfg.scene_frames} "
             f"size={cfg.frame_height}x{cfg.frame_width} seed={cfg.seed}"]
    for i in range(cfg.scenes):
        scene_dir = os.path.join(out_dir, f"scene_{i:04d}")
        os.makedirs(scene_dir, exist_ok=True)
        spec = SceneSpec(
            seed=int(seeds[2 * i]),
            frames=cfg.scene_frames,
            height=cfg.frame_height,
            width=cfg.frame_width,
            sprite_min_size=cfg.sprite_min_size,
            sprite_max_size=cfg.sprite_max_size,
            fractional_velocities=cfg.fractional_velocities,
            max_flow=cfg.max_flow * 4.0,  # config bound is at 1/4 resolution
        )
        scene = render_scene(spec)
        masks_st = make_masks(MaskSpec(seed=int(seeds[2 * i + 1]), mode="stationary"),
                              cfg.scene_frames, cfg.frame_height, cfg.frame_width)
        masks_ob = make_masks(MaskSpec(seed=int(seeds[2 * i + 1]) ^ 0x5A5A, mode="object-like"),
                              cfg.scene_frames, cfg.frame_height, cfg.frame_width)
        for ti in range(cfg.scene_frames):
            write_ppm(os.path.join(scene_dir, f"frame_{ti:03d}.ppm"), scene.frames[ti])
            write_pgm(os.path.join(scene_dir, f"mask_stationary_{ti:03d}.pgm"), masks_st[ti])
            write_pgm(os.path.join(scene_dir, f"mask_object_{ti:03d}.pgm"), masks_ob[ti])
        serial.write_records(
            os.path.join(scene_dir, "flows.bin"),
            {
                "flow_fwd": scene.flow_fwd,
                "flow_bwd": scene.flow_bwd,
                "flow_fwd_full": scene.flow_fwd_full,
                "flow_bwd_full": scene.flow_bwd_full,
            },
            meta={"scene": i, "seed": spec.seed, "frames": cfg.scene_frames},
        )
        vel = "; ".join(f"{s['kind']}{s['size']}@({s['vel'][0]:g},{s['vel'][1]:g})" for s in scene.sprites)
        lines.append(
            f"scene_{i:04d} frames={cfg.scene_frames} height={cfg.frame_height} "
            f"width={cfg.frame_width} seed={spec.seed} sprites=[{vel}]"
        )
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return out_dir


@dataclass
class LoadedScene:
    frames: np.ndarray
    masks_stationary: np.ndarray
    masks_object: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    flow_fwd_full: np.ndarray
    flow_bwd_full: np.ndarray


def scene_dirs(data_dir):
    manifest = os.path.join(data_dir, "manifest.txt")
    if not os.path.isfile(manifest):
        raise DataError(f"no manifest.txt under {data_dir}; run the gen command first")
    dirs = []
    with open(manifest, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            dirs.append(os.path.join(data_dir, line.split()[0]))
    return dirs


def load_scene(scene_dir):
    frames, masks_st, masks_ob = [], [], []
    ti = 0
    while True:
        frame_path = os.path.join(scene_dir, f"frame_{ti:03d}.ppm")
        if not os.path.isfile(frame_path):
            break
        frames.append(read_ppm(frame_path))
        masks_st.append(read_pgm(os.path.join(scene_dir, f"mask_stationary_{ti:03d}.pgm")))
        masks_ob.append(read_pgm(os.path.join(scene_dir, f"mask_object_{ti:03d}.pgm")))
        ti += 1
    if not frames:
        raise DataError(f"no frames found in {scene_dir}")
    flows, _, _ = serial.read_records(os.path.join(scene_dir, "flows.bin"))
    return LoadedScene(
        frames=np.stack(frames),
        masks_stationary=np.stack(masks_st),
        masks_object=np.stack(masks_ob),
        flow_fwd=flows["flow_fwd"],
        flow_bwd=flows["flow_bwd"],
        flow_fwd_full=flows["flow_fwd_full"],
        flow_bwd_full=flows["flow_bwd_full"],
    )
