"""Synthetic rain rendering and paired-dataset management.

Two composition models are supported:

* additive:  O = clamp(B + S, 0, 1)
* heavy:     O = clamp(t * (B + sum_i S_i * R) + (1 - t) * A, 0, 1)

where B is the clean background, S_i are streak layers, R is a binary
rain-region mask, t is the atmospheric transmittance and A the ambient
atmospheric light.  Everything here is plain numpy (float64, HWC layout,
values in [0, 1]) and fully deterministic given the seeds.
"""

import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np
from PIL import Image
from scipy import ndimage

MANIFEST_FORMAT = "dpaf-dataset/1"
MANIFEST_NAME = "manifest.json"


@dataclass
class StreakLayer:
    """A single rain-streak layer: bright elongated streaks in one direction."""

    pixels: np.ndarray          # H x W, values in [0, intensity]
    direction_deg: float
    density: float
    length_px: int
    intensity: float
    seed: int


@dataclass
class RainParams:
    """Parameters of the heavy-rain composition model.

    ``transmittance`` is the atmospheric propagation factor (1 = no haze),
    ``atmospheric_light`` the per-channel ambient light, and ``region_mask``
    a binary H x W map selecting where streaks appear.
    """

    transmittance: float
    layers: list = field(default_factory=list)
    region_mask: np.ndarray = None
    atmospheric_light: np.ndarray = None

    def validate(self, spatial_shape):
        if not 0.0 <= self.transmittance <= 1.0:
            raise ValueError(f"transmittance must be in [0, 1], got {self.transmittance}")
        if not self.layers:
            raise ValueError("RainParams.layers must be nonempty")
        for layer in self.layers:
            if layer.pixels.shape != spatial_shape:
                raise ValueError(
                    f"streak layer shape {layer.pixels.shape} does not match image {spatial_shape}")
        if self.region_mask.shape != spatial_shape:
            raise ValueError(
                f"region mask shape {self.region_mask.shape} does not match image {spatial_shape}")
        if not np.all((self.region_mask == 0.0) | (self.region_mask == 1.0)):
            raise ValueError("region mask entries must be 0 or 1")


@dataclass
class RainyPair:
    """A (rainy, clean) image pair plus the parameters that produced it."""

    rainy: np.ndarray           # H x W x 3
    clean: np.ndarray           # H x W x 3
    params: RainParams
    seed: int


@dataclass
class RainRanges:
    """Sampling ranges for random rain parameters (inclusive low/high)."""

    direction_deg: tuple = (60.0, 120.0)
    density: tuple = (0.01, 0.06)
    length_px: tuple = (5, 13)
    intensity: tuple = (0.4, 1.0)
    n_layers: tuple = (1, 3)
    transmittance: tuple = (0.8, 1.0)
    atmospheric_light: tuple = (0.7, 1.0)
    region_coverage: tuple = (0.7, 1.0)

    def to_dict(self):
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown rain range keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) for k, v in d.items()}
        return cls(**kwargs)


def line_kernel(length_px, direction_deg):
    """Normalized motion-blur kernel: a line of `length_px` samples through the
    kernel center at `direction_deg` (0 = horizontal, measured counterclockwise
    with image rows running downward).  Samples are splatted bilinearly so
    non-axis-aligned angles stay smooth."""
    if length_px < 1:
        raise ValueError(f"length_px must be >= 1, got {length_px}")
    k = int(length_px)
    kernel = np.zeros((k, k), dtype=np.float64)
    c = (k - 1) / 2.0
    theta = np.deg2rad(direction_deg)
    dx, dy = np.cos(theta), -np.sin(theta)
    for i in range(k):
        t = i - (k - 1) / 2.0
        x = c + t * dx
        y = c + t * dy
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for oy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
            for ox, wx in ((x0, 1 - fx), (x0 + 1, fx)):
                if 0 <= oy < k and 0 <= ox < k and wy * wx > 0:
                    kernel[oy, ox] += wy * wx
    return kernel / kernel.sum()


def render_streak_layer(shape, direction_deg, density, length_px, intensity, seed):
    """Render a streak layer: salt noise at `density`, blurred along
    `direction_deg` by a line kernel of `length_px`, rescaled so the brightest
    pixel equals `intensity`.  Deterministic given `seed`."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must be in [0, 1], got {density}")
    if length_px < 1:
        raise ValueError(f"length_px must be >= 1, got {length_px}")
    if not 0.0 < intensity <= 1.0:
        raise ValueError(f"intensity must be in (0, 1], got {intensity}")
    h, w = shape
    rng = np.random.default_rng(seed)
    noise = (rng.random((h, w)) < density).astype(np.float64)
    kernel = line_kernel(int(length_px), direction_deg)
    blurred = ndimage.correlate(noise, kernel, mode="constant", cval=0.0)
    peak = blurred.max()
    if peak > 0:
        pixels = blurred * (intensity / peak)
    else:
        pixels = np.zeros_like(blurred)
    # splat weights can overshoot intensity by float noise; pin the bound
    np.clip(pixels, 0.0, intensity, out=pixels)
    return StreakLayer(pixels=pixels, direction_deg=float(direction_deg),
                       density=float(density), length_px=int(length_px),
                       intensity=float(intensity), seed=int(seed))


def _streak_array(streaks):
    return streaks.pixels if isinstance(streaks, StreakLayer) else np.asarray(streaks)


def compose_additive(clean, streaks):
    """O = clamp(B + S, 0, 1); the streak layer broadcasts over RGB."""
    s = _streak_array(streaks)
    if s.shape != clean.shape[:2]:
        raise ValueError(f"streak shape {s.shape} does not match image {clean.shape[:2]}")
    return np.clip(clean + s[:, :, None], 0.0, 1.0)


def compose_heavy(clean, params):
    """O = clamp(t * (B + sum_i S_i * R) + (1 - t) * A, 0, 1).

    The region mask is applied to each layer before summation.  With t = 1,
    a single layer and an all-ones mask this reduces bit-exactly to
    ``compose_additive``."""
    params.validate(clean.shape[:2])
    total = np.zeros(clean.shape[:2], dtype=np.float64)
    for layer in params.layers:
        total = total + layer.pixels * params.region_mask
    t = params.transmittance
    ambient = np.asarray(params.atmospheric_light, dtype=np.float64).reshape(-1)
    out = t * (clean + total[:, :, None]) + (1.0 - t) * ambient[None, None, :]
    return np.clip(out, 0.0, 1.0)


def sample_training_patch(pair, patch, seed, hflip):
    """Crop the same seeded window from both images; optionally apply the same
    seeded horizontal flip.  Draw order: row offset, column offset, flip."""
    h, w = pair.clean.shape[:2]
    if patch > min(h, w):
        raise ValueError(f"patch {patch} exceeds image size {h}x{w}")
    rng = np.random.default_rng(seed)
    oy = int(rng.integers(0, h - patch + 1))
    ox = int(rng.integers(0, w - patch + 1))
    rainy = pair.rainy[oy:oy + patch, ox:ox + patch]
    clean = pair.clean[oy:oy + patch, ox:ox + patch]
    if hflip and rng.random() < 0.5:
        rainy = rainy[:, ::-1]
        clean = clean[:, ::-1]
    return np.ascontiguousarray(rainy), np.ascontiguousarray(clean)


# ---------------------------------------------------------------------------
# procedural clean backgrounds and region masks
# ---------------------------------------------------------------------------

def _bilinear_resize(img, out_shape):
    """Edge-aligned bilinear resize of an H x W (x C) array."""
    h, w = img.shape[:2]
    oh, ow = out_shape
    ys = np.linspace(0.0, h - 1.0, oh)
    xs = np.linspace(0.0, w - 1.0, ow)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 2) if h > 1 else np.zeros(oh, int)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 2) if w > 1 else np.zeros(ow, int)
    fy = (ys - y0) if h > 1 else np.zeros(oh)
    fx = (xs - x0) if w > 1 else np.zeros(ow)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = fy[:, None, None] if img.ndim == 3 else fy[:, None]
    fx = fx[None, :, None] if img.ndim == 3 else fx[None, :]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def synth_clean_image(shape, rng):
    """Procedural rain-free background: a smooth low-frequency color field
    with a handful of soft-edged discs for local structure."""
    h, w = shape
    coarse = rng.uniform(0.1, 0.9, size=(4, 4, 3))
    img = _bilinear_resize(coarse, (h, w))
    yy, xx = np.mgrid[0:h, 0:w]
    for _ in range(int(rng.integers(3, 7))):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        r = rng.uniform(0.08, 0.3) * min(h, w)
        color = rng.uniform(0.05, 0.95, size=3)
        d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        blend = np.clip((r - d) / (0.25 * r + 1e-9), 0.0, 1.0)
        img = img * (1 - blend[:, :, None]) + color[None, None, :] * blend[:, :, None]
    return np.clip(img, 0.02, 0.98)


def make_region_mask(shape, coverage, rng):
    """Binary rain-region mask covering roughly `coverage` of the image.
    coverage >= 1 gives the all-ones mask."""
    h, w = shape
    if coverage >= 1.0:
        # consume the field draw anyway so downstream draws do not shift
        rng.random((6, 6))
        return np.ones((h, w), dtype=np.float64)
    field = _bilinear_resize(rng.random((6, 6)), (h, w))
    thresh = np.quantile(field, 1.0 - coverage)
    return (field >= thresh).astype(np.float64)


def sample_rain_params(shape, ranges, rng):
    """Draw RainParams from the given ranges.  Draw order: layer count, per
    layer (direction, density, length, intensity, seed), transmittance,
    atmospheric light, region coverage, region field."""
    n_layers = int(rng.integers(ranges.n_layers[0], ranges.n_layers[1] + 1))
    layers = []
    for _ in range(n_layers):
        direction = float(rng.uniform(*ranges.direction_deg))
        density = float(rng.uniform(*ranges.density))
        length = int(rng.integers(ranges.length_px[0], ranges.length_px[1] + 1))
        intensity = float(rng.uniform(*ranges.intensity))
        layer_seed = int(rng.integers(0, 2 ** 63))
        layers.append(render_streak_layer(shape, direction, density, length,
                                          intensity, layer_seed))
    transmittance = float(rng.uniform(*ranges.transmittance))
    base = rng.uniform(*ranges.atmospheric_light)
    ambient = np.clip(base + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
    coverage = float(rng.uniform(*ranges.region_coverage))
    mask = make_region_mask(shape, coverage, rng)
    return RainParams(transmittance=transmittance, layers=layers,
                      region_mask=mask, atmospheric_light=ambient), coverage


def render_pair(image_size, ranges, seed, model="heavy"):
    """Synthesize one (rainy, clean) pair.  Pure function of its arguments."""
    rng = np.random.default_rng(seed)
    clean = synth_clean_image(image_size, rng)
    params, coverage = sample_rain_params(image_size, ranges, rng)
    if model == "heavy":
        rainy = compose_heavy(clean, params)
    elif model == "additive":
        rainy = compose_additive(clean, params.layers[0])
    else:
        raise ValueError(f"unknown composition model {model!r}")
    pair = RainyPair(rainy=rainy, clean=clean, params=params, seed=int(seed))
    pair.region_coverage = coverage
    return pair


# ---------------------------------------------------------------------------
# persistence: 8-bit PNG + JSON manifest
# ---------------------------------------------------------------------------

def save_png(path, img):
    """Store as 8-bit RGB with q = rint(255 * v) (round half to even)."""
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q, mode="RGB").save(path)


def load_png(path):
    """Dequantize an 8-bit RGB PNG to float64 in [0, 1] (v = q / 255)."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def pair_seed(global_seed, index):
    """Per-pair RNG seed derived solely from (global seed, pair index)."""
    ss = np.random.SeedSequence([int(global_seed), int(index)])
    return int(ss.generate_state(1, np.uint64)[0])


def _pair_record(index, seed, pair, rainy_path, clean_path):
    p = pair.params
    return {
        "index": index,
        "seed": seed,
        "rainy": rainy_path,
        "clean": clean_path,
        "params": {
            "transmittance": p.transmittance,
            "atmospheric_light": [float(a) for a in p.atmospheric_light],
            "region_coverage": getattr(pair, "region_coverage", 1.0),
            "layers": [
                {"direction_deg": l.direction_deg, "density": l.density,
                 "length_px": l.length_px, "intensity": l.intensity, "seed": l.seed}
                for l in p.layers
            ],
        },
    }


def generate_dataset(n_pairs, image_size, param_ranges, seed, out_dir,
                     model="heavy"):
    """Write `n_pairs` PNG pairs plus a JSON manifest under `out_dir`.

    Every pair is a pure function of (seed, index), so regeneration from the
    manifest reproduces byte-identical files.  Returns the manifest path."""
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    h, w = image_size
    if h < 1 or w < 1:
        raise ValueError(f"image_size must be positive, got {image_size}")
    pair_dir = os.path.join(out_dir, "pairs")
    os.makedirs(pair_dir, exist_ok=True)
    records = []
    for i in range(n_pairs):
        ps = pair_seed(seed, i)
        pair = render_pair((h, w), param_ranges, ps, model=model)
        rainy_rel = f"pairs/{i:05d}_rain.png"
        clean_rel = f"pairs/{i:05d}_clean.png"
        save_png(os.path.join(out_dir, rainy_rel), pair.rainy)
        save_png(os.path.join(out_dir, clean_rel), pair.clean)
        records.append(_pair_record(i, ps, pair, rainy_rel, clean_rel))
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": int(seed),
        "image_size": [int(h), int(w)],
        "model": model,
        "ranges": param_ranges.to_dict(),
        "pairs": records,
    }
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest_path


def load_manifest(path):
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{path}: unsupported manifest format {manifest.get('format')!r}")
    return manifest


def regenerate_from_manifest(manifest_path, out_dir):
    """Re-render every pair recorded in the manifest into `out_dir`.
    Output files are byte-identical to the original generation run."""
    manifest = load_manifest(manifest_path)
    ranges = RainRanges.from_dict(manifest["ranges"])
    h, w = manifest["image_size"]
    pair_dir = os.path.join(out_dir, "pairs")
    os.makedirs(pair_dir, exist_ok=True)
    for rec in manifest["pairs"]:
        if "seed" not in rec:
            raise ValueError(f"pair {rec.get('index')} has no seed; imported pairs "
                             "cannot be regenerated")
        pair = render_pair((h, w), ranges, rec["seed"], model=manifest.get("model", "heavy"))
        save_png(os.path.join(out_dir, rec["rainy"]), pair.rainy)
        save_png(os.path.join(out_dir, rec["clean"]), pair.clean)
    return out_dir


def load_pairs(manifest_path):
    """Load all (rainy, clean) pairs listed in a manifest as float arrays."""
    manifest = load_manifest(manifest_path)
    root = os.path.dirname(os.path.abspath(manifest_path))
    out = []
    for rec in manifest["pairs"]:
        rainy = load_png(os.path.join(root, rec["rainy"]))
        clean = load_png(os.path.join(root, rec["clean"]))
        out.append((rec["index"], rainy, clean))
    return out


def import_paired_folder(rainy_dir, clean_dir, out_dir):
    """Build a manifest for user-supplied paired folders (matched by sorted
    filename).  Imported pairs carry no rain parameters and cannot be
    regenerated; they can only be trained on and evaluated."""
    rainy_files = sorted(os.listdir(rainy_dir))
    clean_files = sorted(os.listdir(clean_dir))
    if len(rainy_files) != len(clean_files):
        raise ValueError(f"{rainy_dir} and {clean_dir} hold different pair counts "
                         f"({len(rainy_files)} vs {len(clean_files)})")
    if not rainy_files:
        raise ValueError(f"no images found in {rainy_dir}")
    os.makedirs(out_dir, exist_ok=True)
    first = load_png(os.path.join(rainy_dir, rainy_files[0]))
    records = []
    for i, (rf, cf) in enumerate(zip(rainy_files, clean_files)):
        records.append({
            "index": i,
            "rainy": os.path.relpath(os.path.join(rainy_dir, rf), out_dir),
            "clean": os.path.relpath(os.path.join(clean_dir, cf), out_dir),
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "seed": None,
        "image_size": [int(first.shape[0]), int(first.shape[1])],
        "model": "imported",
        "ranges": RainRanges().to_dict(),
        "pairs": records,
    }
    manifest_path = os.path.join(out_dir, MANIFEST_NAME)
    with open(manifest_path, "w") as f:
        json.dump(manifest, f, indent=1)
    return manifest_path
