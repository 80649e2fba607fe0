"""Synthetic styled-identity corpus and the P x K batch sampler.

Each identity is a fixed, seed-determined "pedestrian" pattern (head, torso
with stripes, legs, a carried blob on a background).  Instances jitter the
pattern geometrically; domains restyle it photometrically (per-channel gain
and bias, saturation blend, gamma, contrast, sensor noise).  Everything is
keyed by integer seeds, so regenerating with the same spec gives a
byte-identical corpus.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import snrt

IMAGE_SHAPE = (3, 64, 32)
GRAY = np.array([0.299, 0.587, 0.114])

Range = tuple[float, float]


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _u(rng: np.random.Generator, r: Sequence[float]) -> float:
    lo, hi = r
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


@dataclass
class StyleDomainSpec:
    """Photometric parameter ranges of one domain; each instance draws from them."""

    domain_id: int
    gain: list[Range] = field(default_factory=lambda: [(1.0, 1.0)] * 3)
    bias: list[Range] = field(default_factory=lambda: [(0.0, 0.0)] * 3)
    gamma: Range = (1.0, 1.0)
    contrast: Range = (1.0, 1.0)
    blend: Range = (0.0, 0.0)
    noise_std: Range = (0.0, 0.0)
    role: str = "train"
    seed: int = 0

    def validate(self) -> None:
        if len(self.gain) != 3 or len(self.bias) != 3:
            raise ValueError("gain and bias need one range per color channel")
        for lo, hi in [*self.gain, *self.bias, self.gamma, self.contrast, self.blend, self.noise_std]:
            if lo > hi:
                raise ValueError(f"empty range ({lo}, {hi})")
        if min(lo for lo, _ in self.gain) <= 0:
            raise ValueError("gains must be positive")
        if self.gamma[0] < 0.3 or self.gamma[1] > 3.0:
            raise ValueError("gamma must lie in [0.3, 3]")
        if self.blend[0] < 0 or self.blend[1] > 1:
            raise ValueError("blend must lie in [0, 1]")
        if self.contrast[0] <= 0:
            raise ValueError("contrast must be positive")
        if self.noise_std[0] < 0:
            raise ValueError("noise std must be non-negative")
        if self.role not in ("train", "test"):
            raise ValueError(f"unknown domain role {self.role!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "StyleDomainSpec":
        d = dict(d)
        for k in ("gain", "bias"):
            if k in d:
                d[k] = [tuple(r) for r in d[k]]
        for k in ("gamma", "contrast", "blend", "noise_std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class StyleParams:
    gain: np.ndarray
    bias: np.ndarray
    gamma: float
    contrast: float
    blend: float
    noise_std: float


def draw_style(domain: StyleDomainSpec, instance_seed: int) -> StyleParams:
    rng = _rng(domain.seed, domain.domain_id, instance_seed, 1)
    return StyleParams(
        gain=np.array([_u(rng, r) for r in domain.gain]),
        bias=np.array([_u(rng, r) for r in domain.bias]),
        gamma=_u(rng, domain.gamma),
        contrast=_u(rng, domain.contrast),
        blend=_u(rng, domain.blend),
        noise_std=_u(rng, domain.noise_std),
    )


def style_transform(image: np.ndarray, p: StyleParams, noise_rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply concrete style parameters to a [3, h, w] image in [0, 1]."""
    x = image.astype(np.float64)
    gray = np.tensordot(GRAY, x, axes=1)[None]
    y = p.blend * gray + (1 - p.blend) * (p.gain[:, None, None] * x + p.bias[:, None, None])
    y = np.clip(y, 0.0, 1.0)
    if p.gamma != 1.0:
        y = y**p.gamma
    if p.contrast != 1.0:
        m = y.mean()
        y = m + p.contrast * (y - m)
    if p.noise_std > 0:
        y = y + (noise_rng or np.random.default_rng(0)).normal(0.0, p.noise_std, y.shape)
    return np.clip(y, 0.0, 1.0)


def apply_style(image: np.ndarray, domain: StyleDomainSpec, instance_seed: int) -> np.ndarray:
    """Restyle ``image`` with parameters drawn from ``domain`` for this instance."""
    domain.validate()
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3, h, w] image, got {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("pixel values must lie in [0, 1]")
    params = draw_style(domain, instance_seed)
    return style_transform(image, params, _rng(domain.seed, domain.domain_id, instance_seed, 2))


# identities -------------------------------------------------------------------

@dataclass
class IdentitySpec:
    identity_id: int
    seed: int = 0
    max_shift: float = 2.0
    scale_range: Range = (0.92, 1.08)
    pixel_noise: float = 0.02


def _pattern(spec: IdentitySpec) -> dict:
    rng = _rng(spec.seed, spec.identity_id, 0)
    return {
        "background": rng.uniform(0.25, 0.75, 3),
        "skin": rng.uniform(0.4, 0.9, 3),
        "upper": rng.uniform(0.0, 1.0, 3),
        "stripe": rng.uniform(0.0, 1.0, 3),
        "stripe_freq": float(rng.choice([0.0, 2.0, 3.0, 4.0])),
        "lower": rng.uniform(0.0, 1.0, 3),
        "bag": rng.uniform(0.0, 1.0, 3),
        "bag_side": float(rng.choice([-1.0, 1.0])),
        "bag_y": float(rng.uniform(0.35, 0.6)),
        "torso_w": float(rng.uniform(0.28, 0.42)),
    }


def render_identity(spec: IdentitySpec, instance: int = 0, shape=IMAGE_SHAPE, jitter: bool = True) -> np.ndarray:
    """Render one instance of an identity into a [3, h, w] image in [0, 1]."""
    pat = _pattern(spec)
    _, h, w = shape
    rng = _rng(spec.seed, spec.identity_id, 1, instance)
    if jitter:
        dx, dy = rng.uniform(-spec.max_shift, spec.max_shift, 2)
        s = rng.uniform(*spec.scale_range)
    else:
        dx = dy = 0.0
        s = 1.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # normalized body coordinates: v in [0, 1] head to feet, u in [-0.5, 0.5]
    v = ((yy - dy) - h / 2) / (h * s) + 0.5
    u = ((xx - dx) - w / 2) / (w * s)
    img = np.empty((3, h, w))
    img[:] = pat["background"][:, None, None]

    def paint(mask, color):
        img[:, mask] = np.asarray(color)[:, None]

    tw = pat["torso_w"]
    legs = (v >= 0.55) & (v <= 0.97) & (np.abs(u) <= tw * 0.8) & (np.abs(u) >= 0.03)
    paint(legs, pat["lower"])
    torso = (v >= 0.2) & (v < 0.55) & (np.abs(u) <= tw)
    paint(torso, pat["upper"])
    if pat["stripe_freq"] > 0:
        band = np.sin((v - 0.2) / 0.35 * np.pi * 2 * pat["stripe_freq"]) > 0.3
        paint(torso & band, pat["stripe"])
    head = ((u / 0.14) ** 2 + ((v - 0.11) / 0.085) ** 2) <= 1.0
    paint(head, pat["skin"])
    bag = (np.abs(u - pat["bag_side"] * (tw + 0.06)) <= 0.07) & (np.abs(v - pat["bag_y"]) <= 0.09)
    paint(bag, pat["bag"])
    if jitter and spec.pixel_noise > 0:
        img = img + rng.normal(0.0, spec.pixel_noise, img.shape)
    return np.clip(img, 0.0, 1.0)


# corpus ------------------------------------------------------------------------

@dataclass
class Sample:
    path: str
    identity: int
    domain: int
    split: str
    seed: int
    instance: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {"path": self.path, "identity": self.identity, "domain": self.domain,
             "split": self.split, "seed": self.seed, "instance": self.instance},
            sort_keys=True,
        )


@dataclass
class DatasetManifest:
    samples: list[Sample]
    root: Path | None = None

    def split(self, name: str, domain: int | None = None) -> list[Sample]:
        return [s for s in self.samples if s.split == name and (domain is None or s.domain == domain)]

    def domains(self, split: str | None = None) -> list[int]:
        return sorted({s.domain for s in self.samples if split is None or s.split == split})

    def validate(self) -> None:
        for d in self.domains("query"):
            q = self.split("query", d)
            g = self.split("gallery", d)
            gids = {s.identity for s in g}
            missing = {s.identity for s in q} - gids
            if missing:
                raise ValueError(f"query identities {sorted(missing)} absent from gallery of domain {d}")
            if {s.path for s in q} & {s.path for s in g}:
                raise ValueError("query and gallery share samples")

    def write(self, path) -> None:
        Path(path).write_text("".join(s.to_json() + "\n" for s in self.samples))

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        samples = [Sample(**json.loads(line)) for line in path.read_text().splitlines() if line.strip()]
        return cls(samples, root=path.parent)

    def load_images(self, samples: Sequence[Sample]) -> np.ndarray:
        root = self.root or Path(".")
        return np.stack([load_image(root / s.path) for s in samples]).astype(np.float32)


def load_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".png":
        from PIL import Image

        return np.asarray(Image.open(path), dtype=np.float32).transpose(2, 0, 1) / 255.0
    return snrt.load(path)


@dataclass
class DatasetSpec:
    num_identities: int = 30
    instances_per_domain: int = 4
    domains: list[StyleDomainSpec] = field(default_factory=list)
    num_test_identities: int | None = None
    test_instances: int | None = None
    seed: int = 0
    image_shape: tuple[int, int, int] = IMAGE_SHAPE
    image_format: str = "snrt"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        d = dict(d)
        d["domains"] = [StyleDomainSpec.from_dict(x) for x in d.get("domains", [])]
        if "image_shape" in d:
            d["image_shape"] = tuple(d["image_shape"])
        return cls(**d)


def _write_image(path: Path, img: np.ndarray, fmt: str) -> None:
    if fmt == "png":
        from PIL import Image

        arr = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
        Image.fromarray(arr).save(path, format="PNG")
    else:
        snrt.save(path, img.astype(np.float32))


def generate_synthetic_domains(
    num_identities: int,
    instances_per_domain: int,
    domains: Sequence[StyleDomainSpec],
    out_dir,
    *,
    num_test_identities: int | None = None,
    test_instances: int | None = None,
    seed: int = 0,
    image_shape=IMAGE_SHAPE,
    image_format: str = "snrt",
) -> DatasetManifest:
    """Render every (domain, identity, instance) image and write the manifest.

    Training-role domains use identities 0..N-1; test-role domains use a
    disjoint block of ``num_test_identities`` (default N) ids starting at N,
    with the first instance of each identity as query and the rest as gallery.
    """
    if num_identities < 2:
        raise ValueError("need at least two identities")
    if instances_per_domain < 2:
        raise ValueError("need at least two instances per identity per domain")
    if image_format not in ("snrt", "png"):
        raise ValueError(f"unknown image format {image_format!r}")
    for d in domains:
        d.validate()
    n_test = num_identities if num_test_identities is None else num_test_identities
    k_test = instances_per_domain if test_instances is None else test_instances
    if any(d.role == "test" for d in domains) and (n_test < 1 or k_test < 2):
        raise ValueError("test domains need identities with at least two instances")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    ext = "png" if image_format == "png" else "snrt"
    samples = []
    for dom in domains:
        ddir = out / f"domain_{dom.domain_id}"
        ddir.mkdir(exist_ok=True)
        if dom.role == "train":
            ids, k_count = range(num_identities), instances_per_domain
        else:
            ids, k_count = range(num_identities, num_identities + n_test), k_test
        for ident in ids:
            spec = IdentitySpec(ident, seed=seed)
            for k in range(k_count):
                inst_seed = int(np.random.SeedSequence([seed, dom.domain_id, ident, k]).generate_state(1)[0])
                img = apply_style(render_identity(spec, inst_seed, image_shape), dom, inst_seed)
                rel = f"domain_{dom.domain_id}/id_{ident}_{k}.{ext}"
                _write_image(out / rel, img, image_format)
                split = "train" if dom.role == "train" else ("query" if k == 0 else "gallery")
                samples.append(Sample(rel, ident, dom.domain_id, split, inst_seed, k))
    manifest = DatasetManifest(samples, root=out)
    manifest.validate()
    manifest.write(out / "manifest.jsonl")
    return manifest


def generate_from_spec(spec: DatasetSpec, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    man = generate_synthetic_domains(
        spec.num_identities, spec.instances_per_domain, spec.domains, out,
        num_test_identities=spec.num_test_identities, test_instances=spec.test_instances,
        seed=spec.seed, image_shape=spec.image_shape, image_format=spec.image_format,
    )
    (out / "dataset.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    return man


def desk_domains(seed: int = 0) -> list[StyleDomainSpec]:
    """Two source styles with mild per-image variation and one held-out style.

    The held-out domain draws every image's color cast, gamma, contrast and
    desaturation from wide ranges, so query and gallery images of the same
    person rarely share a style.
    """
    return [
        StyleDomainSpec(
            0, gain=[(1.05, 1.3), (0.9, 1.05), (0.7, 0.85)], bias=[(0.0, 0.05)] * 3,
            gamma=(0.8, 1.0), contrast=(0.9, 1.2), blend=(0.0, 0.1), noise_std=(0.01, 0.02),
            role="train", seed=seed,
        ),
        StyleDomainSpec(
            1, gain=[(0.7, 0.85), (0.9, 1.05), (1.05, 1.3)], bias=[(-0.05, 0.0)] * 3,
            gamma=(1.0, 1.3), contrast=(0.8, 1.0), blend=(0.1, 0.3), noise_std=(0.01, 0.02),
            role="train", seed=seed,
        ),
        StyleDomainSpec(
            2, gain=[(0.45, 1.2)] * 3, bias=[(-0.1, 0.15)] * 3,
            gamma=(0.6, 1.9), contrast=(0.5, 1.1), blend=(0.0, 0.6), noise_std=(0.02, 0.035),
            role="test", seed=seed,
        ),
    ]


def desk_dataset_spec(num_identities: int = 30, instances: int = 4, seed: int = 0, num_test_identities: int = 60) -> DatasetSpec:
    return DatasetSpec(
        num_identities=num_identities, instances_per_domain=instances,
        domains=desk_domains(seed), num_test_identities=num_test_identities, test_instances=instances,
        seed=seed,
    )


# sampling ------------------------------------------------------------------------

def pk_sample(labels: Sequence[int], P: int, K: int, rng: np.random.Generator) -> list[int]:
    """Indices of a P x K batch: P distinct identities, K samples each.

    Identities with fewer than K samples are drawn with replacement.
    """
    labels = np.asarray(labels)
    ids = np.unique(labels)
    if P < 1 or K < 1:
        raise ValueError("P and K must be positive")
    if len(ids) < P:
        raise ValueError(f"need {P} identities, only {len(ids)} available")
    chosen = rng.choice(ids, size=P, replace=False)
    batch = []
    for ident in chosen:
        pool = np.flatnonzero(labels == ident)
        batch.extend(int(i) for i in rng.choice(pool, size=K, replace=len(pool) < K))
    return batch


class PKSampler:
    """Deterministic stream of P x K batches over a label array."""

    def __init__(self, labels: Sequence[int], P: int, K: int, seed: int):
        self.labels = np.asarray(labels)
        self.P, self.K = P, K
        self.rng = np.random.default_rng(seed)
        if len(np.unique(self.labels)) < P:
            raise ValueError(f"need {P} identities, only {len(np.unique(self.labels))} available")

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def batches_per_epoch(self) -> int:
        return max(1, len(self.labels) // self.batch_size)

    def epoch(self) -> Iterator[list[int]]:
        for _ in range(self.batches_per_epoch()):
            yield pk_sample(self.labels, self.P, self.K, self.rng)
