"""Synthetic annotator populations with planted source/target pairings.

Each annotator perceives a sample's latent (activation, valence) through an
affine map plus Gaussian noise, clamped to [-1, 1]::

    label_d = clamp(scale_d * latent_d + bias_d + N(0, noise_sd))

Sample features are a fixed seeded linear map of the latents plus isotropic
noise, shared by every dataset generated from the same :class:`SimConfig`.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .corpus import Annotation, Dataset, Sample
from .errors import InvalidInputError
from .metrics import ScalingParams
from .network import ModelConfig, ModelParams


@dataclass(frozen=True)
class AnnotatorProfile:
    annotator_id: str
    scale_act: float
    scale_val: float
    bias_act: float
    bias_val: float
    noise_sd: float
    planted_source: str | None = None

    def perceive(self, latent_act, latent_val, noise=(0.0, 0.0)):
        act = np.clip(self.scale_act * np.asarray(latent_act) + self.bias_act + noise[0], -1.0, 1.0)
        val = np.clip(self.scale_val * np.asarray(latent_val) + self.bias_val + noise[1], -1.0, 1.0)
        return act, val


@dataclass(frozen=True)
class SimConfig:
    n_samples: int = 2000
    n_source_annotators: int = 50
    n_target_annotators: int = 100
    annotations_per_sample: int = 4
    n_target_samples: int | None = None
    target_annotations_per_sample: int | None = None
    feature_dim: int = 16
    feature_noise_sd: float = 0.1
    scale_mean: float = 1.0
    scale_sd: float = 0.3
    bias_mean: float = 0.0
    bias_sd: float = 0.3
    noise_sd: float = 0.05
    clone_noise_sd: float = 0.02
    n_sessions: int = 20
    assignment: str = "uniform"
    powerlaw_alpha: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        counts = (self.n_samples, self.n_source_annotators, self.n_target_annotators,
                  self.annotations_per_sample, self.feature_dim, self.n_sessions)  # fmt: skip
        if min(counts) < 1:
            raise InvalidInputError("all counts must be positive")
        if self.annotations_per_sample > self.n_source_annotators:
            raise InvalidInputError("annotations_per_sample exceeds the source annotator count")
        if self.target_k > self.n_target_annotators:
            raise InvalidInputError("target annotations_per_sample exceeds the target annotator count")
        if min(self.feature_noise_sd, self.noise_sd, self.clone_noise_sd, self.scale_sd, self.bias_sd) < 0:
            raise InvalidInputError("standard deviations must be non-negative")
        if self.assignment not in ("uniform", "powerlaw"):
            raise InvalidInputError(f"unknown assignment {self.assignment!r}")

    @property
    def target_n(self) -> int:
        return self.n_target_samples or self.n_samples

    @property
    def target_k(self) -> int:
        return self.target_annotations_per_sample or self.annotations_per_sample

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise InvalidInputError(f"unknown SimConfig keys: {sorted(unknown)}")
        return cls(**data)


def _rng(config: SimConfig, *keys: int) -> np.random.Generator:
    return np.random.default_rng([config.rng_seed, *keys])


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def feature_map(config: SimConfig) -> np.ndarray:
    """The ``(feature_dim, 2)`` linear map from latents to features."""
    return _rng(config, 0).normal(0.0, 1.0, size=(config.feature_dim, 2))


def gen_population(config: SimConfig, n: int | None = None, prefix: str = "s") -> list[AnnotatorProfile]:
    """Source annotators with scales around ``scale_mean`` and biases around ``bias_mean``."""
    n = config.n_source_annotators if n is None else n
    rng = _rng(config, 1)
    scales = rng.normal(config.scale_mean, config.scale_sd, size=(n, 2))
    biases = rng.normal(config.bias_mean, config.bias_sd, size=(n, 2))
    width = max(3, len(str(n - 1)))
    return [
        AnnotatorProfile(f"{prefix}{i:0{width}d}", scales[i, 0], scales[i, 1], biases[i, 0], biases[i, 1], config.noise_sd)
        for i in range(n)
    ]


def plant_targets(sources, n_targets: int, clone_noise_sd: float, rng_seed: int, prefix: str = "t") -> list[AnnotatorProfile]:
    """Targets cloned from uniformly chosen sources with Gaussian parameter jitter."""
    if not sources:
        raise InvalidInputError("source population is empty")
    rng = np.random.default_rng([rng_seed, 2])
    picks = rng.integers(0, len(sources), size=n_targets)
    jitter = rng.normal(0.0, 1.0, size=(n_targets, 4)) * clone_noise_sd
    width = max(3, len(str(n_targets - 1)))
    out = []
    for j, (i, dz) in enumerate(zip(picks, jitter)):
        s = sources[i]
        out.append(
            AnnotatorProfile(
                f"{prefix}{j:0{width}d}",
                s.scale_act + dz[0], s.scale_val + dz[1], s.bias_act + dz[2], s.bias_val + dz[3],
                s.noise_sd,
                planted_source=s.annotator_id,
            )
        )  # fmt: skip
    return out


def gen_dataset(population, config: SimConfig, name: str = "source", n_samples: int | None = None,
                annotations_per_sample: int | None = None) -> Dataset:  # fmt: skip
    """Label freshly drawn samples with ``population``.

    Features are rounded to float32 precision so a file round-trip is exact.
    Labels are already on the [-1, 1] scale (declared range ``(-1, 1)``).
    """
    n = n_samples or config.n_samples
    k = annotations_per_sample or config.annotations_per_sample
    if k > len(population):
        raise InvalidInputError("annotations_per_sample exceeds population size")
    rng = _rng(config, 3, _name_key(name))
    M = feature_map(config)
    latents = rng.uniform(-1.0, 1.0, size=(n, 2))
    feats = latents @ M.T + rng.normal(0.0, config.feature_noise_sd, size=(n, config.feature_dim))
    feats = feats.astype(np.float32).astype(np.float64)

    if config.assignment == "powerlaw":
        w = (np.arange(len(population)) + 1.0) ** -config.powerlaw_alpha
        p = w / w.sum()
    else:
        p = None
    width = max(5, len(str(n - 1)))
    samples, annotations = [], []
    for i in range(n):
        sid = f"{name}-{i:0{width}d}"
        samples.append(Sample(sid, feats[i], f"{name}-sess{i % config.n_sessions:03d}"))
        chosen = rng.choice(len(population), size=k, replace=False, p=p)
        noise = rng.normal(0.0, 1.0, size=(k, 2))
        for j, a in enumerate(chosen):
            prof = population[a]
            act, val = prof.perceive(latents[i, 0], latents[i, 1], noise[j] * prof.noise_sd)
            annotations.append(Annotation(sid, prof.annotator_id, float(act), float(val)))
    unit = ScalingParams(-1.0, 1.0)
    return Dataset.from_records(name, samples, annotations, declared_range=(unit, unit))


@dataclass(frozen=True, eq=False)
class Benchmark:
    config: SimConfig
    sources: list
    targets: list
    source: Dataset
    target: Dataset

    @property
    def planted(self) -> dict:
        return {t.annotator_id: t.planted_source for t in self.targets}


def simulate(config: SimConfig) -> Benchmark:
    """Source population + dataset and planted-clone target population + dataset."""
    sources = gen_population(config)
    targets = plant_targets(sources, config.n_target_annotators, config.clone_noise_sd, config.rng_seed)
    source = gen_dataset(sources, config, "source")
    target = gen_dataset(targets, config, "target", config.target_n, config.target_k)
    return Benchmark(config, sources, targets, source, target)


def perception_model(population, config: SimConfig, hidden_width: int | None = None) -> ModelParams:
    """Hand-built network whose head ``i`` computes annotator ``i``'s noiseless
    perception of the latents recovered from features.

    The trunk inverts the feature map (exact when ``feature_noise_sd == 0``),
    branch layer 1 splits each latent into positive/negative parts and branch
    layer 2 holds two ReLU units per annotator so that the head evaluates
    ``relu(z + 1) - relu(z - 1) - 1 == clamp(z, -1, 1)``.
    """
    a = len(population)
    h = hidden_width or max(4, 2 * a)
    if h < max(4, 2 * a):
        raise InvalidInputError(f"hidden_width must be >= {max(4, 2 * a)}")
    cfg = ModelConfig(config.feature_dim, tuple(p.annotator_id for p in population), h, 0.0)
    t = {name: np.zeros(shape) for name, shape in cfg.shapes().items()}
    P = np.linalg.pinv(feature_map(config))
    t["trunk_w"][0], t["trunk_w"][1] = P[0], -P[0]
    t["trunk_w"][2], t["trunk_w"][3] = P[1], -P[1]
    for d, br in enumerate(("act", "val")):
        t[f"{br}_w1"][0, 2 * d] = 1.0
        t[f"{br}_w1"][1, 2 * d + 1] = 1.0
        for i, prof in enumerate(population):
            scale = prof.scale_act if d == 0 else prof.scale_val
            bias = prof.bias_act if d == 0 else prof.bias_val
            for unit, shift in ((2 * i, 1.0), (2 * i + 1, -1.0)):
                t[f"{br}_w2"][unit, 0] = scale
                t[f"{br}_w2"][unit, 1] = -scale
                t[f"{br}_b2"][unit] = bias + shift
            t[f"heads_{br}_w"][i, 2 * i] = 1.0
            t[f"heads_{br}_w"][i, 2 * i + 1] = -1.0
            t[f"heads_{br}_b"][i] = -1.0
        t[f"agg_{br}_w"][:] = t[f"heads_{br}_w"].mean(axis=0)
        t[f"agg_{br}_b"][...] = -1.0
    return ModelParams(cfg, t)

