"""Prompt encoders and region featurizer producing unit-norm embeddings.

Three two-layer perceptrons share one embedding space: a frozen "pretrained"
text encoder (pre-fit by a short warm-up so it is genuinely informative) and
two trainable contrastive encoders, one for text and one for visual crops.
Featurizers turn prompts and scene regions into the raw input vectors those
encoders consume. Forward and backward passes are hand-written so gradient
claims can be checked against finite differences with no autodiff dependency.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset, Scene, canonical_json
from .geometry import Box, iou

NORM_EPS = 1e-12


# -- featurizers -------------------------------------------------------------


@dataclass(frozen=True)
class Tokenizer:
    """Word -> index table; words outside the table hash into an overflow band."""

    vocab: dict[str, int]
    n_overflow: int = 8

    @property
    def dim(self) -> int:
        return len(self.vocab) + self.n_overflow

    def index(self, word: str) -> int:
        if word in self.vocab:
            return self.vocab[word]
        return len(self.vocab) + zlib.crc32(word.encode("utf-8")) % self.n_overflow


def tokenize(text: str) -> list[str]:
    return [w for w in text.lower().replace(",", " ").split() if w]


def build_tokenizer(texts, n_overflow: int = 8) -> Tokenizer:
    words = sorted({w for t in texts for w in tokenize(t)})
    return Tokenizer(vocab={w: i for i, w in enumerate(words)}, n_overflow=n_overflow)


def featurize_text(tokenizer: Tokenizer, prompt: str) -> np.ndarray:
    """L1-normalized bag-of-words vector; order-invariant and deterministic."""
    words = tokenize(prompt)
    if not words:
        raise ValueError("empty prompt")
    vec = np.zeros(tokenizer.dim, dtype=np.float64)
    for w in words:
        vec[tokenizer.index(w)] += 1.0
    return vec / vec.sum()


@dataclass(frozen=True)
class FeaturizerConfig:
    """Descriptor layout for synthetic regions: one-hot shape, one-hot color,
    normalized log-area, and a reserved background band, plus seeded noise.

    area_scale sets the amplitude of the log-area coordinate relative to the
    one-hot blocks; large values make object size a dominant nuisance factor
    that encoders must learn to discount.
    """

    shapes: tuple[str, ...]
    colors: tuple[str, ...]
    noise: float = 0.05
    area_scale: float = 1.0

    @property
    def dim(self) -> int:
        return len(self.shapes) + len(self.colors) + 2


def _norm_log_area(box: Box, scene: Scene) -> float:
    scene_area = scene.width * scene.height
    a = box.area()
    if a <= 0 or scene_area <= 0:
        return 0.0
    return float(np.clip(1.0 + np.log(a / scene_area) / 12.0, 0.0, 1.0))


def _noise_rng(seed: int, scene_id: int, box: Box) -> np.random.Generator:
    # Quantize coordinates so the draw is a pure function of (seed, scene, box).
    q = [int(round(v * 1e6)) + (1 << 40) for v in (box.x0, box.y0, box.x1, box.y1)]
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(scene_id), *q]))


def featurize_region(scene: Scene, box: Box, config: FeaturizerConfig, seed: int) -> np.ndarray:
    """Descriptor of the dominant overlapping object, noise scaled by 1/IoU.

    An exact-box crop sees the object's clean descriptor plus base noise; a
    crop at IoU 0.5 sees noise of twice that magnitude. A box overlapping no
    object gets the reserved background descriptor.
    """
    if scene.objects is None:
        raise ValueError(f"scene {scene.id} has no synthetic content to featurize")
    vec = np.zeros(config.dim, dtype=np.float64)
    best = None
    best_iou = 0.0
    for obj in scene.objects:
        v = iou(box, obj.box)
        if v > best_iou:
            best, best_iou = obj, v
    rng = _noise_rng(seed, scene.id, box)
    noise = rng.standard_normal(config.dim)
    if best is None:
        vec[len(config.shapes) + len(config.colors) + 1] = 1.0
        scale = config.noise
    else:
        if best.shape in config.shapes:
            vec[config.shapes.index(best.shape)] = 1.0
        if best.color in config.colors:
            vec[len(config.shapes) + config.colors.index(best.color)] = 1.0
        vec[len(config.shapes) + len(config.colors)] = config.area_scale * _norm_log_area(box, scene)
        scale = config.noise / best_iou
    return vec + scale * noise


# -- two-layer perceptron encoders -------------------------------------------


@dataclass
class EncoderParams:
    """Weights of one encoder: input -> tanh hidden -> output, then L2 norm."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    frozen: bool = False

    @property
    def in_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[0]

    def arrays(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self, frozen: bool | None = None) -> "EncoderParams":
        return EncoderParams(
            W1=self.W1.copy(),
            b1=self.b1.copy(),
            W2=self.W2.copy(),
            b2=self.b2.copy(),
            frozen=self.frozen if frozen is None else frozen,
        )


@dataclass
class EncoderGrads:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @staticmethod
    def zeros_like(p: EncoderParams) -> "EncoderGrads":
        return EncoderGrads(
            np.zeros_like(p.W1), np.zeros_like(p.b1), np.zeros_like(p.W2), np.zeros_like(p.b2)
        )

    def add(self, other: "EncoderGrads"):
        self.W1 += other.W1
        self.b1 += other.b1
        self.W2 += other.W2
        self.b2 += other.b2

    def scale(self, f: float):
        self.W1 *= f
        self.b1 *= f
        self.W2 *= f
        self.b2 *= f

    def max_abs(self) -> float:
        return max(
            float(np.max(np.abs(a))) if a.size else 0.0
            for a in (self.W1, self.b1, self.W2, self.b2)
        )


def init_params(in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator) -> EncoderParams:
    # Symmetric uniform scaled by 1/sqrt(fan-in).
    s1 = 1.0 / np.sqrt(in_dim)
    s2 = 1.0 / np.sqrt(hidden)
    return EncoderParams(
        W1=rng.uniform(-s1, s1, size=(hidden, in_dim)),
        b1=rng.uniform(-s1, s1, size=hidden),
        W2=rng.uniform(-s2, s2, size=(out_dim, hidden)),
        b2=rng.uniform(-s2, s2, size=out_dim),
    )


@dataclass
class ForwardCache:
    X: np.ndarray
    H: np.ndarray
    Z: np.ndarray
    norms: np.ndarray
    Y: np.ndarray


def forward(params: EncoderParams, X: np.ndarray) -> ForwardCache:
    """Batched forward pass; rows of Y are unit-norm embeddings."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != params.in_dim:
        raise ValueError(f"input dim {X.shape[1]} does not match encoder dim {params.in_dim}")
    H = np.tanh(X @ params.W1.T + params.b1)
    Z = H @ params.W2.T + params.b2
    if not np.all(np.isfinite(Z)):
        raise FloatingPointError("non-finite encoder activation")
    norms = np.linalg.norm(Z, axis=1)
    if np.any(norms < NORM_EPS):
        raise ValueError("zero vector cannot be normalized to the unit sphere")
    Y = Z / norms[:, None]
    return ForwardCache(X=X, H=H, Z=Z, norms=norms, Y=Y)


def backward(params: EncoderParams, cache: ForwardCache, dY: np.ndarray) -> EncoderGrads:
    """Gradient of a scalar loss w.r.t. encoder weights, given dLoss/dY."""
    dY = np.atleast_2d(dY)
    # Through L2 normalization: dZ = (dY - (dY . Y) Y) / ||Z||.
    inner = np.sum(dY * cache.Y, axis=1, keepdims=True)
    dZ = (dY - inner * cache.Y) / cache.norms[:, None]
    dW2 = dZ.T @ cache.H
    db2 = dZ.sum(axis=0)
    dH = dZ @ params.W2
    dPre = dH * (1.0 - cache.H**2)
    dW1 = dPre.T @ cache.X
    db1 = dPre.sum(axis=0)
    return EncoderGrads(W1=dW1, b1=db1, W2=dW2, b2=db2)


def encode(params: EncoderParams, x: np.ndarray) -> np.ndarray:
    """Single-vector forward pass returning a unit-norm embedding."""
    return forward(params, x).Y[0]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b))


def average_embeddings(items) -> np.ndarray:
    items = list(items)
    if not items:
        raise ValueError("cannot average an empty embedding list")
    mean = np.mean(np.stack(items), axis=0)
    n = np.linalg.norm(mean)
    if n < 1e-9:
        raise ValueError("antipodal cancellation: mean embedding has near-zero norm")
    return mean / n


# -- shared contrastive core ---------------------------------------------------


def nce_from_similarities(S: np.ndarray, pos_mask: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Multi-positive InfoNCE over a similarity matrix.

    loss = mean_i -log( sum_{p in P_i} exp(S_ip / tau) / sum_j exp(S_ij / tau) )

    Computed with row-wise max subtraction. Returns the loss and dLoss/dS.
    Rows are anchors; pos_mask marks each anchor's positives.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    S = np.asarray(S, dtype=np.float64)
    pos_mask = np.asarray(pos_mask, dtype=bool)
    if S.shape != pos_mask.shape:
        raise ValueError("similarity and positive mask shapes differ")
    if not pos_mask.any(axis=1).all():
        raise ValueError("every anchor row needs at least one positive")
    A = S.shape[0]
    logits = S / tau
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    denom = exp.sum(axis=1)
    num = np.where(pos_mask, exp, 0.0).sum(axis=1)
    loss = float(np.mean(np.log(denom) - np.log(num)))
    soft_all = exp / denom[:, None]
    soft_pos = np.where(pos_mask, exp, 0.0) / num[:, None]
    dS = (soft_all - soft_pos) / (tau * A)
    return loss, dS


# -- bundle, deployment container, checkpoints --------------------------------


@dataclass
class ModelConfig:
    dim: int = 32
    hidden: int = 64
    n_overflow: int = 8
    warmup_steps: int = 200
    warmup_lr: float = 0.5
    warmup_tau: float = 0.2

    def validate(self):
        if self.dim < 2 or self.hidden < 1:
            raise ValueError("embedding dim must be >= 2 and hidden width >= 1")
        if self.warmup_tau <= 0:
            raise ValueError("warmup temperature must be positive")


@dataclass
class EncoderBundle:
    """The three prompt encoders, the region encoder, and the featurizers.

    The region encoder is the projection head of the region featurizer: the
    stand-in for the pretrained detector backbone. It is fit jointly with the
    pretrained text encoder during warm-up (the two form the "pretrained
    open-vocabulary detector") and stays frozen, like the backbone it mimics.
    Prompt embeddings are scored against its region embeddings, so the
    contrastive encoders start unaligned and must learn the shared space.
    """

    pretrained_text: EncoderParams
    contrastive_text: EncoderParams
    contrastive_visual: EncoderParams
    region_encoder: EncoderParams
    tokenizer: Tokenizer
    featurizer: FeaturizerConfig
    config: ModelConfig
    config_hash: str
    step: int = 0

    def encoders(self) -> dict[str, EncoderParams]:
        return {
            "pretrained_text": self.pretrained_text,
            "contrastive_text": self.contrastive_text,
            "contrastive_visual": self.contrastive_visual,
            "region_encoder": self.region_encoder,
        }


@dataclass
class DeployedModel:
    """Deployment container: region featurizer plus the two contrastive
    prompt encoders; the frozen text teacher is gone."""

    contrastive_text: EncoderParams
    contrastive_visual: EncoderParams
    region_encoder: EncoderParams
    tokenizer: Tokenizer
    featurizer: FeaturizerConfig
    config_hash: str
    step: int = 0

    def encoders(self) -> dict[str, EncoderParams]:
        return {
            "contrastive_text": self.contrastive_text,
            "contrastive_visual": self.contrastive_visual,
            "region_encoder": self.region_encoder,
        }


def model_config_hash(config: ModelConfig, tokenizer: Tokenizer, featurizer: FeaturizerConfig) -> str:
    payload = {
        "dim": config.dim,
        "hidden": config.hidden,
        "tokenizer": {"vocab": tokenizer.vocab, "n_overflow": tokenizer.n_overflow},
        "featurizer": {
            "shapes": list(featurizer.shapes),
            "colors": list(featurizer.colors),
            "noise": featurizer.noise,
            "area_scale": featurizer.area_scale,
        },
    }
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]


def _warm_up_pretrained(params: EncoderParams, name_features: np.ndarray, config: ModelConfig):
    """Spread category-name embeddings apart so the frozen teacher is informative.

    A few SGD steps on a self-contrastive objective (each name is its own
    positive against all other names) leave distinct categories pointing in
    well-separated directions while names sharing words stay related.
    """
    for _ in range(config.warmup_steps):
        cache = forward(params, name_features)
        S = cache.Y @ cache.Y.T
        loss, dS = nce_from_similarities(S, np.eye(len(S), dtype=bool), config.warmup_tau)
        dY = dS @ cache.Y + dS.T @ cache.Y
        grads = backward(params, cache, dY)
        for key, arr in params.arrays().items():
            arr -= config.warmup_lr * getattr(grads, key)


def init_bundle(dataset: Dataset, config: ModelConfig, seed: int) -> EncoderBundle:
    """Seeded encoder initialization, including the teacher warm-up."""
    config.validate()
    if dataset.synth is None:
        raise ValueError("bundle initialization requires a synthetic dataset config")
    texts = [c.name for c in dataset.categories.values()]
    texts += [c.description for c in dataset.categories.values() if c.description]
    tokenizer = build_tokenizer(texts, n_overflow=config.n_overflow)
    featurizer = FeaturizerConfig(
        shapes=tuple(dataset.synth.shapes),
        colors=tuple(dataset.synth.colors),
        noise=dataset.synth.noise,
        area_scale=dataset.synth.area_scale,
    )
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    pretrained = init_params(tokenizer.dim, config.hidden, config.dim, rng)
    ctext = init_params(tokenizer.dim, config.hidden, config.dim, rng)
    cvis = init_params(featurizer.dim, config.hidden, config.dim, rng)
    names = sorted(c.name for c in dataset.categories.values())
    if names:
        feats = np.stack([featurize_text(tokenizer, n) for n in names])
        _warm_up_pretrained(pretrained, feats, config)
    pretrained.frozen = True
    return EncoderBundle(
        pretrained_text=pretrained,
        contrastive_text=ctext,
        contrastive_visual=cvis,
        tokenizer=tokenizer,
        featurizer=featurizer,
        config=config,
        config_hash=model_config_hash(config, tokenizer, featurizer),
    )


def _params_payload(p: EncoderParams) -> dict:
    return {
        "W1": p.W1.tolist(),
        "b1": p.b1.tolist(),
        "W2": p.W2.tolist(),
        "b2": p.b2.tolist(),
        "frozen": p.frozen,
    }


def _params_from_payload(payload: dict) -> EncoderParams:
    return EncoderParams(
        W1=np.array(payload["W1"], dtype=np.float64),
        b1=np.array(payload["b1"], dtype=np.float64),
        W2=np.array(payload["W2"], dtype=np.float64),
        b2=np.array(payload["b2"], dtype=np.float64),
        frozen=bool(payload["frozen"]),
    )


def checkpoint_payload(model: EncoderBundle | DeployedModel) -> dict:
    kind = "bundle" if isinstance(model, EncoderBundle) else "deployed"
    payload = {
        "format_version": 1,
        "kind": kind,
        "step": model.step,
        "config_hash": model.config_hash,
        "tokenizer": {"vocab": model.tokenizer.vocab, "n_overflow": model.tokenizer.n_overflow},
        "featurizer": {
            "shapes": list(model.featurizer.shapes),
            "colors": list(model.featurizer.colors),
            "noise": model.featurizer.noise,
            "area_scale": model.featurizer.area_scale,
        },
        "encoders": {name: _params_payload(p) for name, p in model.encoders().items()},
    }
    if kind == "bundle":
        payload["model_config"] = {
            "dim": model.config.dim,
            "hidden": model.config.hidden,
            "n_overflow": model.config.n_overflow,
            "warmup_steps": model.config.warmup_steps,
            "warmup_lr": model.config.warmup_lr,
            "warmup_tau": model.config.warmup_tau,
        }
    return payload


def save_checkpoint(model: EncoderBundle | DeployedModel, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(checkpoint_payload(model)))


def load_checkpoint(path) -> EncoderBundle | DeployedModel:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format_version") != 1:
        raise ValueError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    tokenizer = Tokenizer(
        vocab=dict(payload["tokenizer"]["vocab"]),
        n_overflow=int(payload["tokenizer"]["n_overflow"]),
    )
    featurizer = FeaturizerConfig(
        shapes=tuple(payload["featurizer"]["shapes"]),
        colors=tuple(payload["featurizer"]["colors"]),
        noise=float(payload["featurizer"]["noise"]),
        area_scale=float(payload["featurizer"].get("area_scale", 1.0)),
    )
    encoders = {k: _params_from_payload(v) for k, v in payload["encoders"].items()}
    if payload["kind"] == "bundle":
        mc = payload["model_config"]
        config = ModelConfig(
            dim=int(mc["dim"]),
            hidden=int(mc["hidden"]),
            n_overflow=int(mc["n_overflow"]),
            warmup_steps=int(mc["warmup_steps"]),
            warmup_lr=float(mc["warmup_lr"]),
            warmup_tau=float(mc["warmup_tau"]),
        )
        return EncoderBundle(
            pretrained_text=encoders["pretrained_text"],
            contrastive_text=encoders["contrastive_text"],
            contrastive_visual=encoders["contrastive_visual"],
            tokenizer=tokenizer,
            featurizer=featurizer,
            config=config,
            config_hash=payload["config_hash"],
            step=int(payload["step"]),
        )
    return DeployedModel(
        contrastive_text=encoders["contrastive_text"],
        contrastive_visual=encoders["contrastive_visual"],
        tokenizer=tokenizer,
        featurizer=featurizer,
        config_hash=payload["config_hash"],
        step=int(payload["step"]),
    )


# -- model-level conveniences --------------------------------------------------


def text_embedding(model, prompt: str) -> np.ndarray:
    """Contrastive-text embedding of a prompt (deployment text path)."""
    return encode(model.contrastive_text, featurize_text(model.tokenizer, prompt))


def region_embedding(model, dataset: Dataset, scene: Scene, box: Box) -> np.ndarray:
    """Contrastive-visual embedding of a scene crop."""
    feat = featurize_region(scene, box, model.featurizer, dataset.seed or 0)
    return encode(model.contrastive_visual, feat)
