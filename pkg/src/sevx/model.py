"""ResNet-34 speaker embedding extractor with SE wiring, the additive
angular margin head, and the SGD-with-momentum training step."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import BasicBlock, BatchNorm2d, Conv2d, Linear, rng_for, temporal_stats_pool
from .se import SEConfig, SEUnit, SEWiredBlock, integrate_se
from .tensor import NumericError, ShapeError, Tensor, no_grad


@dataclass(frozen=True)
class ModelSpec:
    """Topology description of the extractor.

    ``scale_factor`` shrinks every channel width (stem and stages) so the
    same topology runs at desk scale; the embedding dim is untouched.
    """

    stage_blocks: tuple[int, ...] = (3, 4, 6, 3)
    stage_channels: tuple[int, ...] = (128, 128, 256, 256)
    stage_strides: tuple[int, ...] = (1, 2, 2, 2)
    stem_channels: int = 128
    input_mel_bins: int = 60
    segment_frames: int = 400
    embedding_dim: int = 256
    num_speakers: int = 20
    scale_factor: float = 1.0
    temporal_pooling: str = "mean"

    def __post_init__(self):
        if not (len(self.stage_blocks) == len(self.stage_channels) == len(self.stage_strides) == 4):
            raise ValueError("stage arrays must all have length 4")
        if self.embedding_dim <= 0:
            raise ValueError("embedding_dim must be positive")
        if self.num_speakers < 2:
            raise ValueError("num_speakers must be >= 2")
        if self.temporal_pooling not in ("mean", "mean_std"):
            raise ValueError("temporal_pooling must be 'mean' or 'mean_std'")

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.scale_factor)))

    @property
    def scaled_stage_channels(self) -> tuple[int, ...]:
        return tuple(self.scaled(c) for c in self.stage_channels)

    @property
    def scaled_stem_channels(self) -> int:
        return self.scaled(self.stem_channels)

    def to_metadata(self) -> dict[str, str]:
        return {
            "model.stage_blocks": ",".join(map(str, self.stage_blocks)),
            "model.stage_channels": ",".join(map(str, self.stage_channels)),
            "model.stage_strides": ",".join(map(str, self.stage_strides)),
            "model.stem_channels": str(self.stem_channels),
            "model.input_mel_bins": str(self.input_mel_bins),
            "model.segment_frames": str(self.segment_frames),
            "model.embedding_dim": str(self.embedding_dim),
            "model.num_speakers": str(self.num_speakers),
            "model.scale_factor": repr(self.scale_factor),
            "model.temporal_pooling": self.temporal_pooling,
        }

    @classmethod
    def from_metadata(cls, meta: dict[str, str]) -> "ModelSpec":
        def ints(key, default):
            if key not in meta:
                return default
            return tuple(int(v) for v in meta[key].split(","))

        return cls(
            stage_blocks=ints("model.stage_blocks", (3, 4, 6, 3)),
            stage_channels=ints("model.stage_channels", (128, 128, 256, 256)),
            stage_strides=ints("model.stage_strides", (1, 2, 2, 2)),
            stem_channels=int(meta.get("model.stem_channels", "128")),
            input_mel_bins=int(meta.get("model.input_mel_bins", "60")),
            segment_frames=int(meta.get("model.segment_frames", "400")),
            embedding_dim=int(meta.get("model.embedding_dim", "256")),
            num_speakers=int(meta.get("model.num_speakers", "20")),
            scale_factor=float(meta.get("model.scale_factor", "1.0")),
            temporal_pooling=meta.get("model.temporal_pooling", "mean"),
        )


class SpeakerEmbedder:
    """The full extractor: stem conv, four residual stages, temporal pooling,
    and the dense embedding layer."""

    def __init__(self, spec: ModelSpec, se_config: SEConfig | None = None,
                 seed: int = 1234, dtype=np.float32):
        self.spec = spec
        self.se_config = se_config if se_config is not None and se_config.enabled else None
        self.seed = seed
        self.dtype = dtype

        stem_ch = spec.scaled_stem_channels
        self.stem_conv = Conv2d(1, stem_ch, stride=(1, 1), rng=rng_for(seed, "stem.conv"), dtype=dtype)
        self.stem_bn = BatchNorm2d(stem_ch, dtype=dtype)

        self.stages: list[list] = []
        in_ch = stem_ch
        for si in range(4):
            stage_num = si + 1
            out_ch = spec.scaled_stage_channels[si]
            blocks = []
            for bi in range(spec.stage_blocks[si]):
                stride = spec.stage_strides[si] if bi == 0 else 1
                name = f"stage{stage_num}.block{bi}"
                block = BasicBlock(in_ch, out_ch, stride, name=name, seed=seed, dtype=dtype)
                if self.se_config is not None and stage_num in self.se_config.stages:
                    block = integrate_se(block, self.se_config, seed=seed, dtype=dtype)
                blocks.append(block)
                in_ch = out_ch
            self.stages.append(blocks)

        # flatten width after pooling: channels * freq (all stride-2 stages halve freq)
        freq_out = spec.input_mel_bins
        for s in spec.stage_strides:
            if s == 2:
                freq_out = (freq_out + 2 - 3) // 2 + 1
        self.freq_out = freq_out
        flat = in_ch * freq_out * (2 if spec.temporal_pooling == "mean_std" else 1)
        self.flatten_dim = flat
        self.embed = Linear(flat, spec.embedding_dim, rng=rng_for(seed, "embed"), dtype=dtype)

    # ---- forward ---------------------------------------------------------

    def forward_embedding(self, x: Tensor, train: bool) -> Tensor:
        h = self.stem_bn.forward(self.stem_conv.forward(x), train).relu()
        for blocks in self.stages:
            for block in blocks:
                h = block.forward(h, train)
        pooled = temporal_stats_pool(h, mode=self.spec.temporal_pooling)
        return self.embed.forward(pooled)

    def stage_outputs(self, x: Tensor, train: bool = False) -> list[Tensor]:
        """Per-stage feature maps, for shape conformance checks."""
        h = self.stem_bn.forward(self.stem_conv.forward(x), train).relu()
        outs = []
        for blocks in self.stages:
            for block in blocks:
                h = block.forward(h, train)
            outs.append(h)
        return outs

    # ---- parameter plumbing ----------------------------------------------

    def named_parameters(self):
        yield from self.stem_conv.named_parameters("stem.conv")
        yield from self.stem_bn.named_parameters("stem.bn")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                yield from block.named_parameters(f"stage{si + 1}.block{bi}")
        yield from self.embed.named_parameters("embed")

    def named_buffers(self):
        yield from self.stem_bn.named_buffers("stem.bn")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                yield from block.named_buffers(f"stage{si + 1}.block{bi}")

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def se_parameter_count(self) -> int:
        return sum(p.size for name, p in self.named_parameters() if ".se." in name)

    def se_units_by_stage(self) -> dict[int, list[SEUnit]]:
        out: dict[int, list[SEUnit]] = {}
        for si, blocks in enumerate(self.stages):
            units = [b.unit for b in blocks if isinstance(b, SEWiredBlock)]
            if units:
                out[si + 1] = units
        return out


def build_model(spec: ModelSpec, se_config: SEConfig | None = None,
                seed: int = 1234, dtype=np.float32) -> SpeakerEmbedder:
    # r > C stays buildable (SE hidden width floors at 1); the ablation harness
    # is the layer that skips such cells
    return SpeakerEmbedder(spec, se_config, seed=seed, dtype=dtype)


def se_census(spec: ModelSpec, config: SEConfig) -> int:
    """Closed-form SE parameter count over all blocks of the selected stages.

    PRE units gate block inputs, so the first block of a stage uses the
    incoming width; all other cases use the stage width.
    """
    total = 0
    for stage in sorted(config.stages):
        c = spec.scaled_stage_channels[stage - 1]
        n_blocks = spec.stage_blocks[stage - 1]
        if config.integration == "pre":
            c_in = spec.scaled_stem_channels if stage == 1 else spec.scaled_stage_channels[stage - 2]
            total += config.unit_parameter_count(c_in)
            total += (n_blocks - 1) * config.unit_parameter_count(c)
        else:
            total += n_blocks * config.unit_parameter_count(c)
    return total


# ---- AAM-softmax ------------------------------------------------------------


class AAMHead:
    """Additive angular margin classification head.

    Class weight rows are L2-normalized in-graph before use; the target
    class logit is s*cos(theta + m), everything else s*cos(theta).
    """

    def __init__(self, num_speakers: int, embedding_dim: int, scale: float = 30.0,
                 margin: float = 0.4, rng: np.random.Generator | None = None,
                 seed: int = 1234, dtype=np.float32):
        if not (0 <= margin < math.pi / 2):
            raise ValueError("margin must be in [0, pi/2)")
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.num_speakers = num_speakers
        self.embedding_dim = embedding_dim
        self.scale = scale
        self.margin = margin
        rng = rng if rng is not None else rng_for(seed, "head.class_weights")
        bound = 1.0 / math.sqrt(embedding_dim)
        self.class_weights = Tensor(
            rng.uniform(-bound, bound, size=(num_speakers, embedding_dim)).astype(dtype),
            requires_grad=True, dtype=dtype)

    def named_parameters(self):
        yield "head.class_weights", self.class_weights


def _rows_normalized(t: Tensor, what: str) -> Tensor:
    norms_sq = (t * t).sum(axis=1, keepdims=True)
    if np.any(norms_sq.data == 0):
        raise NumericError(f"{what}: zero-norm row")
    return t / norms_sq.sqrt()


def _sin_from_cos(c: Tensor) -> Tensor:
    """sin(theta) from cos(theta), gradient-safe at |cos| = 1.

    Forward: sqrt of 1 - cos^2 clipped into [0, 1]. Backward uses -c/sin with
    a zero subgradient where sin underflows, so saturated cosines cannot
    inject NaN/Inf into the tape.
    """
    data = np.sqrt(np.clip(1.0 - c.data * c.data, 0.0, 1.0))

    def backward(g):
        safe = data > 1e-6
        gc = np.where(safe, -c.data / np.where(safe, data, 1.0), 0.0)
        c._accum(g * gc)

    return Tensor._from_op(data, (c,), backward)


def aam_loss(embeddings: Tensor, labels, head: AAMHead) -> Tensor:
    """Mean AAM-softmax cross-entropy over the batch.

    cos(theta + m) is computed as cos*cos(m) - sin*sin(m); where theta + m
    would pass pi the target logit is clamped at cos(pi) = -1, which keeps
    the margin penalty monotone.
    """
    labels = np.asarray(labels, dtype=np.int64)
    b, e = embeddings.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= head.num_speakers:
        raise ValueError(
            f"labels must lie in [0, {head.num_speakers}), got range "
            f"[{labels.min()}, {labels.max()}]")

    emb_n = _rows_normalized(embeddings, "aam_loss embeddings")
    w_n = _rows_normalized(head.class_weights, "aam_loss class weights")
    cos = emb_n @ w_n.transpose()

    m = head.margin
    sin = _sin_from_cos(cos)
    phi = cos * math.cos(m) - sin * math.sin(m)
    # clamp theta + m at pi: beyond it, cos(theta + m) would turn back up
    feasible = Tensor((cos.data >= math.cos(math.pi - m)).astype(cos.data.dtype))
    phi = phi * feasible + (feasible - 1.0)

    onehot = np.zeros((b, head.num_speakers), dtype=cos.data.dtype)
    onehot[np.arange(b), labels] = 1.0
    mask = Tensor(onehot)
    logits = (phi * mask + cos * (1.0 - mask)) * head.scale
    logp = logits.log_softmax(axis=1)
    return -(logp * mask).sum() / float(b)


def cosine_logits(embeddings: Tensor, head: AAMHead) -> np.ndarray:
    """Margin-free cosine similarities to every class row, for accuracy
    reporting."""
    with no_grad():
        emb_n = _rows_normalized(embeddings, "cosine_logits embeddings")
        w_n = _rows_normalized(head.class_weights, "cosine_logits class weights")
        return (emb_n @ w_n.transpose()).data


# ---- optimizer --------------------------------------------------------------


class SGDOptimizer:
    """SGD with momentum and L2 weight decay.

    Update: v <- mu*v + g + wd*theta; theta <- theta - lr*v. Parameters
    whose grad is unset are skipped (their buffers stay untouched).
    """

    def __init__(self, named_params, lr: float = 0.2, momentum: float = 0.9,
                 weight_decay: float = 2e-4):
        self.params: list[tuple[str, Tensor]] = list(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None:
                continue
            v = self.buffers[name]
            v *= self.momentum
            v += p.grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data -= self.lr * v


def train_step(model: SpeakerEmbedder, head: AAMHead, batch: Tensor, labels,
               opt: SGDOptimizer) -> float:
    """One SGD step; returns the pre-update loss.

    Aborts with a diagnostic naming the first non-finite parameter gradient
    if the loss or any gradient goes non-finite.
    """
    emb = model.forward_embedding(batch, train=True)
    loss = aam_loss(emb, labels, head)
    loss_val = float(loss.data)
    opt.zero_grad()
    loss.backward()
    bad = None
    for name, p in opt.params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = name
            break
    if not math.isfinite(loss_val) or bad is not None:
        raise NumericError(
            f"non-finite training step: loss={loss_val}, first non-finite gradient: "
            f"{bad if bad is not None else '(none)'}")
    opt.step()
    return loss_val


def extract_embedding(model: SpeakerEmbedder, features: Tensor) -> np.ndarray:
    """Embedding for one utterance (1, 1, mel, T), eval mode, grad-free."""
    if features.ndim != 4 or features.shape[0] != 1:
        raise ShapeError(f"extract_embedding expects (1, 1, mel, T), got {features.shape}")
    t = features.shape[3]
    if t < 8:
        raise ShapeError(f"segment too short: T={t} < 8 frames (three stride-2 reductions)")
    with no_grad():
        emb = model.forward_embedding(features, train=False)
    return emb.data.reshape(-1).copy()
