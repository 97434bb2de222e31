"""End-to-end orchestration: corpus materialization, the training loop,
trial generation, scoring, and the ablation sweep. The CLI is a thin shell
over these functions so every experiment is reproducible in-process too."""

from __future__ import annotations

import itertools
import os
import time
from dataclasses import dataclass

import numpy as np

from .checkpoint import metadata_from_text, metadata_to_text, read_container, write_container
from .config import ConfigError, RunConfig
from .features import Utterance, chunk, featurize_wav, generate_synthetic_corpus
from .metrics import (DCFParams, ScoreSet, Trial, cosine_score, metrics_report,
                      read_trials, write_metrics_report, write_scores, write_trials)
from .model import (AAMHead, ModelSpec, SGDOptimizer, SpeakerEmbedder, build_model,
                    cosine_logits, extract_embedding, se_census, train_step)
from .nn import rng_for
from .se import SEConfig
from .tensor import Tensor, no_grad


class MissingArtifactError(FileNotFoundError):
    """A required input (corpus, checkpoint, scores...) is not on disk."""


MANIFEST_NAME = "manifest.tsv"
FEATURES_NAME = "features.sevx"
TRIALS_NAME = "trials.tsv"
CHECKPOINT_NAME = "checkpoint.sevx"
TRAIN_LOG_NAME = "train_log.tsv"
TRAIN_SUMMARY_NAME = "train_summary.tsv"
SCORES_NAME = "scores.tsv"
METRICS_NAME = "metrics.tsv"


# ---- corpus -----------------------------------------------------------------


def corpus_dir(config: RunConfig) -> str:
    return os.path.join(config.out_dir, "corpus")


def write_corpus(config: RunConfig) -> str:
    """Materialize the synthetic corpus: manifest, feature cache, trial list."""
    cdir = corpus_dir(config)
    os.makedirs(cdir, exist_ok=True)
    utts = generate_synthetic_corpus(config.synth_spec())
    cache_path = os.path.join(cdir, FEATURES_NAME)
    meta = {
        "corpus.kind": "synthetic",
        "corpus.num_speakers": str(config["data.num_speakers"]),
        "corpus.utts_per_speaker": str(config["data.utts_per_speaker"]),
        "corpus.seed": str(config.seed),
    }
    write_container(cache_path, metadata_to_text(meta),
                    ((u.utterance_id, u.features) for u in utts))
    with open(os.path.join(cdir, MANIFEST_NAME), "w", encoding="utf-8") as f:
        for u in utts:
            f.write(f"{u.utterance_id}\t{u.speaker_id}\t{cache_path}\n")
    trials = generate_trials(utts, config.seed)
    write_trials(os.path.join(cdir, TRIALS_NAME), trials)
    return cdir


def load_corpus(cdir: str) -> list[Utterance]:
    """Utterances from a manifest: cached features where present, otherwise
    the path column must name a WAV file to featurize on the fly."""
    manifest = os.path.join(cdir, MANIFEST_NAME)
    cache = os.path.join(cdir, FEATURES_NAME)
    if not os.path.exists(manifest):
        raise MissingArtifactError(
            f"corpus not found under {cdir} (run make-data first)")
    tensors = read_container(cache)[1] if os.path.exists(cache) else {}
    utts = []
    with open(manifest, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{manifest}:{lineno}: expected 3 tab-separated fields")
            utt_id, spk_id, path = parts
            if utt_id in tensors:
                feats = tensors[utt_id]
            elif path.endswith(".wav") and os.path.exists(path):
                feats = featurize_wav(path)
            else:
                raise MissingArtifactError(
                    f"{manifest}:{lineno}: utterance {utt_id!r} is neither cached "
                    f"nor backed by a WAV file at {path!r}")
            utts.append(Utterance(utt_id, spk_id, feats))
    return utts


def generate_trials(utts, seed: int) -> list[Trial]:
    """Same-speaker pairs across disjoint utterance halves as targets, plus an
    equal count of seeded random cross-speaker pairs as nontargets."""
    by_spk: dict[str, list[str]] = {}
    for u in utts:
        by_spk.setdefault(u.speaker_id, []).append(u.utterance_id)
    enroll: dict[str, list[str]] = {}
    test: dict[str, list[str]] = {}
    for spk, ids in sorted(by_spk.items()):
        ids = sorted(ids)
        half = (len(ids) + 1) // 2
        enroll[spk], test[spk] = ids[:half], ids[half:]
    targets = [
        Trial(e, t, "target")
        for spk in sorted(by_spk)
        for e in enroll[spk]
        for t in test[spk]
    ]
    speakers = sorted(by_spk)
    rng = rng_for(seed, "trials")
    nontargets: list[Trial] = []
    seen = set()
    attempts = 0
    while len(nontargets) < len(targets) and attempts < 100 * len(targets) + 1000:
        attempts += 1
        a, b = rng.choice(len(speakers), size=2, replace=False)
        spk_a, spk_b = speakers[a], speakers[b]
        if not enroll[spk_a] or not test[spk_b]:
            continue
        e = enroll[spk_a][rng.integers(len(enroll[spk_a]))]
        t = test[spk_b][rng.integers(len(test[spk_b]))]
        if (e, t) in seen:
            continue
        seen.add((e, t))
        nontargets.append(Trial(e, t, "nontarget"))
    return targets + nontargets


# ---- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    checkpoint_path: str
    final_loss: float
    train_accuracy: float
    params_total: int
    params_se: int
    steps: int


def build_training_set(utts, chunk_frames: int):
    """Fixed-order chunk tensor (n, 1, mel, chunk_frames) and label array."""
    speakers = sorted({u.speaker_id for u in utts})
    spk_index = {s: i for i, s in enumerate(speakers)}
    xs, ys = [], []
    for u in sorted(utts, key=lambda u: u.utterance_id):
        for c in chunk(u.features, length=chunk_frames):
            xs.append(c)
            ys.append(spk_index[u.speaker_id])
    if not xs:
        raise ValueError("no training chunks: utterances shorter than half a chunk")
    x = np.stack(xs)[:, None].astype(np.float32)
    y = np.asarray(ys, dtype=np.int64)
    return x, y, speakers


def lr_at(step: int, total_steps: int, base_lr: float, milestones, factor: float) -> float:
    passed = sum(1 for m in milestones if step >= int(m * total_steps))
    return base_lr * (factor ** passed)


def train_accuracy(model: SpeakerEmbedder, head: AAMHead, x: np.ndarray,
                   y: np.ndarray, batch_size: int = 64) -> float:
    hits = 0
    with no_grad():
        for i in range(0, len(x), batch_size):
            emb = model.forward_embedding(Tensor(x[i:i + batch_size]), train=False)
            logits = cosine_logits(emb, head)
            hits += int((logits.argmax(axis=1) == y[i:i + batch_size]).sum())
    return hits / len(x)


def run_training(config: RunConfig, utts, run_dir: str,
                 log_fn=None) -> TrainResult:
    os.makedirs(run_dir, exist_ok=True)
    x, y, speakers = build_training_set(utts, config["data.chunk_frames"])
    spec = config.model_spec(num_speakers=len(speakers))
    se_cfg = config.se_config()
    model = build_model(spec, se_cfg, seed=config.seed)
    head = AAMHead(len(speakers), spec.embedding_dim, seed=config.seed)
    named = list(model.named_parameters()) + list(head.named_parameters())
    opt = SGDOptimizer(named, lr=config["optim.lr"], momentum=config["optim.momentum"],
                       weight_decay=config["optim.weight_decay"])

    params_total = sum(p.size for _, p in named)
    params_se = sum(p.size for name, p in named if ".se." in name)
    if log_fn:
        log_fn(f"training: {len(x)} chunks, {len(speakers)} speakers, "
               f"params_total={params_total} params_se={params_se}")

    batch_size = config["optim.batch_size"]
    epochs = config["optim.epochs"]
    steps_per_epoch = max(1, (len(x) + batch_size - 1) // batch_size)
    total_steps = epochs * steps_per_epoch
    milestones = config.lr_milestones()
    order_rng = rng_for(config.seed, "batch-order")

    t0 = time.time()
    step = 0
    loss = float("nan")
    log_path = os.path.join(run_dir, TRAIN_LOG_NAME)
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("step\tepoch\tloss\tlr\twall_time\n")
        for epoch in range(epochs):
            perm = order_rng.permutation(len(x))
            for i in range(0, len(x), batch_size):
                idx = perm[i:i + batch_size]
                opt.lr = lr_at(step, total_steps, config["optim.lr"], milestones,
                               config["optim.lr_decay_factor"])
                loss = train_step(model, head, Tensor(x[idx]), y[idx], opt)
                step += 1
                log.write(f"{step}\t{epoch}\t{loss:.6f}\t{opt.lr:.6g}\t{time.time() - t0:.3f}\n")
            if log_fn:
                log_fn(f"epoch {epoch + 1}/{epochs} loss={loss:.4f}")

    acc = train_accuracy(model, head, x, y)
    ckpt_path = os.path.join(run_dir, CHECKPOINT_NAME)
    save_checkpoint(ckpt_path, model, head, config)
    with open(os.path.join(run_dir, TRAIN_SUMMARY_NAME), "w", encoding="utf-8") as f:
        f.write(f"params_total\t{params_total}\n")
        f.write(f"params_se\t{params_se}\n")
        f.write(f"params_se_closed_form\t{se_census(spec, se_cfg) if se_cfg.enabled else 0}\n")
        f.write(f"final_loss\t{loss:.6f}\n")
        f.write(f"train_accuracy\t{acc:.6f}\n")
        f.write(f"steps\t{step}\n")
    if log_fn:
        log_fn(f"final train accuracy {acc:.3f} after {step} steps")
    return TrainResult(ckpt_path, loss, acc, params_total, params_se, step)


# ---- checkpointing ----------------------------------------------------------


def save_checkpoint(path: str, model: SpeakerEmbedder, head: AAMHead,
                    config: RunConfig) -> None:
    meta: dict[str, str] = {}
    meta.update(model.spec.to_metadata())
    se_cfg = model.se_config if model.se_config is not None else SEConfig(stages=frozenset())
    meta.update(se_cfg.to_metadata())
    meta["head.scale"] = repr(head.scale)
    meta["head.margin"] = repr(head.margin)
    meta["seed"] = str(config.seed)
    tensors = [(name, p.data) for name, p in model.named_parameters()]
    tensors += [(name, buf) for name, buf in model.named_buffers()]
    tensors += [(name, p.data) for name, p in head.named_parameters()]
    write_container(path, metadata_to_text(meta), tensors)


def load_checkpoint(path: str) -> tuple[SpeakerEmbedder, AAMHead, dict[str, str]]:
    if not os.path.exists(path):
        raise MissingArtifactError(f"checkpoint not found: {path}")
    meta_text, tensors = read_container(path)
    meta = metadata_from_text(meta_text)
    spec = ModelSpec.from_metadata(meta)
    se_cfg = SEConfig.from_metadata(meta)
    seed = int(meta.get("seed", "0"))
    model = build_model(spec, se_cfg, seed=seed)
    head = AAMHead(spec.num_speakers, spec.embedding_dim,
                   scale=float(meta.get("head.scale", "30.0")),
                   margin=float(meta.get("head.margin", "0.4")), seed=seed)
    expected = {name for name, _ in model.named_parameters()}
    expected |= {name for name, _ in model.named_buffers()}
    expected |= {name for name, _ in head.named_parameters()}
    stored = set(tensors)
    if expected != stored:
        missing = sorted(expected - stored)[:5]
        extra = sorted(stored - expected)[:5]
        raise ValueError(
            f"{path}: tensor names do not match the model "
            f"(missing {missing}, unexpected {extra})")
    for name, p in model.named_parameters():
        p.data[...] = tensors[name].reshape(p.shape)
    buffer_owners = _buffer_owners(model)
    for name, arr in tensors.items():
        if name in buffer_owners:
            owner, attr = buffer_owners[name]
            owner.set_buffer(attr, arr)
    for name, p in head.named_parameters():
        p.data[...] = tensors[name].reshape(p.shape)
    return model, head, meta


def _buffer_owners(model: SpeakerEmbedder):
    owners = {}

    def visit(prefix, bn):
        owners[f"{prefix}.running_mean"] = (bn, "running_mean")
        owners[f"{prefix}.running_var"] = (bn, "running_var")

    visit("stem.bn", model.stem_bn)
    for si, blocks in enumerate(model.stages):
        for bi, blk in enumerate(blocks):
            base = getattr(blk, "block", blk)
            prefix = f"stage{si + 1}.block{bi}"
            visit(f"{prefix}.bn1", base.bn1)
            visit(f"{prefix}.bn2", base.bn2)
            if base.down_bn is not None:
                visit(f"{prefix}.down_bn", base.down_bn)
    return owners


# ---- scoring ----------------------------------------------------------------


def extract_embeddings(model: SpeakerEmbedder, utts) -> dict[str, np.ndarray]:
    out = {}
    for u in utts:
        out[u.utterance_id] = extract_embedding(
            model, Tensor(u.features[None, None].astype(np.float32)))
    return out


def score_trials(embeddings: dict[str, np.ndarray], trials) -> list[tuple[str, str, float]]:
    rows = []
    for t in trials:
        for utt in (t.enroll_id, t.test_id):
            if utt not in embeddings:
                raise MissingArtifactError(f"no embedding for utterance {utt!r}")
        rows.append((t.enroll_id, t.test_id,
                     cosine_score(embeddings[t.enroll_id], embeddings[t.test_id])))
    return rows


def evaluate_checkpoint(ckpt_path: str, utts, trials, dcf: DCFParams,
                        scores_path: str | None = None) -> dict[str, str]:
    model, _head, _meta = load_checkpoint(ckpt_path)
    needed_ids = {t.enroll_id for t in trials} | {t.test_id for t in trials}
    needed = [u for u in utts if u.utterance_id in needed_ids]
    emb = extract_embeddings(model, needed)
    rows = score_trials(emb, trials)
    if scores_path:
        write_scores(scores_path, rows)
    lookup = {(e, t): s for e, t, s in rows}
    scoreset = ScoreSet((t, lookup[(t.enroll_id, t.test_id)]) for t in trials)
    return metrics_report(scoreset, dcf)


# ---- ablation ---------------------------------------------------------------

GRID_AXES = {
    "stages": "se.stages",
    "r": "se.reduction",
    "h": "se.hidden_layers",
    "integration": "se.integration",
    "pooling": "se.pooling",
}


def parse_grid(text: str) -> dict[str, list[str]]:
    """Grid syntax: ``axis=v1|v2|...;axis2=...`` over stages/r/h/integration/pooling."""
    axes: dict[str, list[str]] = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        axis, _, values = part.partition("=")
        axis = axis.strip()
        if axis not in GRID_AXES:
            raise ConfigError(
                f"unknown grid axis {axis!r}; expected one of {sorted(GRID_AXES)}")
        axes[axis] = [v.strip() for v in values.split("|")]
    if not axes:
        raise ConfigError("empty ablation grid")
    return axes


def grid_cells(axes: dict[str, list[str]]):
    """Deterministic cross product of the grid axes."""
    names = [a for a in GRID_AXES if a in axes]
    for combo in itertools.product(*(axes[a] for a in names)):
        yield dict(zip(names, combo))


def cell_label(cell: dict[str, str]) -> str:
    parts = []
    for axis in GRID_AXES:
        if axis in cell:
            value = cell[axis] if cell[axis] != "" else "none"
            parts.append(f"{axis}={value}")
    return ",".join(parts)


def cell_dirname(cell: dict[str, str]) -> str:
    return cell_label(cell).replace(",", "_").replace("|", "-")


def apply_cell(config: RunConfig, cell: dict[str, str]) -> RunConfig:
    overrides = {GRID_AXES[axis]: value for axis, value in cell.items()}
    return config.with_overrides(**overrides)


def cell_feasible(config: RunConfig) -> tuple[bool, str]:
    se_cfg = config.se_config()
    if not se_cfg.enabled:
        return True, ""
    spec = config.model_spec()
    min_ch = min(spec.scaled_stage_channels[s - 1] for s in se_cfg.stages)
    if se_cfg.reduction_factor > min_ch:
        return False, (f"reduction {se_cfg.reduction_factor} exceeds the smallest "
                       f"SE stage width {min_ch}")
    return True, ""


def run_ablation(config: RunConfig, grid_text: str, log_fn=None) -> str:
    """Train and evaluate every grid cell with a shared seed, corpus, and
    batch order; emit one results row per cell."""
    axes = parse_grid(grid_text)
    utts = load_corpus(corpus_dir(config))
    trials = read_trials(os.path.join(corpus_dir(config), TRIALS_NAME))
    dcf = DCFParams(p_target=config["eval.p_target"], cost_miss=config["eval.c_miss"],
                    cost_fa=config["eval.c_fa"])
    abl_dir = os.path.join(config.out_dir, "ablation")
    os.makedirs(abl_dir, exist_ok=True)
    results_path = os.path.join(abl_dir, "results.tsv")
    with open(results_path, "w", encoding="utf-8") as f:
        f.write("cell\tstages\tr\th\tintegration\tpooling\tparams_total\tparams_se\t"
                "eer_percent\tmin_dcf\n")
        for cell in grid_cells(axes):
            label = cell_label(cell)
            cell_cfg = apply_cell(config, cell)
            ok, why = cell_feasible(cell_cfg)
            if not ok:
                if log_fn:
                    log_fn(f"skipping infeasible cell {label}: {why}")
                continue
            cdir = os.path.join(abl_dir, "cells", cell_dirname(cell))
            result = run_training(cell_cfg, utts, cdir, log_fn=log_fn)
            report = evaluate_checkpoint(
                result.checkpoint_path, utts, trials, dcf,
                scores_path=os.path.join(cdir, SCORES_NAME))
            write_metrics_report(os.path.join(cdir, METRICS_NAME), report)
            se_cfg = cell_cfg.se_config()
            f.write("\t".join([
                label,
                ",".join(map(str, sorted(se_cfg.stages))) if se_cfg.enabled else "-",
                str(se_cfg.reduction_factor),
                str(se_cfg.hidden_layers),
                se_cfg.integration,
                se_cfg.pooling,
                str(result.params_total),
                str(result.params_se),
                report["eer_percent"],
                report["min_dcf"],
            ]) + "\n")
            if log_fn:
                log_fn(f"cell {label}: eer={report['eer_percent']}% "
                       f"min_dcf={report['min_dcf']}")
    return results_path
