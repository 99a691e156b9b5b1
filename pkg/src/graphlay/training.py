"""Training loop, checkpoint selection, and summary generation.

Training runs full teacher-forced epochs with Adam, records the mean
validation ROUGE (average of R1/R2/RL F1) after each epoch (or every
``val_every`` epochs), and keeps the parameters of the best-scoring epoch;
ties resolve to the earliest epoch.  Generation is length-normalized beam
search, degenerating to greedy argmax at beam size 1.
"""
from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import model as M
from .augment import augment_article, format_augmentation
from .concepts import extract_article_concepts, select_salient_concepts
from .corpus import Article, Lexicon, token_surfaces
from .errors import GraphlayError, TrainingDivergedError
from .graph import GraphFeatures, build_graph, init_node_features
from .metrics import rouge_l, rouge_n
from .model import (
    BOS_ID,
    EOS_ID,
    ModelConfig,
    Sample,
    Vocab,
    decode_step,
    encode_memory,
    forward_loss,
    init_params,
    save_checkpoint,
)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    max_epochs: int = 20
    batch_size: int = 8
    val_every: int = 1
    max_steps: int | None = None
    grad_clip: float = 1.0
    max_summary_len: int = 64
    beam_size: int = 1  # decoding used for validation scoring

    def to_json_dict(self) -> dict:
        return {
            "lr": self.lr,
            "max_epochs": self.max_epochs,
            "batch_size": self.batch_size,
            "val_every": self.val_every,
            "max_steps": self.max_steps,
            "grad_clip": self.grad_clip,
            "max_summary_len": self.max_summary_len,
            "beam_size": self.beam_size,
        }


# ---------------------------------------------------------------------------
# Optimizer


class Adam:
    def __init__(self, params: Mapping[str, M.Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grad_clip: float | None = None) -> None:
        self.t += 1
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if grad_clip is not None and grad_clip > 0:
            total = math.sqrt(sum(float((g**2).sum()) for g in grads.values()))
            if total > grad_clip:
                factor = grad_clip / total
                grads = {k: g * factor for k, g in grads.items()}
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            m_hat = self.m[k] / (1 - self.b1**self.t)
            v_hat = self.v[k] / (1 - self.b2**self.t)
            self.params[k].data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Vocabulary and example preparation


def build_vocab(corpus: Sequence[Article], lexicon: Lexicon | None = None) -> Vocab:
    """Frequency-sorted vocabulary over corpus text, summaries, and (so that
    augmented inputs never hit <unk>) the lexicon's names and definitions."""
    counts: Counter[str] = Counter()
    for art in corpus:
        counts.update(token_surfaces(art.full_text()))
        counts.update(art.keywords)
        if art.lay_summary:
            counts.update(token_surfaces(art.lay_summary))
    if lexicon is not None:
        for concept in lexicon.concepts.values():
            for name in concept.names:
                counts.update(token_surfaces(name))
            counts.update(token_surfaces(concept.definition))
        for st in lexicon.semtypes.values():
            counts.update(token_surfaces(st.name))
            counts.update(token_surfaces(st.definition))
    ordered = sorted(counts, key=lambda w: (-counts[w], w))
    return Vocab(ordered)


def build_graph_inputs(
    corpus: Sequence[Article],
    lexicon: Lexicon,
    config: ModelConfig,
) -> dict[str, GraphFeatures]:
    """Article graphs plus encoder-ready features for every article."""
    out = {}
    for art in corpus:
        scmap = extract_article_concepts(art, lexicon)
        g = build_graph(art, scmap, lexicon)
        out[art.id] = init_node_features(g, art, lexicon, d_text=config.d_text, K=config.rwpe_K)
    return out


def model_input_text(article: Article, lexicon: Lexicon, config: ModelConfig) -> str:
    """The text the encoder sees; prepends concept definitions under text_aug."""
    text = article.full_text()
    if "text_aug" in config.enhancement:
        scmap = extract_article_concepts(article, lexicon)
        salient = select_salient_concepts(scmap)
        text = augment_article(text, format_augmentation(salient, lexicon))
    return text


def prepare_samples(
    corpus: Sequence[Article],
    lexicon: Lexicon,
    config: ModelConfig,
    vocab: Vocab,
    graphs: Mapping[str, GraphFeatures] | None = None,
) -> dict[str, Sample]:
    """Token-level samples keyed by article id."""
    if graphs is None and config.uses_graph:
        graphs = build_graph_inputs(corpus, lexicon, config)
    samples = {}
    for art in corpus:
        input_ids = vocab.encode(token_surfaces(model_input_text(art, lexicon, config)))
        input_ids = input_ids[: config.effective_max_input]
        target_ids = None
        if art.lay_summary:
            target_ids = np.concatenate([vocab.encode(token_surfaces(art.lay_summary)), [EOS_ID]])
        graph = graphs.get(art.id) if graphs else None
        if config.uses_graph and graph is None:
            raise GraphlayError(f"article {art.id!r}: graph required by variant but missing")
        samples[art.id] = Sample(input_ids=input_ids, target_ids=target_ids, graph=graph)
    return samples


# ---------------------------------------------------------------------------
# Generation


def generate(
    params: Mapping[str, M.Tensor],
    config: ModelConfig,
    sample: Sample,
    beam_size: int = 4,
    max_len: int = 64,
    min_len: int = 1,
) -> list[int]:
    """Length-normalized beam search (alpha = 1); beam 1 is greedy argmax.

    Returns generated token ids without BOS/EOS.  The score of a finished
    sequence is its total log-probability divided by its length.
    """
    if beam_size < 1:
        raise GraphlayError("beam_size must be >= 1")
    h_mem, h_g = encode_memory(sample, params, config)
    graph_arg = h_g if "decoder_attn" in config.enhancement else None

    def step_logprobs(prefix: tuple[int, ...]) -> np.ndarray:
        logits = decode_step(np.array(prefix), h_mem, graph_arg, params, config).data[-1]
        shifted = logits - logits.max()
        return shifted - math.log(np.exp(shifted).sum())

    beams: list[tuple[tuple[int, ...], float]] = [((BOS_ID,), 0.0)]
    finished: list[tuple[tuple[int, ...], float]] = []
    for step in range(max_len):
        candidates: list[tuple[float, tuple[int, ...]]] = []
        for prefix, cum in beams:
            logprobs = step_logprobs(prefix)
            if step < min_len:
                logprobs = logprobs.copy()
                logprobs[EOS_ID] = -np.inf
            top = np.argsort(-logprobs, kind="stable")[: beam_size + 1]
            for tok in top:
                candidates.append((cum + float(logprobs[tok]), prefix + (int(tok),)))
        candidates.sort(key=lambda c: (-c[0], c[1]))
        beams = []
        for cum, seq in candidates:
            if seq[-1] == EOS_ID:
                length = len(seq) - 2  # exclude BOS and EOS
                if length >= min_len:
                    finished.append((seq, cum / max(1, length)))
                continue
            beams.append((seq, cum))
            if len(beams) == beam_size:
                break
        if not beams:
            break
    for seq, cum in beams:
        finished.append((seq, cum / max(1, len(seq) - 1)))
    finished.sort(key=lambda c: (-c[1], c[0]))
    best = finished[0][0]
    return [t for t in best if t not in (BOS_ID, EOS_ID)]


def sequence_score(
    params: Mapping[str, M.Tensor],
    config: ModelConfig,
    sample: Sample,
    token_ids: Sequence[int],
) -> float:
    """Length-normalized log-probability of a generated sequence."""
    h_mem, h_g = encode_memory(sample, params, config)
    graph_arg = h_g if "decoder_attn" in config.enhancement else None
    targets = np.concatenate([np.asarray(token_ids, dtype=np.int64), [EOS_ID]])
    dec_in = np.concatenate([[BOS_ID], targets[:-1]])
    logits = decode_step(dec_in, h_mem, graph_arg, params, config).data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    logprobs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    total = float(logprobs[np.arange(len(targets)), targets].sum())
    return total / max(1, len(token_ids))


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    config: ModelConfig
    train_config: TrainConfig
    vocab: Vocab
    best_params: dict[str, M.Tensor]
    final_params: dict[str, M.Tensor]
    best_epoch: int
    epoch_log: list[dict] = field(default_factory=list)


def select_checkpoint(val_scores: Sequence[tuple[int, float]]) -> int:
    """Epoch with the highest mean ROUGE; ties go to the earliest epoch."""
    if not val_scores:
        raise GraphlayError("select_checkpoint requires at least one score")
    best_epoch, best_score = val_scores[0]
    for epoch, score in val_scores[1:]:
        if score > best_score:
            best_epoch, best_score = epoch, score
    return best_epoch


def mean_rouge(candidate: str, reference: str) -> float:
    return (
        rouge_n(candidate, reference, 1).f1
        + rouge_n(candidate, reference, 2).f1
        + rouge_l(candidate, reference).f1
    ) / 3.0


def _clone_params(params: Mapping[str, M.Tensor]) -> dict[str, M.Tensor]:
    return {k: M.parameter(p.data.copy()) for k, p in params.items()}


def _val_score(
    params: Mapping[str, M.Tensor],
    config: ModelConfig,
    vocab: Vocab,
    samples: Mapping[str, Sample],
    references: Mapping[str, str],
    ids: Sequence[str],
    train_config: TrainConfig,
) -> float:
    scores = []
    for art_id in ids:
        ids_out = generate(
            params,
            config,
            samples[art_id],
            beam_size=train_config.beam_size,
            max_len=train_config.max_summary_len,
        )
        scores.append(mean_rouge(" ".join(vocab.decode(ids_out)), references[art_id]))
    return sum(scores) / len(scores) if scores else 0.0


def train(
    corpus: Sequence[Article],
    graphs: Mapping[str, GraphFeatures] | None,
    config: ModelConfig,
    lexicon: Lexicon,
    train_config: TrainConfig = TrainConfig(),
    val_ids: Sequence[str] | None = None,
    run_dir: str | Path | None = None,
) -> TrainResult:
    """Train one enhancement variant and keep the best-validation checkpoint.

    ``val_ids`` names the validation articles (they are excluded from the
    gradient batches unless they are the whole corpus); when omitted, the
    last quarter of the corpus is used.  Raises TrainingDivergedError as
    soon as the loss stops being finite.
    """
    by_id = {a.id: a for a in corpus}
    references = {a.id: a.lay_summary or "" for a in corpus}
    if val_ids is None:
        n_val = max(1, len(corpus) // 4) if len(corpus) > 1 else 1
        val_ids = [a.id for a in corpus[-n_val:]]
    val_ids = list(val_ids)
    train_ids = [a.id for a in corpus if a.id not in set(val_ids)] or list(val_ids)

    vocab = build_vocab(corpus, lexicon)
    full_config = ModelConfig(**{**config.to_json_dict(), "vocab_size": len(vocab),
                                 "enhancement": config.enhancement})
    samples = prepare_samples(corpus, lexicon, full_config, vocab, graphs)
    for art_id in train_ids:
        if samples[art_id].target_ids is None:
            raise GraphlayError(f"article {art_id!r} has no lay summary to train on")

    params = init_params(full_config)
    optimizer = Adam(params, lr=train_config.lr)
    rng = random.Random(full_config.seed)

    run_path = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run_path is not None:
        run_path.mkdir(parents=True, exist_ok=True)
        (run_path / "checkpoints").mkdir(exist_ok=True)
        (run_path / "config.json").write_text(
            json.dumps(
                {"model": full_config.to_json_dict(), "train": train_config.to_json_dict(),
                 "variant": M.variant_label(full_config.enhancement),
                 "val_ids": val_ids},
                indent=2,
                sort_keys=True,
            )
            + "\n",
            encoding="utf-8",
        )
        log_fh = (run_path / "epochs.jsonl").open("w", encoding="utf-8")

    epoch_log: list[dict] = []
    val_scores: list[tuple[int, float]] = []
    best_params = _clone_params(params)
    steps = 0
    stop = False
    try:
        for epoch in range(1, train_config.max_epochs + 1):
            order = list(train_ids)
            rng.shuffle(order)
            losses = []
            for start in range(0, len(order), train_config.batch_size):
                batch = [samples[i] for i in order[start : start + train_config.batch_size]]
                optimizer.zero_grad()
                loss = forward_loss(batch, params, full_config)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss {value!r} at epoch {epoch}, step {steps + 1}"
                    )
                loss.backward()
                optimizer.step(grad_clip=train_config.grad_clip)
                losses.append(value)
                steps += 1
                if train_config.max_steps is not None and steps >= train_config.max_steps:
                    stop = True
                    break
            record: dict = {"epoch": epoch, "steps": steps, "train_loss": sum(losses) / max(1, len(losses))}
            if epoch % train_config.val_every == 0 or stop or epoch == train_config.max_epochs:
                score = _val_score(params, full_config, vocab, samples, references, val_ids, train_config)
                record["val_mean_rouge"] = score
                val_scores.append((epoch, score))
                if select_checkpoint(val_scores) == epoch:
                    best_params = _clone_params(params)
            epoch_log.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()
            if stop:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    best_epoch = select_checkpoint(val_scores) if val_scores else 0
    result = TrainResult(
        config=full_config,
        train_config=train_config,
        vocab=vocab,
        best_params=best_params,
        final_params=params,
        best_epoch=best_epoch,
        epoch_log=epoch_log,
    )
    if run_path is not None:
        save_checkpoint(run_path / "checkpoints" / "best.json", full_config, vocab, best_params)
    return result


def write_outputs(
    result_or_ckpt: TrainResult | tuple,
    corpus: Sequence[Article],
    lexicon: Lexicon,
    out_path: str | Path,
    beam_size: int = 4,
    max_len: int = 64,
) -> dict[str, str]:
    """Generate summaries for every article and write outputs.jsonl."""
    if isinstance(result_or_ckpt, TrainResult):
        config, vocab, params = result_or_ckpt.config, result_or_ckpt.vocab, result_or_ckpt.best_params
    else:
        config, vocab, params = result_or_ckpt
    samples = prepare_samples(corpus, lexicon, config, vocab)
    summaries = {}
    for art in sorted(corpus, key=lambda a: a.id):
        ids_out = generate(params, config, samples[art.id], beam_size=beam_size, max_len=max_len)
        summaries[art.id] = " ".join(vocab.decode(ids_out))
    with Path(out_path).open("w", encoding="utf-8") as fh:
        for art_id in sorted(summaries):
            fh.write(json.dumps({"id": art_id, "summary": summaries[art_id]}, sort_keys=True) + "\n")
    return summaries
