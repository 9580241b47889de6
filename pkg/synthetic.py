"""
Synthetic paired data with planted image/text alignment.

Every pair draws a few concepts from a shared pool. On the image side each
concept shows up as patches near the concept's image vector. On the text side
each concept is a two-token phrase whose token embeddings sum to the concept's
text vector, while each token on its own is mostly noise, so only the bagged
phrase carries the concept.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from bagging import Vocabulary, build_helper, load_vocabulary, save_vocabulary
from contrastive import PairedSample, TextEncoder
from embedding_core import EmbeddingMatrix, ToyMixer
from errors import FormatError
from formats import read_embedding_file, write_embedding_file
from retrieval import save_qrels
from similarity import ItemEmbedding, PaddingMask

logger = logging.getLogger(__name__)

CORPUS_FORMAT = "bagrank-corpus"
CORPUS_VERSION = 1
CLS_TOKEN = 0


@dataclass
class SyntheticSpec:
    """Shape of the planted corpus"""
    pairs: int = 32
    seed: int = 0
    concepts: int = 48
    per_pair: int = 3
    patches_per_concept: int = 2
    d_img: int = 32
    d_txt: int = 32
    latent: int = 16
    fillers: int = 8
    noise: float = 0.1
    mixer_scale: float = 0.5


def pair_id(index: int) -> str:
    return f"p{index:05d}"


def concept_tokens(concept: int) -> Tuple[int, int]:
    return 1 + 2 * concept, 2 + 2 * concept


def generate_corpus(spec: SyntheticSpec) -> Tuple[List[PairedSample], TextEncoder, Vocabulary]:
    """Token-level pairs plus the frozen text encoder they are read with."""
    rng = np.random.default_rng(spec.seed)
    latents = rng.standard_normal((spec.concepts, spec.latent)) / np.sqrt(spec.latent)
    to_img = rng.standard_normal((spec.latent, spec.d_img)) / np.sqrt(spec.latent)
    to_txt = rng.standard_normal((spec.latent, spec.d_txt)) / np.sqrt(spec.latent)

    vocab_size = 1 + 2 * spec.concepts + spec.fillers
    table = np.zeros((vocab_size, spec.d_txt))
    table[CLS_TOKEN] = rng.standard_normal(spec.d_txt) * 0.1
    text_vectors = latents @ to_txt
    for c in range(spec.concepts):
        first, second = concept_tokens(c)
        split = rng.standard_normal(spec.d_txt) * np.linalg.norm(text_vectors[c]) / np.sqrt(spec.d_txt)
        table[first] = 0.5 * text_vectors[c] + split
        table[second] = 0.5 * text_vectors[c] - split
    filler_ids = np.arange(1 + 2 * spec.concepts, vocab_size)
    table[filler_ids] = rng.standard_normal((spec.fillers, spec.d_txt)) * 0.2

    phrases = [list(concept_tokens(c)) for c in range(spec.concepts)]
    # some first tokens are entries on their own; longest match still takes the phrase
    phrases += [[concept_tokens(c)[0]] for c in range(0, spec.concepts, 4)]
    vocab = Vocabulary.from_token_sequences(phrases)

    image_vectors = latents @ to_img
    samples = []
    for p in range(spec.pairs):
        chosen = rng.choice(spec.concepts, size=spec.per_pair, replace=False)
        patch_concepts = np.repeat(chosen, spec.patches_per_concept)
        rng.shuffle(patch_concepts)
        patches = image_vectors[patch_concepts] + spec.noise * rng.standard_normal((patch_concepts.size, spec.d_img))
        cls = image_vectors[chosen].mean(axis=0) + spec.noise * rng.standard_normal(spec.d_img)
        image = EmbeddingMatrix(np.vstack([cls[None, :], patches]))

        tokens = [CLS_TOKEN]
        filler_at = int(rng.integers(0, spec.per_pair + 1))
        for slot, c in enumerate(rng.permutation(chosen)):
            if slot == filler_at and spec.fillers:
                tokens.append(int(rng.choice(filler_ids)))
            tokens.extend(concept_tokens(int(c)))
        if filler_at == spec.per_pair and spec.fillers:
            tokens.append(int(rng.choice(filler_ids)))
        samples.append(PairedSample(pair_id(p), image, tuple(tokens)))

    encoder = TextEncoder(EmbeddingMatrix(table),
                          ToyMixer.from_seed(spec.d_txt, spec.seed + 1, spec.mixer_scale),
                          build_helper(vocab))
    logger.info("generated %d planted pairs over %d concepts", spec.pairs, spec.concepts)
    return samples, encoder, vocab


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def generate_joint_items(pairs: int, seed: int, dim: int = 64, patches: int = 16,
                         per_pair: int = 3, concepts: int = 48, noise: float = 0.3,
                         ) -> Tuple[List[ItemEmbedding], List[ItemEmbedding]]:
    """
    Joint-space images (CLS + patches) and texts (CLS + bags) sharing latent concepts.

    Each modality gets its own noise; text bags carry one concept each plus a
    padded slot, image patches cycle through the pair's concepts.
    """
    rng = np.random.default_rng(seed)
    pool = _unit(rng.standard_normal((concepts, dim)))
    images, texts = [], []
    for p in range(pairs):
        chosen = rng.choice(concepts, size=per_pair, replace=False)
        shared = pool[chosen].mean(axis=0)
        img_cls = _unit(shared + noise * rng.standard_normal(dim) / np.sqrt(dim))
        assigned = pool[chosen[np.arange(patches) % per_pair]]
        img_patches = _unit(assigned + noise * rng.standard_normal((patches, dim)))
        images.append(ItemEmbedding(pair_id(p), img_cls, EmbeddingMatrix(img_patches, normalized=True)))

        txt_cls = _unit(shared + noise * rng.standard_normal(dim) / np.sqrt(dim))
        bags = _unit(np.vstack([pool[chosen], rng.standard_normal((1, dim))])
                     + noise * rng.standard_normal((per_pair + 1, dim)))
        mask = np.ones(per_pair + 1, dtype=bool)
        mask[-1] = False
        texts.append(ItemEmbedding(pair_id(p), txt_cls, EmbeddingMatrix(bags), PaddingMask(mask)))
    return images, texts


# ---------------------------
# Corpus files
# ---------------------------
def save_corpus(out_dir: str, spec: SyntheticSpec, samples: List[PairedSample],
                encoder: TextEncoder, vocab: Vocabulary) -> str:
    os.makedirs(out_dir, exist_ok=True)
    write_embedding_file(os.path.join(out_dir, "corpus_images.bagf"),
                         [ItemEmbedding(s.pair_id, s.image_tokens.data[0], s.image_tokens.take(1))
                          for s in samples])
    table = encoder.token_table
    write_embedding_file(os.path.join(out_dir, "token_table.bagf"),
                         [ItemEmbedding("table", table.data[0], table.take(1))])
    with open(os.path.join(out_dir, "corpus_texts.jsonl"), "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps({"id": s.pair_id, "tokens": list(s.text_tokens)}) + "\n")
    save_vocabulary(vocab, os.path.join(out_dir, "vocab.txt"))
    manifest = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "seed": spec.seed,
        "pairs": spec.pairs,
        "d_img": spec.d_img,
        "d_txt": spec.d_txt,
        "mixer_seed": encoder.mixer.seed,
        "mixer_scale": spec.mixer_scale,
        "images": "corpus_images.bagf",
        "texts": "corpus_texts.jsonl",
        "table": "token_table.bagf",
        "vocab": "vocab.txt",
    }
    path = os.path.join(out_dir, "corpus.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_corpus(manifest_path: str) -> Tuple[List[PairedSample], TextEncoder, Vocabulary]:
    """
    Load a corpus written by save_corpus.

    Args:
        manifest_path (str): Path of the corpus.json manifest.

    Returns:
        Tuple[List[PairedSample], TextEncoder, Vocabulary]: Paired samples, the text encoder and its vocabulary.
    """
    with open(manifest_path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{manifest_path}: not a corpus manifest ({e})")
    if not isinstance(manifest, dict):
        raise FormatError(f"{manifest_path}: manifest must be a JSON object")
    if manifest.get("format") != CORPUS_FORMAT or manifest.get("version") != CORPUS_VERSION:
        raise FormatError(f"{manifest_path}: unsupported corpus format/version")
    base = os.path.dirname(os.path.abspath(manifest_path))

    try:
        images_path = os.path.join(base, manifest["images"])
        table_path = os.path.join(base, manifest["table"])
        vocab_path = os.path.join(base, manifest["vocab"])
        texts_path = os.path.join(base, manifest["texts"])
        mixer_args = (int(manifest["d_txt"]), int(manifest["mixer_seed"]), float(manifest["mixer_scale"]))
    except KeyError as e:
        raise FormatError(f"{manifest_path}: manifest is missing {e.args[0]!r}")
    except (TypeError, ValueError) as e:
        raise FormatError(f"{manifest_path}: malformed manifest field ({e})")

    images = {item.item_id: item for item in read_embedding_file(images_path)}
    (table_item,) = read_embedding_file(table_path)
    table = EmbeddingMatrix(np.vstack([table_item.cls[None, :], table_item.late.data]))
    vocab = load_vocabulary(vocab_path)

    samples = []
    with open(texts_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                text_id, tokens = record["id"], tuple(int(t) for t in record["tokens"])
            except KeyError as e:
                raise FormatError(f"{texts_path}:{line_no}: record is missing {e.args[0]!r}")
            except (TypeError, ValueError) as e:
                raise FormatError(f"{texts_path}:{line_no}: malformed text record ({e})")
            image = images.get(text_id)
            if image is None:
                raise FormatError(f"{manifest_path}: text {text_id!r} has no image")
            rows = np.vstack([image.cls[None, :], image.late.data])
            samples.append(PairedSample(text_id, EmbeddingMatrix(rows), tokens))

    mixer = ToyMixer.from_seed(*mixer_args)
    helper = build_helper(vocab) if len(vocab) else None
    return samples, TextEncoder(table, mixer, helper), vocab


def write_synthetic(out_dir: str, pairs: int, seed: int, dim: int = 64,
                    patches: int = 16, spec: Optional[SyntheticSpec] = None) -> Dict[str, str]:
    """Everything ``gen-synthetic`` produces; returns the written paths by role."""
    spec = spec or SyntheticSpec(pairs=pairs, seed=seed)
    samples, encoder, vocab = generate_corpus(spec)
    manifest = save_corpus(out_dir, spec, samples, encoder, vocab)
    images, texts = generate_joint_items(pairs, seed, dim=dim, patches=patches)
    paths = {
        "corpus": manifest,
        "images": os.path.join(out_dir, "images.bagf"),
        "texts": os.path.join(out_dir, "texts.bagf"),
        "qrels": os.path.join(out_dir, "qrels.jsonl"),
    }
    write_embedding_file(paths["images"], images)
    write_embedding_file(paths["texts"], texts)
    save_qrels({pair_id(p): [pair_id(p)] for p in range(pairs)}, paths["qrels"])
    return paths
