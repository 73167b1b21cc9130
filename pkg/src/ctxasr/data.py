"""Synthetic homophone speech corpus plus manifest and feature-file I/O.

Each character owns a fixed random prototype vector; an utterance's features
are its characters' prototypes repeated ``frames_per_char`` times with
Gaussian noise on top. Homophone pairs are two spellings that render from
the *same* prototype sequence, so acoustics alone cannot tell them apart and
only the per-utterance context can.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import textproc

LETTERS = "abcdefghijklmnopqrstuvwxyz"
BLANK_ID = 0
SEP_CHAR = " "


class TokenizationError(ValueError):
    """Raised when text contains symbols outside the model vocabulary."""


class ManifestError(ValueError):
    """Raised for malformed manifest or feature files."""


class CharVocab:
    """Character vocabulary: blank 0, letters 1..26, word separator 27."""

    def __init__(self):
        self.id_of = {c: i + 1 for i, c in enumerate(LETTERS)}
        self.id_of[SEP_CHAR] = len(LETTERS) + 1
        self.char_of = {i: c for c, i in self.id_of.items()}

    @property
    def size(self) -> int:
        return len(LETTERS) + 2  # blank + letters + separator

    @property
    def sep_id(self) -> int:
        return self.id_of[SEP_CHAR]

    def tokenize(self, text: str) -> np.ndarray:
        ids = []
        for ch in text:
            if ch not in self.id_of:
                raise TokenizationError(f"cannot tokenize {text!r}: symbol {ch!r} not in vocabulary")
            ids.append(self.id_of[ch])
        return np.array(ids, dtype=np.int64)

    def detokenize(self, ids) -> str:
        chars = []
        for i in ids:
            i = int(i)
            if i == BLANK_ID:
                continue
            if i not in self.char_of:
                raise TokenizationError(f"token id {i} not in vocabulary")
            chars.append(self.char_of[i])
        return "".join(chars)


@dataclass
class SynthConfig:
    lexicon_common: int = 80
    lexicon_rare: int = 600
    homophone_pairs: int = 150
    frames_per_char: int = 3
    noise_sigma: float = 0.3
    d_feat: int = 12
    utterance_length: tuple = (3, 7)
    rare_share: float = 0.22
    n_train: int = 1200
    n_dev: int = 150
    n_test: int = 500
    seed: int = 0

    def __post_init__(self):
        self.utterance_length = tuple(self.utterance_length)
        lo, hi = self.utterance_length
        if lo < 1 or hi < lo:
            raise ValueError(f"utterance_length range {self.utterance_length} is degenerate")
        if min(self.lexicon_common, self.lexicon_rare, self.frames_per_char, self.d_feat) < 1:
            raise ValueError("lexicon sizes, frames_per_char and d_feat must be >= 1")
        if 2 * self.homophone_pairs > self.lexicon_rare:
            raise ValueError("homophone pair members exceed the rare lexicon size")
        if not 0.0 <= self.rare_share <= 1.0:
            raise ValueError("rare_share must lie in [0, 1]")
        if min(self.n_train, self.n_dev, self.n_test) < 1:
            raise ValueError("split sizes must be >= 1")


@dataclass
class Utterance:
    id: str
    features: np.ndarray  # (T, d_feat) float64
    reference: str
    rare_flags: list

    def words(self) -> list:
        return self.reference.split()


@dataclass
class CorpusBundle:
    train: list
    dev: list
    test: list
    freq: textproc.FrequencyTable
    meta: dict = field(default_factory=dict)


def _random_word(rng, taken: set) -> str:
    # CV-ish alternation keeps words pronounceable and collision-sparse.
    vowels = "aeiou"
    consonants = "".join(c for c in LETTERS if c not in vowels)
    for _ in range(1000):
        length = int(rng.integers(3, 8))
        chars = []
        for pos in range(length):
            pool = consonants if pos % 2 == 0 else vowels
            chars.append(pool[int(rng.integers(0, len(pool)))])
        word = "".join(chars)
        if word not in taken:
            return word
    raise RuntimeError("lexicon sampling failed to find a fresh word")


def _derive_partner(base: str, rules: textproc.SpellingRuleSet, rng, taken: set) -> str:
    for _ in range(50):
        cand = textproc.perturb_word(base, rules, rng)
        if cand != base and cand not in taken and all(c in LETTERS for c in cand):
            return cand
    return ""


def build_lexicons(config: SynthConfig, rng) -> dict:
    """Common words, rare words, and the homophone partner -> base map."""
    rules = textproc.load_rules(textproc.default_rules_path())
    taken = set()
    common = []
    for _ in range(config.lexicon_common):
        w = _random_word(rng, taken)
        taken.add(w)
        common.append(w)

    rare = []
    acoustic_of = {}
    pairs = []
    while len(pairs) < config.homophone_pairs:
        base = _random_word(rng, taken)
        taken.add(base)
        partner = _derive_partner(base, rules, rng, taken)
        if not partner:
            continue
        taken.add(partner)
        rare.extend([base, partner])
        acoustic_of[partner] = base
        pairs.append((base, partner))
    while len(rare) < config.lexicon_rare:
        w = _random_word(rng, taken)
        taken.add(w)
        rare.append(w)
    return {"common": common, "rare": rare, "acoustic_of": acoustic_of, "pairs": pairs}


def render_features(
    reference: str,
    prototypes: np.ndarray,
    vocab: CharVocab,
    config: SynthConfig,
    rng,
    acoustic_of: dict | None = None,
) -> np.ndarray:
    """Prototype sequence repeated frames_per_char times plus Gaussian noise."""
    acoustic_of = acoustic_of or {}
    acoustic_text = " ".join(acoustic_of.get(w, w) for w in reference.split())
    ids = vocab.tokenize(acoustic_text)
    clean = np.repeat(prototypes[ids], config.frames_per_char, axis=0)
    if config.noise_sigma > 0:
        return clean + config.noise_sigma * rng.normal(size=clean.shape)
    return clean.copy()


def generate_corpus(config: SynthConfig) -> CorpusBundle:
    """Deterministic train/dev/test splits with disjoint utterance ids."""
    rng = np.random.default_rng(config.seed)
    vocab = CharVocab()
    lex = build_lexicons(config, rng)
    common, rare = lex["common"], lex["rare"]
    zipf = 1.0 / np.arange(1, len(common) + 1)
    zipf /= zipf.sum()
    prototypes = rng.normal(size=(vocab.size, config.d_feat))

    def make_split(name: str, count: int) -> list:
        utts = []
        lo, hi = config.utterance_length
        for n in range(count):
            n_words = int(rng.integers(lo, hi + 1))
            words = []
            flags = []
            for _ in range(n_words):
                if rng.random() < config.rare_share:
                    words.append(rare[int(rng.integers(0, len(rare)))])
                    flags.append(True)
                else:
                    words.append(common[int(rng.choice(len(common), p=zipf))])
                    flags.append(False)
            reference = " ".join(words)
            feats = render_features(reference, prototypes, vocab, config, rng, lex["acoustic_of"])
            utts.append(Utterance(f"{name}_{n:06d}", feats, reference, flags))
        return utts

    train = make_split("train", config.n_train)
    dev = make_split("dev", config.n_dev)
    test = make_split("test", config.n_test)
    freq = textproc.build_frequency_table(u.reference for u in train)
    meta = {
        "config": asdict(config),
        "common_lexicon": common,
        "rare_lexicon": rare,
        "homophone_pairs": lex["pairs"],
        "acoustic_of": lex["acoustic_of"],
        "prototypes_sha": float(np.abs(prototypes).sum()),
    }
    return CorpusBundle(train, dev, test, freq, meta)


# -- feature files -------------------------------------------------------------

_MAGIC = b"CTXF"
_DTYPE_F64 = 1


def write_features(path, array: np.ndarray):
    """Flat binary: magic, dtype tag, ndim, dims (u32 little-endian), payload."""
    arr = np.ascontiguousarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _DTYPE_F64, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def read_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ManifestError(f"{path}: not a feature file (bad magic)")
    tag, ndim = struct.unpack_from("<II", blob, 4)
    if tag != _DTYPE_F64:
        raise ManifestError(f"{path}: unsupported dtype tag {tag}")
    dims = struct.unpack_from(f"<{ndim}I", blob, 12)
    payload = blob[12 + 4 * ndim :]
    expected = int(np.prod(dims)) * 8
    if len(payload) != expected:
        raise ManifestError(
            f"{path}: payload holds {len(payload)} bytes but header shape {dims} needs {expected}"
        )
    return np.frombuffer(payload, dtype=np.float64).reshape(dims).copy()


# -- manifests ------------------------------------------------------------------


def write_manifest(utterances: list, manifest_path, features_dirname: str = "features"):
    """JSON-lines manifest next to a directory of per-utterance feature files."""
    import os

    root = os.path.dirname(os.fspath(manifest_path))
    feat_dir = os.path.join(root, features_dirname)
    os.makedirs(feat_dir, exist_ok=True)
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for utt in utterances:
            rel = os.path.join(features_dirname, f"{utt.id}.bin")
            write_features(os.path.join(root, rel), utt.features)
            fh.write(
                json.dumps(
                    {
                        "id": utt.id,
                        "features": rel,
                        "transcript": utt.reference,
                        "rare_flags": [bool(f) for f in utt.rare_flags],
                    }
                )
                + "\n"
            )


def read_manifest(manifest_path) -> list:
    import os

    root = os.path.dirname(os.fspath(manifest_path))
    utts = []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                utt = Utterance(
                    id=str(rec["id"]),
                    features=read_features(os.path.join(root, rec["features"])),
                    reference=str(rec["transcript"]),
                    rare_flags=[bool(f) for f in rec["rare_flags"]],
                )
            except ManifestError:
                raise
            except (KeyError, ValueError, TypeError) as exc:
                raise ManifestError(f"{manifest_path}:{lineno}: malformed record ({exc})") from exc
            utts.append(utt)
    return utts
