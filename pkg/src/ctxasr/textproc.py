"""Alternative-spelling rules, rare-word extraction and transcript perturbation.

Rules are unordered pattern pairs; each pair expands into both directed
rewrites. ``perturb_word`` runs a single greedy left-to-right scan: at every
position the longest matching pattern wins (maximal match), equal-length
candidates are drawn uniformly, and scanning resumes after the replacement
so rewritten text is never rewritten again within the pass.
"""

from __future__ import annotations

import importlib.resources
from collections import Counter
from dataclasses import dataclass, field

import numpy as np


class RulesError(ValueError):
    """Raised for malformed rule files or invalid rule pairs."""


@dataclass(frozen=True)
class SpellingRuleSet:
    pairs: tuple  # of (p, q) lowercase pattern pairs

    def __post_init__(self):
        seen = set()
        for p, q in self.pairs:
            if not p or not q:
                raise RulesError("rule patterns must be non-empty")
            if p == q:
                raise RulesError(f"rule pair {p!r} maps a pattern to itself")
            if p != p.lower() or q != q.lower():
                raise RulesError(f"rule pair {p!r} ~ {q!r} must be lowercase")
            key = frozenset((p, q))
            if key in seen:
                raise RulesError(f"duplicate rule pair {p!r} ~ {q!r}")
            seen.add(key)

    def directed(self) -> list:
        """All (pattern, replacement) rewrites, both directions per pair."""
        out = []
        for p, q in self.pairs:
            out.append((p, q))
            out.append((q, p))
        return out

    def letter_coverage(self) -> dict:
        covered = set()
        for p, q in self.pairs:
            covered.update(c for c in p + q if c.isalpha())
        missing = sorted(set("abcdefghijklmnopqrstuvwxyz") - covered)
        return {"covered": sorted(covered), "missing": missing}


def load_rules(path) -> SpellingRuleSet:
    """Read a rules file: one `pattern<TAB>pattern` pair per line, # comments."""
    pairs = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise RulesError(f"{path}:{lineno}: expected two tab-separated patterns")
            p, q = parts[0].strip(), parts[1].strip()
            if not p or not q:
                raise RulesError(f"{path}:{lineno}: empty pattern")
            key = frozenset((p, q))
            if key in seen:
                raise RulesError(f"{path}:{lineno}: duplicate pair {p!r} ~ {q!r}")
            seen.add(key)
            pairs.append((p, q))
    return SpellingRuleSet(tuple(pairs))


def default_rules_path():
    return importlib.resources.files("ctxasr").joinpath("resources/english_rules.tsv")


def check_rules(rules: SpellingRuleSet) -> dict:
    """Validation report: letter coverage plus nested-pattern cycle warnings."""
    coverage = rules.letter_coverage()
    warnings = []
    for p, q in rules.pairs:
        if p in q or q in p:
            warnings.append(
                f"pair {p!r} ~ {q!r}: one pattern contains the other; repeated passes may oscillate"
            )
    return {
        "pairs": len(rules.pairs),
        "covered": coverage["covered"],
        "missing": coverage["missing"],
        "ok": not coverage["missing"],
        "warnings": warnings,
    }


@dataclass
class FrequencyTable:
    counts: Counter = field(default_factory=Counter)

    def update_transcript(self, transcript: str):
        self.counts.update(transcript.lower().split())

    def __len__(self):
        return len(self.counts)

    def to_dict(self) -> dict:
        return dict(self.counts)

    @classmethod
    def from_dict(cls, d: dict) -> "FrequencyTable":
        return cls(Counter({str(k): int(v) for k, v in d.items()}))


def build_frequency_table(corpus) -> FrequencyTable:
    """Exact word counts over whitespace-tokenized, lowercased transcripts."""
    table = FrequencyTable()
    for transcript in corpus:
        table.update_transcript(transcript)
    return table


def rare_words(table: FrequencyTable, top_k: int) -> set:
    """Words outside the top_k by count; the boundary is cut deterministically
    by (count desc, word asc)."""
    if top_k < 0:
        raise ValueError("top_k must be >= 0")
    ranked = sorted(table.counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {w for w, _ in ranked[top_k:]}


@dataclass
class BiasingList:
    entries: list

    def __post_init__(self):
        if len(set(self.entries)) != len(self.entries):
            raise ValueError("biasing list entries must be unique")
        if any(not e for e in self.entries):
            raise ValueError("biasing list entries must be non-empty")

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def build_biasing_list(
    reference: str,
    rare: set,
    distractor_pool: set,
    n_distractors: int,
    rng: np.random.Generator,
) -> BiasingList:
    """Rare words of the utterance (first-occurrence order) plus sampled
    distractors; words appearing in the reference are never distractors."""
    ref_words = reference.lower().split()
    present = []
    seen = set()
    for w in ref_words:
        if w in rare and w not in seen:
            present.append(w)
            seen.add(w)
    pool = sorted(distractor_pool - set(ref_words))
    take = min(n_distractors, len(pool))
    if take:
        picked = rng.choice(len(pool), size=take, replace=False)
        distractors = [pool[i] for i in sorted(picked)]
    else:
        distractors = []
    return BiasingList(present + distractors)


def load_biasing_list(path) -> BiasingList:
    """One entry per line, UTF-8; blank lines ignored."""
    with open(path, encoding="utf-8") as fh:
        entries = [line.strip() for line in fh if line.strip()]
    return BiasingList(entries)


def save_biasing_list(blist: BiasingList, path):
    with open(path, "w", encoding="utf-8") as fh:
        for entry in blist:
            fh.write(entry + "\n")


def perturb_word(word: str, rules: SpellingRuleSet, rng: np.random.Generator) -> str:
    """Single greedy scan with maximal-match replacement (see module doc)."""
    directed = rules.directed()
    out = []
    i = 0
    n = len(word)
    while i < n:
        best_len = 0
        candidates = []
        for pattern, repl in directed:
            plen = len(pattern)
            if plen < best_len or i + plen > n:
                continue
            if word[i : i + plen] == pattern:
                if plen > best_len:
                    best_len = plen
                    candidates = [repl]
                else:
                    candidates.append(repl)
        if candidates:
            if len(candidates) == 1:
                repl = candidates[0]
            else:
                repl = candidates[int(rng.integers(0, len(candidates)))]
            out.append(repl)
            i += best_len
        else:
            out.append(word[i])
            i += 1
    return "".join(out)


def perturb_utterance(
    reference: str,
    biasing: BiasingList,
    rare: set,
    prob: float,
    rules: SpellingRuleSet,
    rng: np.random.Generator,
) -> tuple:
    """Rewrite rare words with alternative spellings, consistently in the
    transcript and in the biasing list.

    Each distinct rare word draws its keep/rewrite decision at its first
    occurrence; all occurrences of that word then change identically.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"perturbation probability must lie in [0, 1], got {prob}")
    mapping = {}
    out_words = []
    for word in reference.split():
        if word in rare:
            if word not in mapping:
                if prob > 0.0 and rng.random() < prob:
                    mapping[word] = perturb_word(word, rules, rng)
                else:
                    mapping[word] = word
            out_words.append(mapping[word])
        else:
            out_words.append(word)

    new_entries = []
    for entry in biasing:
        rewritten = " ".join(mapping.get(tok, tok) for tok in entry.split())
        if rewritten not in new_entries:
            new_entries.append(rewritten)
    return " ".join(out_words), BiasingList(new_entries)


def drop_no_rare_utterances(dataset: list, prob: float, rare: set, rng: np.random.Generator) -> list:
    """Keep every utterance containing a rare word; drop the rest with the
    given probability. Utterances are (id, transcript)-like objects exposing
    a ``reference`` attribute, or plain strings."""
    if not 0.0 <= prob <= 1.0:
        raise ValueError(f"drop probability must lie in [0, 1], got {prob}")
    kept = []
    for utt in dataset:
        text = utt if isinstance(utt, str) else utt.reference
        has_rare = any(w in rare for w in text.lower().split())
        if has_rare or rng.random() >= prob:
            kept.append(utt)
    return kept
