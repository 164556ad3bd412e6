"""Synthetic text corpora and a deterministic word-level tokenizer.

Two kinds of data are produced:

* templated healthcare prompts whose slots carry private attributes (age
  group, gender, blood type, illness) for prompt-attribute inference;
* (prompt, response) pairs from small domain corpora for response
  reconstruction, split at the first clause boundary of each sentence.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

SLOTS = ("[Age]", "[Gender]", "[Blood Type]", "[Illness]", "[Insurance]", "[Billing Amount]")

AGE_GROUPS = tuple((lo, lo + 9) for lo in range(10, 90, 10))
GENDERS = ("male", "female")
BLOOD_TYPES = ("A+", "A-", "B+", "B-", "AB+", "AB-", "O+", "O-")
INSURERS = (
    "Medicare", "Medicaid", "Aetna", "Cigna", "Humana", "Blue Cross",
    "UnitedHealthcare", "Kaiser Permanente",
)
BILLING_AMOUNTS = (
    "$1,250", "$2,400", "$3,975", "$4,120", "$5,860", "$7,300",
    "$8,815", "$10,450", "$12,990", "$15,600", "$18,275", "$24,000",
)
FILLER_CLAUSES = (
    "Thank you in advance for your help.",
    "I would appreciate a quick reply.",
    "The family is worried about the situation.",
    "We have already spoken with a local clinic.",
    "Any detail would be useful to us.",
    "The appointment is scheduled for next week.",
)

NUM_ILLNESSES = 116
_KNOWN_ILLNESSES = ("common cold", "hemophilia", "liver cancer", "colon cancer")
_ONSETS = ("b", "c", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "cr", "tr")
_VOWELS = ("a", "e", "i", "o", "u", "ae", "io")
_ENDINGS = ("itis", "osis", "emia", "algia", "oma", "pathy", "plexia", "trophy")
_KINDS = ("syndrome", "disease", "disorder", "fever", "infection", "deficiency")

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]")


class TemplateError(ValueError):
    """Raised when a prompt template is malformed."""


def illness_names(n: int = NUM_ILLNESSES, seed: int = 116) -> list[str]:
    """Deterministic list of ``n`` distinct illness names.

    The first few are ordinary names; the rest are invented stems so every
    illness has at least one word of its own.
    """
    rng = np.random.default_rng(seed)
    names = list(_KNOWN_ILLNESSES[:n])
    stems = set()
    while len(names) < n:
        stem = "".join(
            rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(int(rng.integers(2, 4)))
        ) + rng.choice(_ENDINGS)
        if stem in stems:
            continue
        stems.add(stem)
        names.append(f"{stem} {rng.choice(_KINDS)}" if rng.random() < 0.5 else stem)
    return names


ILLNESSES = tuple(illness_names())


# --------------------------------------------------------------------------
# tokenizer


def split_words(text: str) -> list[str]:
    """Lowercase and split into word and single-punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def _bucket(word: str, buckets: int) -> int:
    digest = hashlib.blake2b(word.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


@dataclass(frozen=True)
class Vocabulary:
    """Word -> id map. Id 0 is the padding/unknown sentinel, known words take
    ids ``1..len(words)``, and unknown words hash into the OOV buckets after that."""

    words: tuple[str, ...]
    oov_buckets: int = 0

    def __post_init__(self):
        object.__setattr__(self, "_index", {w: i + 1 for i, w in enumerate(self.words)})

    @property
    def size(self) -> int:
        return 1 + len(self.words) + self.oov_buckets

    def __len__(self):
        return self.size

    def id_of(self, word: str) -> int:
        i = self._index.get(word)
        if i is not None:
            return i
        if self.oov_buckets == 0:
            return 0
        return 1 + len(self.words) + _bucket(word, self.oov_buckets)

    def word_of(self, i: int) -> str:
        if 1 <= i <= len(self.words):
            return self.words[i - 1]
        if i == 0:
            return "<unk>"
        return f"<oov{i - 1 - len(self.words)}>"

    def encode(self, text: str) -> np.ndarray:
        return np.array([self.id_of(w) for w in split_words(text)], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        return " ".join(self.word_of(int(i)) for i in ids)

    @classmethod
    def build(cls, texts: Iterable[str], max_words: int | None = None, size: int | None = None,
              oov_buckets: int = 0) -> "Vocabulary":
        """Vocabulary over ``texts``, most frequent words first (ties alphabetical).

        ``size`` fixes the total id space; leftover ids become OOV buckets.
        """
        counts: dict[str, int] = {}
        for t in texts:
            for w in split_words(t):
                counts[w] = counts.get(w, 0) + 1
        words = sorted(counts, key=lambda w: (-counts[w], w))
        if max_words is not None:
            words = words[:max_words]
        if size is not None:
            if size < 1 + len(words):
                words = words[: size - 1]
            oov_buckets = size - 1 - len(words)
        return cls(tuple(words), oov_buckets)

    @classmethod
    def union(cls, vocabs: Sequence["Vocabulary"], oov_buckets: int = 0) -> "Vocabulary":
        seen: dict[str, None] = {}
        for v in vocabs:
            for w in v.words:
                seen.setdefault(w, None)
        return cls(tuple(seen), oov_buckets)


def tokenize(text: str, vocab: Vocabulary) -> np.ndarray:
    return vocab.encode(text)


# --------------------------------------------------------------------------
# templated healthcare prompts


@dataclass(frozen=True)
class PromptTemplate:
    id: int
    text: str
    length_class: str  # "short" | "long"


@dataclass(frozen=True)
class HealthRecord:
    age_group: int
    gender: int
    blood_type: int
    illness: int
    insurance: str
    billing: str
    age: int | None = None

    def __post_init__(self):
        if not 0 <= self.age_group < len(AGE_GROUPS):
            raise ValueError("age_group out of range")
        if not 0 <= self.gender < len(GENDERS):
            raise ValueError("gender out of range")
        if not 0 <= self.blood_type < len(BLOOD_TYPES):
            raise ValueError("blood_type out of range")
        if not 0 <= self.illness < NUM_ILLNESSES:
            raise ValueError("illness out of range")

    def surface(self) -> dict[str, str]:
        age = self.age if self.age is not None else AGE_GROUPS[self.age_group][0] + 5
        return {
            "[Age]": str(age),
            "[Gender]": GENDERS[self.gender],
            "[Blood Type]": BLOOD_TYPES[self.blood_type],
            "[Illness]": ILLNESSES[self.illness],
            "[Insurance]": self.insurance,
            "[Billing Amount]": self.billing,
        }

    def attribute(self, name: str) -> int:
        return {"age": self.age_group, "gender": self.gender, "blood": self.blood_type,
                "illness": self.illness}[name]


ATTRIBUTE_CARDINALITY = {"age": len(AGE_GROUPS), "gender": len(GENDERS),
                         "blood": len(BLOOD_TYPES), "illness": NUM_ILLNESSES}


class LabeledPrompt(NamedTuple):
    token_ids: np.ndarray
    record: HealthRecord
    template_id: int


def parse_templates(text: str) -> list[PromptTemplate]:
    """Parse ``id<TAB>length<TAB>text`` lines; ``#`` lines are comments."""
    out = []
    for ln in text.splitlines():
        if not ln.strip() or ln.startswith("#"):
            continue
        tid, length, body = ln.split("\t", 2)
        tid = int(tid)
        if length not in ("short", "long"):
            raise TemplateError(f"template {tid}: unknown length class {length!r}")
        for slot in SLOTS:
            if slot not in body:
                raise TemplateError(f"template {tid}: missing slot {slot}")
        out.append(PromptTemplate(tid, body, length))
    return out


def load_templates(source: str | Path | None = None) -> list[PromptTemplate]:
    """Load templates from a file, or the 10 short + 10 long shipped ones."""
    if source is None:
        text = resources.files("moeleak.data").joinpath("pia_templates.tsv").read_text("utf-8")
    else:
        text = Path(source).read_text("utf-8")
    return parse_templates(text)


def fill_template(t: PromptTemplate, r: HealthRecord) -> str:
    text = t.text
    for slot, value in r.surface().items():
        text = text.replace(slot, value)
    return text


def health_vocabulary(templates: Sequence[PromptTemplate] | None = None, size: int = 4096) -> Vocabulary:
    """Known words of the healthcare prompts; the rest of ``size`` is OOV buckets."""
    templates = templates if templates is not None else load_templates()
    texts = [t.text for t in templates]
    texts += list(GENDERS) + list(BLOOD_TYPES) + list(ILLNESSES) + list(INSURERS)
    texts += list(BILLING_AMOUNTS) + list(FILLER_CLAUSES)
    texts += [str(a) for a in range(10, 90)]
    return Vocabulary.build(texts, size=size)


def _derived_rng(seed: int, index: int, stream: int = 0):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(index)]))


def sample_record(rng) -> HealthRecord:
    g = int(rng.integers(len(AGE_GROUPS)))
    lo, hi = AGE_GROUPS[g]
    return HealthRecord(
        age_group=g,
        gender=int(rng.integers(len(GENDERS))),
        blood_type=int(rng.integers(len(BLOOD_TYPES))),
        illness=int(rng.integers(NUM_ILLNESSES)),
        insurance=INSURERS[int(rng.integers(len(INSURERS)))],
        billing=BILLING_AMOUNTS[int(rng.integers(len(BILLING_AMOUNTS)))],
        age=int(rng.integers(lo, hi + 1)),
    )


def unstructure(text: str, rng) -> str:
    """Shuffle sentence order and splice in filler sentences."""
    sents = [s.strip() for s in re.split(r"(?<=[.?!])\s+", text) if s.strip()]
    n_fill = int(rng.integers(1, 4))
    sents += [FILLER_CLAUSES[int(i)] for i in rng.choice(len(FILLER_CLAUSES), n_fill, replace=False)]
    order = rng.permutation(len(sents))
    return " ".join(sents[i] for i in order)


def build_pia_dataset(n: int, length_class: str | None, templates: Sequence[PromptTemplate],
                      seed: int, vocab: Vocabulary, unstructured: bool = False,
                      start: int = 0, records: Sequence[HealthRecord] | None = None) -> list[LabeledPrompt]:
    """Sample ``n`` labeled prompts.

    Sample ``i`` uses an rng derived from ``(seed, start + i)``, so any index
    range can be generated independently. ``records`` pins the records.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    pool = [t for t in templates if length_class is None or t.length_class == length_class]
    if not pool:
        raise ValueError("empty template subset")
    out = []
    for i in range(n):
        rng = _derived_rng(seed, start + i)
        rec = records[i] if records is not None else sample_record(rng)
        t = pool[int(rng.integers(len(pool)))]
        text = fill_template(t, rec)
        if unstructured:
            text = unstructure(text, rng)
        out.append(LabeledPrompt(vocab.encode(text), rec, t.id))
    return out


# --------------------------------------------------------------------------
# response-reconstruction corpora

DOMAINS = ("general", "medical", "financial")


def load_domain_text(domain: str) -> str:
    if domain not in DOMAINS:
        raise ValueError(f"unknown domain {domain!r}")
    return resources.files("moeleak.data").joinpath(f"corpus_{domain}.txt").read_text("utf-8")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in re.split(r"(?<=[.?!])\s+|\n+", text) if s.strip()]


def split_clause(sentence: str) -> tuple[str, str]:
    m = re.search(r"[,;:]", sentence)
    if m is None:
        return sentence, ""
    return sentence[: m.end()], sentence[m.end():]


def rra_vocabulary(source_texts: Iterable[str], cap: int = 2000, oov_buckets: int = 16) -> Vocabulary:
    return Vocabulary.build(source_texts, max_words=cap - 1 - oov_buckets, oov_buckets=oov_buckets)


def build_rra_corpus(source_texts: Sequence[str], seed: int, vocab: Vocabulary | None = None):
    """Split each sentence at its first clause boundary into (prompt, response).

    Returns ``(pairs, vocab)`` with pairs shuffled under ``seed``; sentences
    whose response part is empty are dropped.
    """
    if not source_texts or not any(t.strip() for t in source_texts):
        raise ValueError("need non-empty source texts")
    if vocab is None:
        vocab = rra_vocabulary(source_texts)
    pairs = []
    for text in source_texts:
        for sent in split_sentences(text):
            p, r = split_clause(sent)
            pi, ri = vocab.encode(p), vocab.encode(r)
            if len(pi) and len(ri):
                pairs.append((pi, ri))
    order = np.random.default_rng(seed).permutation(len(pairs))
    return [pairs[i] for i in order], vocab


_COMMON = {
    "subj": ("the team", "my neighbor", "our manager", "a student", "the author", "her brother",
             "the committee", "his friend", "the visitor", "the engineer", "a teacher", "the crew"),
    "adv": ("quickly", "carefully", "again", "yesterday", "today", "often", "rarely", "slowly",
            "together", "quietly"),
}

_DOMAIN_POOLS = {
    "general": {
        "intro": ("After the storm", "In the morning", "Before the festival", "During the trip",
                  "At the market", "Later that evening", "Near the river", "On the weekend",
                  "Without warning", "Despite the rain"),
        "verb": ("painted", "repaired", "visited", "described", "photographed", "cleaned",
                 "decorated", "explored", "celebrated", "organized", "moved", "built"),
        "adj": ("old", "bright", "quiet", "crowded", "tiny", "famous", "wooden", "colorful",
                "ancient", "modern", "empty", "narrow"),
        "noun": ("bridge", "garden", "museum", "library", "harbor", "castle", "school", "kitchen",
                 "stadium", "village", "theater", "gallery", "station", "forest", "beach"),
        "tail": ("before sunset", "with great care", "for the children", "under a gray sky",
                 "while the band played", "as people watched", "in the city center",
                 "near the old fountain", "with fresh paint", "for the first time"),
    },
    "medical": {
        "intro": ("After the diagnosis", "During the checkup", "Following surgery",
                  "In the clinic", "Before the biopsy", "At the hospital", "Within two weeks",
                  "After the infusion", "During recovery", "Once symptoms appeared"),
        "verb": ("prescribed", "monitored", "examined", "treated", "vaccinated", "screened",
                 "diagnosed", "referred", "admitted", "discharged", "evaluated", "sedated"),
        "adj": ("chronic", "acute", "viral", "bacterial", "mild", "severe", "inflamed",
                "benign", "malignant", "congenital", "recurrent", "infectious"),
        "noun": ("patient", "infection", "tumor", "lesion", "fracture", "rash", "artery",
                 "kidney", "liver", "lung", "antibody", "symptom", "therapy", "dosage", "vaccine"),
        "tail": ("with intravenous antibiotics", "under careful observation", "to reduce swelling",
                 "after a blood test", "with a low dose", "in the intensive unit",
                 "to prevent complications", "for persistent pain", "using an mri scan",
                 "with oral steroids"),
    },
    "financial": {
        "intro": ("After the merger", "In the last quarter", "Before the audit",
                  "During the recession", "At the annual meeting", "Following the rate cut",
                  "Within the fiscal year", "After the earnings call", "Despite inflation",
                  "Once the market opened"),
        "verb": ("invested", "audited", "refinanced", "acquired", "hedged", "borrowed",
                 "diversified", "liquidated", "underwrote", "forecast", "taxed", "leveraged"),
        "adj": ("quarterly", "volatile", "profitable", "leveraged", "liquid", "fixed",
                "variable", "annual", "speculative", "diversified", "taxable", "dividend"),
        "noun": ("portfolio", "bond", "equity", "dividend", "mortgage", "revenue", "asset",
                 "liability", "invoice", "budget", "stock", "loan", "fund", "ledger", "margin"),
        "tail": ("with a higher yield", "to reduce exposure", "for institutional clients",
                 "at a modest premium", "despite rising rates", "in the bond market",
                 "to balance the ledger", "with stronger cash flow", "for retail investors",
                 "against currency risk"),
    },
}

_PATTERNS = (
    "{intro}, {subj} {verb} the {adj} {noun} {tail}.",
    "{intro}, the {adj} {noun} was {verb} {adv} {tail}.",
    "{subj} {verb} the {noun}, and the {adj} {noun2} was {verb2} {tail}.",
    "{intro}, {subj} {adv} {verb} a {adj} {noun} and a {noun2}.",
    "When {subj} {verb} the {noun}, the {adj} {noun2} was {verb2} {adv}.",
)


def synthesize_domain_text(domain: str, n_sentences: int, seed: int) -> str:
    """Generate ``n_sentences`` templated sentences for one domain, one per line."""
    pools = _DOMAIN_POOLS[domain]
    rng = np.random.default_rng(np.random.SeedSequence([seed, DOMAINS.index(domain)]))

    def pick(pool):
        return pool[int(rng.integers(len(pool)))]

    lines = []
    for _ in range(n_sentences):
        pat = pick(_PATTERNS)
        s = pat.format(
            intro=pick(pools["intro"]), subj=pick(_COMMON["subj"]), adv=pick(_COMMON["adv"]),
            verb=pick(pools["verb"]), verb2=pick(pools["verb"]), adj=pick(pools["adj"]),
            noun=pick(pools["noun"]), noun2=pick(pools["noun"]), tail=pick(pools["tail"]),
        )
        lines.append(s[0].upper() + s[1:])
    return "\n".join(lines) + "\n"
