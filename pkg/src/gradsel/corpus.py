"""Dataset ingestion, word-level tokenization, and synthetic corpus generation.

Instances are prompt/response pairs read from JSONL (instruction-tuning
schema: `instruction` + optional `input` -> prompt, `output` -> response).
Tokenization is deliberately word-level so per-token gradients stay
interpretable and the vocabulary stays small.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass

from .rng import ROLE_SYNTH, substream

STRATA = ("domain", "noise", "trivial", "unlabeled")

ROLE_SPECIAL = "special"
ROLE_PROMPT = "prompt"
ROLE_RESPONSE = "response"

_WORD_RE = re.compile(r"\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    """Lowercase and split into word tokens plus single punctuation marks."""
    return _WORD_RE.findall(text.lower())


@dataclass(frozen=True)
class Instance:
    """One training example; `stratum` is generator provenance when known."""

    id: str
    prompt: str
    response: str
    stratum: str | None = None


@dataclass(frozen=True)
class TokenSequence:
    """Encoded instance: token ids plus a same-length per-token role tag."""

    instance_id: str
    tokens: tuple[int, ...]
    roles: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.tokens)


class Tokenizer:
    """Word-level tokenizer with a frequency-capped vocabulary.

    Ids 0..4 are the special tokens PAD, BOS, EOS, SEP, UNK; words follow in
    descending frequency order with lexicographic tie-breaks.
    """

    SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")

    def __init__(self, word_order: list[str]):
        self.token_to_id: dict[str, int] = {}
        for i, tok in enumerate(self.SPECIALS):
            self.token_to_id[tok] = i
        for w in word_order:
            self.token_to_id[w] = len(self.token_to_id)
        self.id_to_token = {i: t for t, i in self.token_to_id.items()}

    pad = 0
    bos = 1
    eos = 2
    sep = 3
    unk = 4

    @property
    def vocab_size(self) -> int:
        return len(self.token_to_id)

    def encode_words(self, text: str) -> list[int]:
        return [self.token_to_id.get(w, self.unk) for w in split_words(text)]

    def decode(self, ids: list[int]) -> str:
        """Space-joined tokens; special ids are skipped."""
        return " ".join(
            self.id_to_token[i] for i in ids if i >= len(self.SPECIALS)
        )


def load_dataset(path: str) -> list[Instance]:
    """Read instances from JSONL in file order.

    Each line needs `output` and `instruction`; `input`, `id`, and `stratum`
    are optional. Missing ids become zero-padded 1-based line numbers.
    """
    instances: list[Instance] = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            for field in ("instruction", "output"):
                if field not in obj:
                    raise ValueError(f"line {lineno}: missing field {field}")
            if not obj["output"]:
                raise ValueError(f"line {lineno}: empty field output")
            prompt = obj["instruction"]
            if obj.get("input"):
                prompt = prompt + "\n" + obj["input"]
            inst_id = obj.get("id")
            if inst_id is None:
                inst_id = f"{lineno:06d}"
            elif inst_id in seen_ids:
                raise ValueError(f"line {lineno}: duplicate id {inst_id!r}")
            seen_ids.add(str(inst_id))
            stratum = obj.get("stratum")
            if stratum is not None and stratum not in STRATA:
                raise ValueError(f"line {lineno}: unknown stratum {stratum!r}")
            instances.append(Instance(str(inst_id), prompt, obj["output"], stratum))
    return instances


def save_dataset(instances: list[Instance], path: str) -> None:
    """Write instances back to the JSONL schema (inverse of load_dataset)."""
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            obj: dict = {"id": inst.id, "instruction": inst.prompt, "output": inst.response}
            if inst.stratum is not None:
                obj["stratum"] = inst.stratum
            fh.write(json.dumps(obj) + "\n")


def build_vocab(dataset: list[Instance], max_vocab: int) -> Tokenizer:
    """Tokenizer over the top (max_vocab - 5) word types by frequency."""
    if max_vocab < 8:
        raise ValueError("max_vocab must be at least 8 (5 specials + 3 words)")
    if not dataset:
        raise ValueError("cannot build a vocabulary from an empty dataset")
    freq: Counter[str] = Counter()
    for inst in dataset:
        freq.update(split_words(inst.prompt))
        freq.update(split_words(inst.response))
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [w for w, _ in ranked[: max_vocab - len(Tokenizer.SPECIALS)]]
    return Tokenizer(keep)


def encode_instance(tok: Tokenizer, inst: Instance, max_seq_len: int) -> TokenSequence:
    """Encode as BOS, prompt, SEP, response, EOS with per-token roles.

    Over-long sequences lose response tokens from the right; the prompt, SEP,
    and EOS are never dropped. Truncating away the whole response is an error.
    """
    prompt_ids = tok.encode_words(inst.prompt)
    response_ids = tok.encode_words(inst.response)
    budget = max_seq_len - len(prompt_ids) - 3  # BOS + SEP + EOS
    if budget < 1:
        raise ValueError(f"instance too long: {inst.id}")
    kept = response_ids[:budget]
    tokens = [tok.bos] + prompt_ids + [tok.sep] + kept + [tok.eos]
    roles = (
        [ROLE_SPECIAL]
        + [ROLE_PROMPT] * len(prompt_ids)
        + [ROLE_SPECIAL]
        + [ROLE_RESPONSE] * len(kept)
        + [ROLE_SPECIAL]
    )
    return TokenSequence(inst.id, tuple(tokens), tuple(roles))


@dataclass(frozen=True)
class SynthSpec:
    """Counts per stratum plus the generation seed."""

    n_domain: int
    n_noise: int
    n_trivial: int
    seed: int


# Word pools for the synthetic grammar. Keys map to values through a
# seed-dependent permutation; the mapping is what the model has to learn.
_KEYS = (
    "alpha bravo charlie delta echo foxtrot golf hotel india juliet kilo lima "
    "mike november oscar papa quebec romeo sierra tango uniform victor whiskey "
    "xray yankee zulu amber basil cedar dahlia elm fern garnet hazel iris "
    "jasper kelp laurel maple nettle olive pine quartz rowan sage thorn umber "
    "violet willow"
).split()
_VALUES = (
    "red blue green yellow purple orange silver gold copper bronze crimson "
    "azure coral ivory jade lilac magenta navy ochre pearl ruby sapphire teal "
    "topaz turquoise violetta amaranth beige celadon denim ebony fawn ginger "
    "henna indigo jet khaki lavender mauve nickel onyx pewter rose sepia "
    "slate tan ultramarine verdigris wheat"
).split()
_DIGITS = (
    "one two three four five six seven eight nine ten eleven twelve"
).split()
_FILLERS = (
    "kindly please indeed truly surely gently swiftly barely rather quite "
    "fairly nearly simply merely really just"
).split()

_DOMAIN_TEMPLATES = (
    "what does {k} map to",
    "lookup the entry for {k}",
    "which value pairs with {k}",
)
_TRIVIAL_PHRASES = (
    "good morning",
    "see you soon",
    "thanks a lot",
    "have a nice day",
    "all is well here",
    "take care out there",
    "glad you could come by",
    "hope the week goes well",
    "warm wishes",
    "until we meet again soon",
    "sleep well tonight",
    "enjoy the rest of it",
)
_TRIVIAL_TEMPLATES = (
    "please repeat {p}",
    "say {p} again",
    "echo {p} now",
)

# Each key->value fact is stated this many times so that a 50% subset still
# covers every fact with near certainty and training saturates in few epochs.
_COPIES_PER_FACT = 8


def synth_corpus(spec: SynthSpec) -> list[Instance]:
    """Deterministic synthetic corpus with labeled strata.

    domain: key -> value lookups under a seeded fact table; each fact is
      restated ~_COPIES_PER_FACT times with varying templates, so the mapping
      is learnable yet no single instance is load-bearing. Keys are fused
      into one word (name + number word) because binding a multi-token key
      to its value takes far more optimization than a desk-scale run allows.
    noise: prompts reuse real fact keys and templates but the responses are
      uniformly random words, so they actively contradict the fact table.
    trivial: echo tasks over a small phrase pool of varying length; prompts
      vary by template and filler so instances are near- but not exact
      duplicates.
    """
    if min(spec.n_domain, spec.n_noise, spec.n_trivial) < 0:
        raise ValueError("stratum counts must be nonnegative")
    rng = substream(spec.seed, ROLE_SYNTH)

    n_facts = -(-spec.n_domain // _COPIES_PER_FACT) if spec.n_domain else 0
    n_pairs = len(_KEYS) * len(_DIGITS)
    if n_facts > n_pairs:
        raise ValueError("not enough distinct keys for the requested size")
    picked = rng.sample_without_replacement(n_pairs, n_facts)
    facts = [
        (_KEYS[p // len(_DIGITS)] + _DIGITS[p % len(_DIGITS)],
         _VALUES[rng.randint(len(_VALUES))])
        for p in picked
    ]
    noise_pool = _KEYS + _DIGITS + _VALUES + _FILLERS

    out: list[Instance] = []
    for i in range(spec.n_domain):
        key, value = facts[i % n_facts]
        template = _DOMAIN_TEMPLATES[rng.randint(len(_DOMAIN_TEMPLATES))]
        out.append(
            Instance(
                id=f"domain-{i:04d}",
                prompt=template.format(k=key),
                response=f"it maps to {value}",
                stratum="domain",
            )
        )
    for i in range(spec.n_noise):
        if facts:
            key = facts[rng.randint(len(facts))][0]
        else:
            key = (_KEYS[rng.randint(len(_KEYS))]
                   + _DIGITS[rng.randint(len(_DIGITS))])
        template = _DOMAIN_TEMPLATES[rng.randint(len(_DOMAIN_TEMPLATES))]
        length = 4 + rng.randint(3)
        words = [noise_pool[rng.randint(len(noise_pool))] for _ in range(length)]
        out.append(
            Instance(
                id=f"noise-{i:04d}",
                prompt=template.format(k=key),
                response=" ".join(words),
                stratum="noise",
            )
        )
    for i in range(spec.n_trivial):
        phrase = _TRIVIAL_PHRASES[rng.randint(len(_TRIVIAL_PHRASES))]
        template = _TRIVIAL_TEMPLATES[rng.randint(len(_TRIVIAL_TEMPLATES))]
        prompt = template.format(p=phrase)
        n_fill = rng.randint(4)
        if n_fill:
            fill = [_FILLERS[rng.randint(len(_FILLERS))] for _ in range(n_fill)]
            prompt = prompt + " " + " ".join(fill)
        out.append(
            Instance(
                id=f"trivial-{i:04d}",
                prompt=prompt,
                response=phrase,
                stratum="trivial",
            )
        )
    return out
