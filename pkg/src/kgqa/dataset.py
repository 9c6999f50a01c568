"""Question corpora: SimpleQuestions-style TSV parsing, label derivation and a synthetic KG + corpus."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .candidates import CandidateSet
from .errors import ConfigError, ParseError
from .kg_store import KnowledgeGraph, tokenize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Example:
    qid: str
    tokens: tuple[str, ...]
    entity: int
    relation: int
    answer: int | None
    span_labels: tuple[int, ...]
    span_ok: bool = True
    gate_label: int | None = None

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class LoadReport:
    rows: int = 0
    kept: int = 0
    unknown_subject: int = 0
    unknown_relation: int = 0
    span_failures: int = 0


def derive_span_labels(question: Sequence[str], label: Sequence[str]) -> tuple[tuple[int, ...], bool]:
    """I-O labels (1 = inside) for the longest contiguous run shared with the label.

    Ties go to the earliest start in the question. Returns ``(labels, ok)``;
    ``ok`` is false when no token overlaps.
    """
    q = [t.lower() for t in question]
    lab = [t.lower() for t in label]
    best_len, best_start = 0, -1
    # dynamic programming over common suffix lengths
    prev = [0] * (len(lab) + 1)
    for i in range(1, len(q) + 1):
        cur = [0] * (len(lab) + 1)
        for j in range(1, len(lab) + 1):
            if q[i - 1] == lab[j - 1]:
                cur[j] = prev[j - 1] + 1
                start = i - cur[j]
                if cur[j] > best_len or (cur[j] == best_len and start < best_start):
                    best_len, best_start = cur[j], start
        prev = cur
    labels = [0] * len(q)
    if best_len == 0:
        return tuple(labels), False
    for k in range(best_start, best_start + best_len):
        labels[k] = 1
    return tuple(labels), True


def gate_label(cands: CandidateSet, gold: int, g: KnowledgeGraph) -> int:
    """1 when the gold entity's label is carried by at least two candidates."""
    target = g.entities[gold].label
    hits = sum(1 for c in cands.entries if g.entities[c.entity_id].label == target)
    return int(hits >= 2)


def load_simplequestions(path: str | Path, g: KnowledgeGraph) -> tuple[list[Example], LoadReport]:
    """Rows ``subject<TAB>relation<TAB>object<TAB>question``; rows outside the KG are dropped."""
    report = LoadReport()
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 4:
                raise ParseError(path, lineno, f"expected 4 columns, got {len(cols)}")
            report.rows += 1
            subj, rel, obj, question = (c.strip() for c in cols)
            if subj not in g.entity_index:
                report.unknown_subject += 1
                continue
            if rel not in g.relation_index:
                report.unknown_relation += 1
                continue
            tokens = tokenize(question)
            if not tokens:
                raise ParseError(path, lineno, "empty question")
            e = g.entity_index[subj]
            labels, ok = derive_span_labels(tokens, g.entities[e].label)
            report.span_failures += not ok
            out.append(Example(f"q{lineno}", tokens, e, g.relation_index[rel], g.entity_index.get(obj),
                               labels, ok))
    report.kept = len(out)
    if report.unknown_subject or report.unknown_relation:
        logger.info("dropped %d rows with unknown subject, %d with unknown relation",
                    report.unknown_subject, report.unknown_relation)
    return out, report


def write_questions(path: str | Path, examples: Sequence[Example], g: KnowledgeGraph) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            obj = g.entities[ex.answer].key if ex.answer is not None else ""
            fh.write(f"{g.entities[ex.entity].key}\t{g.relations[ex.relation]}\t{obj}\t{ex.text}\n")


def with_gate_label(ex: Example, cands: CandidateSet, g: KnowledgeGraph) -> Example:
    return replace(ex, gate_label=gate_label(cands, ex.entity, g))


# --- synthetic corpus ----------------------------------------------------------------------

# (relation key, [specific templates]) pairs; siblings in a family share the third template.
RELATION_FAMILIES: list[tuple[list[tuple[str, list[str]]], str]] = [
    ([("film.produced_by", ["who produced {e}", "who is the producer of {e}"]),
      ("film.executive_produced_by", ["who executive produced {e}", "name the executive producer of {e}"])],
     "who was behind {e}"),
    ([("film.filmed_in", ["where was {e} filmed", "in which location did they shoot {e}"]),
      ("film.set_in", ["where is {e} set", "what is the setting of {e}"])],
     "what place is {e} associated with"),
    ([("work.written_by", ["who wrote {e}", "who is the author of {e}"]),
      ("work.edited_by", ["who edited {e}", "which editor worked on {e}"])],
     "whose work is {e}"),
    ([("work.published_by", ["who published {e}", "which publisher released {e}"]),
      ("work.distributed_by", ["who distributed {e}", "which company handled distribution of {e}"])],
     "what company put out {e}"),
    ([("person.born_in", ["where was {e} born", "what is the birthplace of {e}"]),
      ("person.died_in", ["where did {e} die", "what is the place of death of {e}"])],
     "what city is linked to the life of {e}"),
    ([("person.nationality", ["what is the nationality of {e}", "which country is {e} a citizen of"]),
      ("person.residence", ["where does {e} live", "what country is {e} residing in"])],
     "what country is {e} from"),
    ([("location.contained_by", ["what region contains {e}", "{e} is located in which region"]),
      ("location.near", ["what is {e} near", "which region lies close to {e}"])],
     "what area is {e} in"),
    ([("music.genre", ["what genre is {e}", "what kind of music is {e}"]),
      ("film.genre", ["what film genre is {e}", "what type of movie is {e}"])],
     "what style is {e}"),
    ([("org.founded_by", ["who founded {e}", "who is the founder of {e}"]),
      ("org.led_by", ["who leads {e}", "who is the head of {e}"])],
     "who started {e}"),
    ([("award.won", ["what award did {e} win", "which prize was awarded to {e}"]),
      ("award.nominated_for", ["what award was {e} nominated for", "which prize was {e} up for"])],
     "what honor is {e} connected to"),
]

# frequent label words that also occur in templates, giving tf-idf some template noise
COMMON_LABEL_WORDS = ["the", "of", "new", "city", "house", "lost", "great", "red", "mind", "beautiful"]
_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticConfig:
    entity_count: int = 200
    relation_count: int = 20
    triple_count: int = 1000
    question_count: int = 2000
    ambiguous_label_fraction: float = 0.3
    hard_group_fraction: float = 0.2
    near_namesake_fraction: float = 0.0
    shared_template_fraction: float = 0.2
    mention_noise_fraction: float = 0.03
    wiki_fraction: float = 0.5
    label_vocab_size: int = 160
    zipf_exponent: float = 1.0
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    seed: int = 0
    templates: list = field(default_factory=lambda: RELATION_FAMILIES)

    def __post_init__(self):
        for name in ("ambiguous_label_fraction", "hard_group_fraction", "near_namesake_fraction",
                     "shared_template_fraction", "mention_noise_fraction", "wiki_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if len(self.split) != 3 or any(s < 0 for s in self.split) or not math.isclose(sum(self.split), 1.0):
            raise ConfigError(f"split ratios must be 3 non-negative values summing to 1, got {self.split}")
        families = len(self.templates)
        if self.relation_count != 2 * families:
            raise ConfigError(f"template set defines {2 * families} relations, config asks for {self.relation_count}")
        if self.triple_count > self.entity_count * self.relation_count:
            raise ConfigError("triple_count exceeds entity_count * relation_count")
        if self.triple_count > self.entity_count * families:
            raise ConfigError(f"at most one relation per family and entity: triple_count <= {self.entity_count * families}")
        if self.triple_count < self.relation_count:
            raise ConfigError("need at least one triple per relation")
        if self.entity_count < 2 * families:
            raise ConfigError(f"need at least {2 * families} entities for the tail pools")


@dataclass
class SyntheticCorpus:
    graph: KnowledgeGraph
    train: list[Example]
    valid: list[Example]
    test: list[Example]
    groups: list[list[int]]
    hard_groups: list[list[int]]
    config: SyntheticConfig

    @property
    def splits(self) -> dict[str, list[Example]]:
        return {"train": self.train, "valid": self.valid, "test": self.test}


def _pseudo_words(rng: np.random.Generator, count: int, exclude: set[str]) -> list[str]:
    words: list[str] = []
    seen = set(exclude)
    while len(words) < count:
        syl = int(rng.integers(2, 4))
        w = "".join(_CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
                    for _ in range(syl))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _template_words(cfg: SyntheticConfig) -> set[str]:
    words = set()
    for members, shared in cfg.templates:
        for _, temps in members:
            for t in temps:
                words.update(t.replace("{e}", " ").split())
        words.update(shared.replace("{e}", " ").split())
    return words


def _make_labels(rng, cfg: SyntheticConfig, count: int) -> list[tuple[str, ...]]:
    """``count`` distinct labels of 1-3 tokens drawn from a Zipf-weighted vocabulary."""
    template_words = _template_words(cfg)
    common = [w for w in COMMON_LABEL_WORDS]
    vocab = common + _pseudo_words(rng, cfg.label_vocab_size - len(common), template_words | set(common))
    ranks = np.arange(1, len(vocab) + 1, dtype=np.float64)
    # shuffle pseudo-words into the ranking but keep the shared words among the frequent ones
    order = np.concatenate([np.arange(len(common)), len(common) + rng.permutation(len(vocab) - len(common))])
    vocab = [vocab[i] for i in order]
    weights = ranks ** -cfg.zipf_exponent
    weights /= weights.sum()
    labels: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    while len(labels) < count:
        size = int(rng.choice([1, 2, 3], p=[0.2, 0.5, 0.3]))
        toks = tuple(vocab[i] for i in rng.choice(len(vocab), size=size, replace=False, p=weights))
        # every label carries at least one pseudo-word so mentions stay identifiable
        if all(t in common for t in toks) or toks in seen:
            continue
        seen.add(toks)
        labels.append(toks)
    return labels


def _noisy(token: str) -> str:
    return token + token[-1]


def generate_synthetic(cfg: SyntheticConfig | None = None) -> SyntheticCorpus:
    """Deterministic KG + question corpus with controlled label ambiguity.

    Relations come in sibling pairs ("families") whose triples draw tails from
    the same entity pool. Each entity holds at most one relation per family.
    Entities sharing a label form groups; soft groups hold family-disjoint
    relation sets, hard groups share at least one relation.
    """
    cfg = cfg or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)
    E = cfg.entity_count
    families = len(cfg.templates)
    relation_keys = [key for members, _ in cfg.templates for key, _ in members]
    family_of = [f for f in range(families) for _ in range(2)]

    # label groups
    n_amb = int(round(cfg.ambiguous_label_fraction * E))
    if n_amb == 1:
        n_amb = 2
    perm = rng.permutation(E)
    amb_ids, solo_ids = perm[:n_amb], perm[n_amb:]
    groups: list[list[int]] = []
    i = 0
    while i < n_amb:
        size = 3 if n_amb - i == 3 else 2
        groups.append(sorted(int(x) for x in amb_ids[i:i + size]))
        i += size
    n_hard = int(round(cfg.hard_group_fraction * len(groups)))
    hard_idx = set(rng.choice(len(groups), size=n_hard, replace=False).tolist()) if n_hard else set()
    labels_needed = len(solo_ids) + len(groups)
    label_pool = _make_labels(rng, cfg, labels_needed)
    labels: list[tuple[str, ...] | None] = [None] * E
    for k, e in enumerate(solo_ids):
        labels[int(e)] = label_pool[k]
    for k, grp in enumerate(groups):
        for e in grp:
            labels[e] = label_pool[len(solo_ids) + k]
    # near-namesakes: an ungrouped entity whose label extends a group label by one word
    n_near = min(int(round(cfg.near_namesake_fraction * len(groups))), len(solo_ids))
    if n_near:
        near_groups = rng.choice(len(groups), size=n_near, replace=False)
        taken = {t for l in labels for t in l} | _template_words(cfg)
        extra_words = _pseudo_words(rng, n_near, taken)
        for j, (k, e) in enumerate(zip(near_groups, rng.choice(solo_ids, size=n_near, replace=False))):
            labels[int(e)] = label_pool[len(solo_ids) + int(k)] + (extra_words[j],)

    # degrees: spread 1..families so relation degree is an informative prior
    degrees = np.clip(rng.poisson(cfg.triple_count / E, size=E), 1, families).astype(int)

    fam_sets: list[list[int]] = [[] for _ in range(E)]
    rel_sets: list[list[int]] = [[] for _ in range(E)]
    wiki = rng.random(E) < cfg.wiki_fraction

    def pick(e: int, fams: Sequence[int]) -> None:
        fam_sets[e] = sorted(int(f) for f in fams)
        rel_sets[e] = sorted(2 * f + int(rng.integers(2)) for f in fam_sets[e])

    grouped = set()
    for k, grp in enumerate(groups):
        grouped.update(grp)
        if k in hard_idx:
            # first member is the important one: wiki-linked and the largest relation set
            grp_sorted = sorted(grp, key=lambda e: -degrees[e])
            lead = grp_sorted[0]
            pick(lead, rng.choice(families, size=degrees[lead], replace=False))
            wiki[lead] = True
            for e in grp_sorted[1:]:
                wiki[e] = False
                d = min(degrees[e], degrees[lead])
                share = list(rng.choice(rel_sets[lead], size=max(1, d // 2), replace=False))
                shared_fams = {family_of[r] for r in share}
                rest = [f for f in range(families) if f not in shared_fams]
                extra = rng.choice(rest, size=d - len(share), replace=False) if d > len(share) else []
                fam_sets[e] = sorted(shared_fams | {int(f) for f in extra})
                rel_sets[e] = sorted([int(r) for r in share] + [2 * int(f) + int(rng.integers(2)) for f in extra])
                degrees[e] = len(rel_sets[e])
        else:
            free = list(rng.permutation(families))
            share_each = families // len(grp)
            for m, e in enumerate(grp):
                avail = free[m * share_each:(m + 1) * share_each]
                d = min(degrees[e], len(avail))
                degrees[e] = d
                pick(e, avail[:d])
    # hand the degree lost to group caps back to ungrouped entities
    solos = [e for e in range(E) if e not in grouped]
    diff = cfg.triple_count - sum(len(rel_sets[e]) for e in grouped) - int(degrees[solos].sum())
    while diff != 0:
        e = solos[int(rng.integers(len(solos)))]
        if diff > 0 and degrees[e] < families:
            degrees[e] += 1
            diff -= 1
        elif diff < 0 and degrees[e] > 1:
            degrees[e] -= 1
            diff += 1
    for e in solos:
        pick(e, rng.choice(families, size=degrees[e], replace=False))

    # relation coverage: every relation needs at least one triple
    for r in range(cfg.relation_count):
        if not any(r in rs for rs in rel_sets):
            f = family_of[r]
            for e in rng.permutation(E):
                e = int(e)
                if e not in grouped and f in fam_sets[e]:
                    rel_sets[e] = sorted([x for x in rel_sets[e] if family_of[x] != f] + [r])
                    break

    # tail pools: family f points into pool f
    pool_of = rng.permutation(np.arange(E) % families)
    pools = [np.flatnonzero(pool_of == f) for f in range(families)]
    triples = []
    for e in range(E):
        for r in rel_sets[e]:
            pool = pools[family_of[r]]
            t = int(pool[rng.integers(len(pool))])
            if t == e:
                t = int(pool[(np.flatnonzero(pool == t)[0] + 1) % len(pool)])
            triples.append((e, r, t))
    keys = [f"m.{i:04d}" for i in range(E)]
    g = KnowledgeGraph(keys, [" ".join(l) for l in labels], wiki.tolist(), relation_keys, triples)

    # questions: distinct (triple, template) pairs
    templates_of: list[list[str]] = []
    shared_of: list[str] = []
    for members, shared in cfg.templates:
        for _, temps in members:
            templates_of.append(temps)
            shared_of.append(shared)
    capacity = len(g.triples) * 3
    if cfg.question_count > capacity:
        raise ConfigError(f"question_count {cfg.question_count} exceeds {capacity} distinct (triple, template) pairs")
    used: set[tuple[int, int]] = set()
    examples: list[Example] = []
    while len(examples) < cfg.question_count:
        ti = int(rng.integers(len(g.triples)))
        tr = g.triples[ti]
        choice = 2 if rng.random() < cfg.shared_template_fraction else int(rng.integers(2))
        if (ti, choice) in used:
            continue
        used.add((ti, choice))
        template = shared_of[tr.relation] if choice == 2 else templates_of[tr.relation][choice]
        mention = list(g.entities[tr.head].label)
        if rng.random() < cfg.mention_noise_fraction:
            k = int(rng.integers(len(mention)))
            mention[k] = _noisy(mention[k])
        before, after = template.split("{e}")
        tokens = tuple(before.split() + mention + after.split())
        span, ok = derive_span_labels(tokens, g.entities[tr.head].label)
        examples.append(Example(f"q{len(examples):05d}", tokens, tr.head, tr.relation, tr.tail, span, ok))

    order = rng.permutation(len(examples))
    n_train = int(round(cfg.split[0] * len(examples)))
    n_valid = int(round(cfg.split[1] * len(examples)))
    shuffled = [examples[i] for i in order]
    train = shuffled[:n_train]
    valid = shuffled[n_train:n_train + n_valid]
    test = shuffled[n_train + n_valid:]
    hard_groups = [groups[k] for k in sorted(hard_idx)]
    return SyntheticCorpus(g, train, valid, test, groups, hard_groups, cfg)


def corpus_vocabulary(g: KnowledgeGraph, *splits: Sequence[Example]) -> set[str]:
    vocab = {tok for rec in g.entities for tok in rec.label}
    for split in splits:
        for ex in split:
            vocab.update(ex.tokens)
    return vocab
