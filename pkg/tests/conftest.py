from __future__ import annotations

import random
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from distresskit import jsonl

_FR_WORDS = (
    "le métro la ligne est encore bloqué retard panne rame quai gare station "
    "bus tram conducteur voyageurs trop de monde on attend depuis vingt minutes "
    "grève incident malaise sécurité portes fermées chaleur correspondance "
    "jamais à l'heure franchement marre aucun message info billet contrôle"
).split()
_EN_WORDS = (
    "the train is late again delay platform crowded stuck tunnel service "
    "announcement staff waiting forever ticket machine broken evacuation smoke"
).split()


def make_tweet_text(rng: random.Random, lang: str = "french") -> str:
    words = _FR_WORDS if lang == "french" else _EN_WORDS
    n = rng.randint(6, 16)
    return " ".join(rng.choice(words) for _ in range(n))


def make_seed_rows(n: int, seed: int = 7, with_labels: bool = False) -> list[dict]:
    rng = random.Random(seed)
    rows = []
    for i in range(n):
        row = {
            "id": f"t{i:05d}",
            "text": make_tweet_text(rng),
            "lang": "french" if rng.random() < 0.8 else "english",
            "phase": "phase1",
        }
        if with_labels:
            row["distress"] = rng.choice(["present", "absent", "external"])
        rows.append(row)
    return rows


MUTATION_ALPHABET = "0123456789ØΔ¤§µ"
_MIXED_WORDS = _FR_WORDS + _EN_WORDS


def _fr_sentence(rng: random.Random, lo: int, hi: int) -> str:
    return " ".join(rng.choice(_FR_WORDS) for _ in range(rng.randint(lo, hi)))


def _mixed_sentence(rng: random.Random) -> str:
    n = rng.randint(9, 18)
    words = [rng.choice(_MIXED_WORDS) for _ in range(n)]
    words.insert(rng.randrange(n), f"#{rng.randint(100, 99999)}")
    return " ".join(words)


def mutate_near_copy(rng: random.Random, text: str, threshold: float) -> str:
    """Substitute <35% of characters, keeping the gestalt score above the
    threshold (greedy block matching can lose more than the mutated share,
    so each mutant is verified and resampled if it fell too far)."""
    from distresskit.dedup import gestalt_similarity

    while True:
        chars = list(text)
        k = int(len(chars) * rng.uniform(0.03, 0.30))
        for pos in rng.sample(range(len(chars)), k):
            chars[pos] = rng.choice(MUTATION_ALPHABET)
        mutant = "".join(chars)
        if gestalt_similarity(text, mutant) >= threshold + 0.02:
            return mutant


def build_planted_fixture(n_seeds=10, n_cand=10_000, n_planted=83,
                          threshold=0.65, seed=20240201):
    """Synthetic candidates with planted near-copies of the seeds.

    Returns (seed records, candidate records, planted candidate ids).
    Non-planted candidates draw from a mixed vocabulary so their best
    seed score stays clear of the threshold.
    """
    from distresskit.corpus import LanguageTag, TweetRecord

    rng = random.Random(seed)
    seeds = [
        TweetRecord(id=f"s{i:03d}", text=_fr_sentence(rng, 8, 14), lang=LanguageTag("french"))
        for i in range(n_seeds)
    ]
    planted_positions = set(rng.sample(range(n_cand), n_planted))
    candidates, planted_ids = [], set()
    for i in range(n_cand):
        cid = f"c{i:05d}"
        if i in planted_positions:
            text = mutate_near_copy(rng, rng.choice(seeds).text, threshold)
            planted_ids.add(cid)
        else:
            text = _mixed_sentence(rng)
        candidates.append(TweetRecord(id=cid, text=text, lang=LanguageTag("french")))
    return seeds, candidates, planted_ids


def random_unicode_pairs(n_pairs: int, seed: int = 4242, max_len: int = 200):
    """Deterministic random string pairs over mixed alphabets."""
    alphabets = [
        "ab",
        "abcdefghij",
        "abcdefghijklmnopqrstuvwxyz ",
        "aàâbcçdeéèêfghiïjklmnoôpqrstuûüvwxyz '",
        "абвгдежзик",
        "線路の上に人が落ちた助けて",
        "🚇🚌🔥😡😭⚠️",
        "abc déf 123 🚇",
    ]
    rng = random.Random(seed)
    pairs = []
    for _ in range(n_pairs):
        alpha = rng.choice(alphabets)
        a = "".join(rng.choice(alpha) for _ in range(rng.randint(0, max_len)))
        if rng.random() < 0.3:
            # correlated pair: mutate a copy so long matches exist
            chars = list(a)
            for pos in rng.sample(range(len(chars)), k=min(len(chars) // 4, len(chars))):
                chars[pos] = rng.choice(alpha)
            b = "".join(chars)
        else:
            b = "".join(rng.choice(alpha) for _ in range(rng.randint(0, max_len)))
        pairs.append((a, b))
    return pairs


@pytest.fixture
def seed_corpus(tmp_path):
    """500 deterministic seed tweets on disk, path returned."""
    rows = make_seed_rows(500)
    path = tmp_path / "seeds.jsonl"
    jsonl.write_jsonl(path, rows)
    return path, rows


@pytest.fixture
def generalist_corpus(tmp_path):
    rng = random.Random(99)
    rows = [
        {"id": f"g{i:04d}", "text": make_tweet_text(rng, "english") + " " + make_tweet_text(rng)}
        for i in range(120)
    ]
    path = tmp_path / "generalist.jsonl"
    jsonl.write_jsonl(path, rows)
    return path, rows
