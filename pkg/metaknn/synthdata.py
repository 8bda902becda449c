"""Module containing the deterministic synthetic translation task: class-conditional Gaussian
context vectors for a general domain and a shifted in-domain, Zipf-distributed words made of
sub-tokens, frequency tables, and the base output projection trained on general data.

Random numbers come exclusively from ``numpy.random.Generator(numpy.random.PCG64(seed))``, so
an identical configuration yields bit-identical output on every platform.
"""

__all__ = ["SynthConfig", "SynthTask", "gen_task", "base_projection"]

import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from metaknn.contexts import ContextPairs
from metaknn.datastore import Datastore
from metaknn.exceptions import MissingInputError
from metaknn.finetune import FtHyper, finetune_full, validation_ppl
from metaknn.prediction import Projection
from metaknn.utils import atomic_write_text

logger = logging.getLogger(__name__)

# Base-model training on general data.
BASE_FT = FtHyper(lr=0.05, alpha=0.0, steps=3000, batch=128)
BASE_PATIENCE = 5


@dataclass(frozen=True)
class SynthConfig:
    """
    Configuration of a synthetic task.

    Attributes
    ----------
    dim : int
        Context-vector dimension.
    vocab_size : int
        Number of sub-tokens.
    n_general, n_indomain, n_val, n_test : int
        Tokens in the general corpus, the in-domain training corpus (the datastore source) and the
        in-domain validation and test corpora.
    class_sep : float
        Norm of every token's general-domain mean vector.
    shift : float
        Length of the displacement of every in-domain mean.
    low_freq_skew : float
        Zipf exponent (>= 1) of the word frequencies.
    seed : int
        Generator seed.
    sentence_len : int
        Words per sentence.
    max_word_len : int
        Maximum sub-tokens per word.
    noise : float
        Standard deviation of the isotropic context noise.
    domain_words : float
        Share in [0, 1) of the words that never occur in the general domain.
    """

    dim: int = 32
    vocab_size: int = 1024
    n_general: int = 50_000
    n_indomain: int = 20_000
    n_val: int = 2_000
    n_test: int = 2_000
    class_sep: float = 3.0
    shift: float = 3.0
    low_freq_skew: float = 1.2
    seed: int = 20231
    sentence_len: int = 8
    max_word_len: int = 3
    noise: float = 1.0
    domain_words: float = 0.5

    def __post_init__(self):
        for name in ("dim", "n_general", "n_indomain", "n_val", "n_test", "sentence_len", "max_word_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"SynthConfig.{name} {value} must be a positive integer")
        if not isinstance(self.vocab_size, (int, np.integer)) or self.vocab_size < 2:
            raise ValueError(f"SynthConfig.vocab_size {self.vocab_size} must be at least 2")
        if not self.class_sep > 0:
            raise ValueError(f"SynthConfig.class_sep {self.class_sep} must be positive")
        if not self.shift >= 0:
            raise ValueError(f"SynthConfig.shift {self.shift} must be non-negative")
        if not self.low_freq_skew >= 1:
            raise ValueError(f"SynthConfig.low_freq_skew {self.low_freq_skew} must be at least 1")
        if not self.noise > 0:
            raise ValueError(f"SynthConfig.noise {self.noise} must be positive")
        if not 0.0 <= self.domain_words < 1.0:
            raise ValueError(f"SynthConfig.domain_words {self.domain_words} must lie in [0, 1)")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError(f"SynthConfig.seed {self.seed} must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, config: dict) -> "SynthConfig":
        """Build from a mapping, ignoring unknown keys."""
        names = {f.name for f in fields(cls)}
        return cls(**{key: value for key, value in config.items() if key in names})

    @classmethod
    def from_yaml(cls, path) -> "SynthConfig":
        """Read the ``synth`` section of a YAML configuration file."""
        with open(path) as f:
            config = yaml.safe_load(f) or {}
        return cls.from_dict(config.get("synth", {}))


@dataclass(frozen=True)
class SynthTask:
    """
    A generated task.

    Attributes
    ----------
    config : SynthConfig
        Generating configuration.
    general : ContextPairs
        General-domain corpus (training data of the base projection).
    train, val, test : ContextPairs
        In-domain corpora; ``train`` is the datastore source.
    token_freq_gd, token_freq_id : np.ndarray
        Per-token counts in ``general`` and ``train``.
    word_freq_gd, word_freq_id : dict of str to int
        Per-word counts of complete words in ``general`` and ``train``.
    subword_map : dict of str to list of int
        Sub-token ids of every word.
    """

    config: SynthConfig
    general: ContextPairs
    train: ContextPairs
    val: ContextPairs
    test: ContextPairs
    token_freq_gd: np.ndarray
    token_freq_id: np.ndarray
    word_freq_gd: dict
    word_freq_id: dict
    subword_map: dict

    def general_split(self, holdout: float = 0.1) -> tuple[ContextPairs, ContextPairs]:
        """Split the general corpus into training and validation parts, the last sentences held out."""
        n = self.general.n_sequences
        n_val = max(1, int(round(n * holdout)))
        if n_val >= n:
            raise ValueError("General corpus is too small to hold out a validation split")
        return self.general.select(range(n - n_val)), self.general.select(range(n - n_val, n))

    def datastore(self) -> Datastore:
        """Datastore of the in-domain training corpus."""
        return Datastore.from_arrays(self.train.vectors, self.train.tokens, self.config.vocab_size)

    def write(self, out_dir) -> None:
        """
        Write the corpora as "KNCP" files and the frequency tables and word map as JSON.

        Files: ``general.kncp``, ``general_val.kncp``, ``train.kncp``, ``val.kncp``,
        ``test.kncp``, ``freq.json``, ``words.json``, ``config.json``.
        """
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        general_train, general_val = self.general_split()
        general_train.to_file(out_dir / "general.kncp")
        general_val.to_file(out_dir / "general_val.kncp")
        self.train.to_file(out_dir / "train.kncp")
        self.val.to_file(out_dir / "val.kncp")
        self.test.to_file(out_dir / "test.kncp")
        freq = {
            "token_gd": self.token_freq_gd.tolist(),
            "token_id": self.token_freq_id.tolist(),
            "word_gd": self.word_freq_gd,
            "word_id": self.word_freq_id,
        }
        atomic_write_text(out_dir / "freq.json", json.dumps(freq, indent=2, sort_keys=True))
        atomic_write_text(out_dir / "words.json", json.dumps(self.subword_map, indent=2, sort_keys=True))
        atomic_write_text(out_dir / "config.json", json.dumps(asdict(self.config), indent=2))
        logger.info("Wrote synthetic task to %s", out_dir)

    @classmethod
    def read(cls, task_dir) -> "SynthTask":
        """
        Read a task written by :meth:`write`.

        Raises
        ------
        MissingInputError
            If a file of the task is missing.
        """
        task_dir = Path(task_dir)
        for name in ("config.json", "freq.json", "words.json"):
            if not (task_dir / name).exists():
                raise MissingInputError(f"Task file '{task_dir / name}' not found")
        with open(task_dir / "config.json") as f:
            config = SynthConfig.from_dict(json.load(f))
        with open(task_dir / "freq.json") as f:
            freq = json.load(f)
        with open(task_dir / "words.json") as f:
            subword_map = json.load(f)
        general = ContextPairs.from_file(task_dir / "general.kncp")
        return cls(
            config=config,
            general=general.concat(ContextPairs.from_file(task_dir / "general_val.kncp")),
            train=ContextPairs.from_file(task_dir / "train.kncp"),
            val=ContextPairs.from_file(task_dir / "val.kncp"),
            test=ContextPairs.from_file(task_dir / "test.kncp"),
            token_freq_gd=np.asarray(freq["token_gd"], dtype=np.int64),
            token_freq_id=np.asarray(freq["token_id"], dtype=np.int64),
            word_freq_gd={w: int(c) for w, c in freq["word_gd"].items()},
            word_freq_id={w: int(c) for w, c in freq["word_id"].items()},
            subword_map={w: [int(t) for t in subs] for w, subs in subword_map.items()},
        )


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.normal(size=(n, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _zipf_probs(rng: np.random.Generator, n: int, skew: float) -> np.ndarray:
    """Zipf probabilities over ``n`` items under a random ranking."""
    ranks = rng.permutation(n)
    weights = 1.0 / (ranks + 1.0) ** skew
    return weights / weights.sum()


def _sample_corpus(
    rng: np.random.Generator,
    cfg: SynthConfig,
    n_tokens: int,
    word_probs: np.ndarray,
    words: list[np.ndarray],
    means: np.ndarray,
) -> tuple[ContextPairs, np.ndarray]:
    """Draw sentences of words until ``n_tokens`` sub-tokens, the last sentence cut to fit."""
    sequences = []
    word_counts = np.zeros(len(words), dtype=np.int64)
    total = 0
    while total < n_tokens:
        drawn = rng.choice(len(words), size=cfg.sentence_len, p=word_probs)
        tokens = []
        for w in drawn:
            if total + len(tokens) + len(words[w]) > n_tokens:
                tokens.extend(words[w][: n_tokens - total - len(tokens)])
                break
            tokens.extend(words[w])
            word_counts[w] += 1
        tokens = np.asarray(tokens, dtype=np.int64)
        vectors = means[tokens] + cfg.noise * rng.normal(size=(len(tokens), cfg.dim))
        sequences.append((vectors.astype(np.float32), tokens))
        total += len(tokens)
    return ContextPairs.from_sequences(sequences, cfg.vocab_size, cfg.dim), word_counts


def gen_task(cfg: SynthConfig) -> SynthTask:
    """
    Generate a synthetic task.

    Every token ``v`` has a general-domain mean ``mu_v`` of norm ``class_sep`` and an in-domain
    mean ``mu_v + shift * delta_v`` with a random unit ``delta_v``. The vocabulary is partitioned
    into words of 1 to ``max_word_len`` consecutive token ids. General and in-domain word
    frequencies follow Zipf laws over two independent random rankings, so rare general words
    can be frequent in-domain. A random ``domain_words`` share of the words is removed from the
    general domain; their tokens only occur in the in-domain corpora.

    Parameters
    ----------
    cfg : SynthConfig
        The configuration.

    Returns
    -------
    SynthTask
        Corpora, frequency tables and word map; a pure function of ``cfg``.
    """
    logger.info("Generating synthetic task (dim=%d, vocab=%d, seed=%d)...", cfg.dim, cfg.vocab_size, cfg.seed)
    rng = np.random.Generator(np.random.PCG64(int(cfg.seed)))

    words: list[np.ndarray] = []
    start = 0
    while start < cfg.vocab_size:
        length = int(rng.integers(1, cfg.max_word_len + 1))
        words.append(np.arange(start, min(start + length, cfg.vocab_size)))
        start += length
    names = [f"w{i:04d}" for i in range(len(words))]

    means_gd = cfg.class_sep * _unit_rows(rng, cfg.vocab_size, cfg.dim)
    means_id = means_gd + cfg.shift * _unit_rows(rng, cfg.vocab_size, cfg.dim)
    probs_gd = _zipf_probs(rng, len(words), cfg.low_freq_skew)
    probs_id = _zipf_probs(rng, len(words), cfg.low_freq_skew)
    domain_only = rng.permutation(len(words))[: int(cfg.domain_words * len(words))]
    probs_gd[domain_only] = 0.0
    probs_gd /= probs_gd.sum()

    general, counts_gd = _sample_corpus(rng, cfg, cfg.n_general, probs_gd, words, means_gd)
    train, counts_id = _sample_corpus(rng, cfg, cfg.n_indomain, probs_id, words, means_id)
    val, _ = _sample_corpus(rng, cfg, cfg.n_val, probs_id, words, means_id)
    test, _ = _sample_corpus(rng, cfg, cfg.n_test, probs_id, words, means_id)

    logger.info(
        "    %d words (%d in-domain only), %d general and %d in-domain training tokens",
        len(words),
        len(domain_only),
        len(general),
        len(train),
    )
    return SynthTask(
        config=cfg,
        general=general,
        train=train,
        val=val,
        test=test,
        token_freq_gd=np.bincount(general.tokens, minlength=cfg.vocab_size),
        token_freq_id=np.bincount(train.tokens, minlength=cfg.vocab_size),
        word_freq_gd={name: int(c) for name, c in zip(names, counts_gd, strict=True)},
        word_freq_id={name: int(c) for name, c in zip(names, counts_id, strict=True)},
        subword_map={name: [int(t) for t in subs] for name, subs in zip(names, words, strict=True)},
    )


def base_projection(
    cfg: SynthConfig,
    general: ContextPairs,
    val: ContextPairs | None = None,
    ft: FtHyper = BASE_FT,
    patience: int | None = BASE_PATIENCE,
) -> Projection:
    """
    Train the base output projection on general-domain data from zero initialization.

    Parameters
    ----------
    cfg : SynthConfig
        Task configuration; its seed drives the batch order.
    general : ContextPairs
        General-domain training corpus; must not be empty.
    val : ContextPairs, optional
        General-domain validation corpus. When None, the last 10% of the sentences of
        ``general`` are held out.
    ft : FtHyper, optional
        Training settings; ``steps=0`` returns the zero projection.
    patience : int, optional
        Validation checkpoints without improvement before stopping.

    Returns
    -------
    Projection
        The weights with the best general-domain validation perplexity.
    """
    if len(general) == 0:
        raise ValueError("base_projection needs general-domain pairs")
    if val is None:
        n = general.n_sequences
        n_val = max(1, int(round(n * 0.1)))
        if n_val >= n:
            train, val = general, general
        else:
            train, val = general.select(range(n - n_val)), general.select(range(n - n_val, n))
    else:
        train = general
    proj = finetune_full(Projection.zeros(cfg.vocab_size, cfg.dim), train, ft, val, patience=patience, seed=cfg.seed)
    logger.info("Base projection: general-domain validation PPL %.4f", validation_ppl(proj, val))
    return proj
