"""Experiment configuration as INI text.

Every field carries a one-line doc that is written as a comment above the
key, so a generated config file documents its own defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from .biasing import VARIANTS


def _opt(default, doc: str):
    if isinstance(default, (list, tuple)):
        return field(default_factory=lambda: list(default), metadata={"doc": doc})
    return field(default=default, metadata={"doc": doc})


@dataclass
class DataConfig:
    lexicon_size: int = _opt(300, "number of pseudo-words in the synthetic lexicon")
    n_utterances: int = _opt(2600, "utterances generated before the zero-shot split")
    n_test: int = _opt(300, "in-domain test utterances (generated separately)")
    n_zero_shot_test: int = _opt(150, "zero-shot utterances kept for evaluation (0 keeps all)")
    n_text: int = _opt(8000, "text-only utterances for language-model pretraining")
    min_words: int = _opt(2, "minimum words per utterance")
    max_words: int = _opt(6, "maximum words per utterance")
    zipf_exponent: float = _opt(1.0, "exponent of the Zipf word distribution")
    top_n: int = _opt(50, "most frequent training words excluded from the rare-word list")
    holdout_fraction: float = _opt(0.2, "fraction of rare words held out as zero-shot words")
    adapter_fraction: float = _opt(0.3, "fraction of training utterances kept from the base model for adapter training")
    frames_per_char: int = _opt(4, "synthetic frames per character")
    feature_dim: int = _opt(16, "synthetic feature dimension before stacking")
    noise_std: float = _opt(0.1, "standard deviation of additive feature noise")
    stack_left: int = _opt(2, "previous frames stacked onto each frame")
    downsample: int = _opt(3, "keep every n-th stacked frame")


@dataclass
class TokenizerConfig:
    subword_size: int = _opt(120, "target subword vocabulary size, specials included")


@dataclass
class ModelConfig:
    enc_hidden: int = _opt(64, "audio encoder LSTM width")
    enc_layers: int = _opt(2, "audio encoder LSTM depth")
    pred_embed: int = _opt(32, "prediction network embedding size")
    pred_hidden: int = _opt(64, "prediction network LSTM width")
    model_dim: int = _opt(64, "shared encoder/prediction output size")
    joint_hidden: int = _opt(64, "joint network hidden size")
    context_embed: int = _opt(32, "context encoder embedding size")
    context_hidden: int = _opt(32, "context BiLSTM width per direction (embeddings are twice this)")
    attn_dim: int = _opt(32, "attention projection size across heads")
    heads: int = _opt(2, "attention heads")
    plm_embed: int = _opt(32, "language model embedding size")
    plm_hidden: int = _opt(64, "language model LSTM width and output size")
    plm_layers: int = _opt(2, "language model LSTM depth")


@dataclass
class TrainConfig:
    base_lr: float = _opt(5e-4, "Adam learning rate for the base transducer")
    base_epochs: int = _opt(12, "base transducer epochs")
    adapter_lr: float = _opt(5e-4, "Adam learning rate for the biasing adapters")
    adapter_epochs: int = _opt(4, "adapter epochs over the mixed sample")
    adapter_max_steps: int = _opt(0, "stop adapter training after this many steps (0 = no limit)")
    n_mixed: int = _opt(2000, "utterances in the mixed rare/general adapter training sample")
    plm_lr: float = _opt(3e-3, "Adam learning rate for the language model")
    plm_epochs: int = _opt(3, "language model epochs")
    batch_size: int = _opt(8, "utterances per optimizer step")
    train_k: int = _opt(50, "distractors per training biasing list")


@dataclass
class EvalConfig:
    k_list: list[int] = _opt([50, 100, 500, 1000], "biasing list sizes swept at evaluation")
    max_symbols_per_frame: int = _opt(3, "greedy decoding emission cap per frame")


@dataclass
class ExperimentSection:
    seed: int = _opt(0, "single seed behind every random choice")
    variants: list[str] = _opt(["Baseline", "Char-II"], "variants trained by default (comma separated)")


SECTIONS = {"experiment": ExperimentSection, "data": DataConfig, "tokenizer": TokenizerConfig,
            "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataConfig = field(default_factory=DataConfig)
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        self.validate()

    @property
    def seed(self) -> int:
        return self.experiment.seed

    def validate(self) -> None:
        for name in ("data", "tokenizer", "model"):
            for f in dataclasses.fields(getattr(self, name)):
                value = getattr(getattr(self, name), f.name)
                if f.type in (int, "int") and value <= 0 and f.name not in ("stack_left",):
                    raise ValueError(f"[{name}] {f.name} must be positive, got {value}")
        if self.data.stack_left < 0:
            raise ValueError("[data] stack_left must be non-negative")
        if not self.eval.k_list or min(self.eval.k_list) < 1:
            raise ValueError("[eval] k_list must be a non-empty list of positive sizes")
        if self.model.attn_dim % self.model.heads:
            raise ValueError("[model] attn_dim must be divisible by heads")
        if not 0 < self.data.holdout_fraction < 1:
            raise ValueError("[data] holdout_fraction must lie strictly between 0 and 1")
        if not 0 <= self.data.adapter_fraction < 1:
            raise ValueError("[data] adapter_fraction must lie in [0, 1)")
        if self.data.min_words > self.data.max_words:
            raise ValueError("[data] min_words exceeds max_words")
        for v in self.experiment.variants:
            if v not in VARIANTS:
                raise ValueError(f"[experiment] unknown variant {v!r}")

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            section = getattr(self, name)
            lines.append(f"[{name}]")
            for f in dataclasses.fields(section):
                lines.append(f"# {f.metadata['doc']}")
                lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(comment_prefixes=("#", ";"), inline_comment_prefixes=None)
        parser.read_string(text)
        kwargs = {}
        for name, klass in SECTIONS.items():
            known = {f.name: f for f in dataclasses.fields(klass)}
            values = {}
            if parser.has_section(name):
                for key, raw in parser.items(name):
                    if key not in known:
                        raise ValueError(f"[{name}] unknown key {key!r}")
                    values[key] = _parse(raw, known[key].default if known[key].default is not
                                         dataclasses.MISSING else known[key].default_factory(), name, key)
            kwargs[name] = klass(**values)
        unknown = set(parser.sections()) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        return cls(**kwargs)


def _format(value) -> str:
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, like, section: str, key: str):
    try:
        if isinstance(like, list):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return [type(like[0])(s) for s in items] if like else items
        if isinstance(like, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        return type(like)(raw.strip())
    except ValueError:
        raise ValueError(f"[{section}] {key}: cannot parse {raw!r}") from None
