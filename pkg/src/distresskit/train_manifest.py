"""Machine-readable training manifest for the downstream trainer.

The pipeline stops at emitting this file: it freezes the 600M reasoner's
architecture and optimization schedule so a separate training harness can
consume them without re-deriving anything. Defaults encode the reference
configuration; only the fields driven by PipelineConfig vary.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields


@dataclass
class TrainingManifest:
    # model architecture
    num_layers: int = 80
    hidden_size: int = 800
    ffn_size: int = 2048
    attention_heads: int = 10
    kv_heads: int = 5
    activation: str = "silu"
    max_seq_len: int = 2048
    positional_encoding: str = "rope"
    rope_theta: float = 10000.0
    normalization: str = "rmsnorm"
    rmsnorm_eps: float = 1e-5
    embedding_tying: bool = True
    vocab_size: int = 65536
    precision: str = "bfloat16"
    # optimization
    optimizer: str = "adamw"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.01
    grad_clip: float = 0.5
    learning_rate: float = 5e-4
    warmup_style: str = "linear"
    decay_style: str = "linear"
    warmup_steps: int = 500
    decay_start_step: int = 3000
    min_learning_rate: float = 6e-6
    training_steps: int = 4000
    micro_batch: int = 4
    grad_accum: int = 8
    effective_seq_len: int = 2048
    epochs: int = 3
    # parallelism
    data_parallel: int = 4
    tensor_parallel: int = 1
    pipeline_parallel: int = 1
    zero_stage: int = 0
    # derived + free-form notes
    tokens_per_step: int = 262144
    notes: list[str] = field(default_factory=list)

    def validate(self) -> "TrainingManifest":
        product = self.effective_seq_len * self.micro_batch * self.grad_accum * self.data_parallel
        if product != self.tokens_per_step:
            raise ValueError(
                f"tokens_per_step {self.tokens_per_step} != "
                f"seq*micro*accum*dp = {product}"
            )
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        return self

    def to_obj(self) -> dict:
        return asdict(self)

    @classmethod
    def from_obj(cls, obj: dict) -> "TrainingManifest":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
        return cls(**obj).validate()


_BATCH_NOTE = (
    "tokens_per_step = effective_seq_len * micro_batch * grad_accum * data_parallel; "
    "a per-device batch of 8 under the same accumulation would double this and is not "
    "what these settings encode."
)


def build_manifest(
    *,
    context_length: int = 2048,
    micro_batch: int = 4,
    grad_accum: int = 8,
    data_parallel: int = 4,
    epochs: int = 3,
    vocab_size: int = 65536,
    extra_notes: list[str] | None = None,
) -> TrainingManifest:
    manifest = TrainingManifest(
        max_seq_len=context_length,
        effective_seq_len=context_length,
        micro_batch=micro_batch,
        grad_accum=grad_accum,
        data_parallel=data_parallel,
        epochs=epochs,
        vocab_size=vocab_size,
        tokens_per_step=context_length * micro_batch * grad_accum * data_parallel,
        notes=[_BATCH_NOTE] + list(extra_notes or []),
    )
    return manifest.validate()


def emit_training_manifest(manifest: TrainingManifest, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.validate().to_obj(), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")


def load_training_manifest(path: str) -> TrainingManifest:
    with open(path, encoding="utf-8") as f:
        return TrainingManifest.from_obj(json.load(f))
