"""Model assembly: hyperparameter config, parameter initialization for the
encoder / fusion / policy / classifier / baseline stacks, and checkpointing.

The baseline value network lives in its own ParameterStore so its regression
updates stay independent of the main optimizer state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import numerics as nm
from .sequence import ValueSchema


@dataclass
class ModelConfig:
    """Widths, table sizes, and switches for one model instance.

    Defaults give the full-size profile (embedding width 128, 6 blocks,
    fusion width 256); `small()` is the desk-scale profile used by the
    synthetic experiments.
    """

    schema: ValueSchema
    class_count: int = 2
    d: int = 128
    blocks: int = 6
    ffn_width: int = 0          # 0 -> 4 * d
    fusion_width: int = 256
    window: int | None = 512
    slot_count: int = 64
    max_seq_pos: int = 256
    time_table_size: int = 0    # 0 -> window (or 512 when unwindowed)
    dropout: float = 0.1
    residual: bool = False
    key_correlation: bool = True
    value_correlation: bool = True
    dtype: str = "float64"
    # Starting halt logit. Zero starts the policy undecided (p = 0.5, halts
    # sampled on roughly every step); a negative value starts it patient, so
    # early training sees deep states before earliness pressure bites.
    policy_bias_init: float = 0.0
    numeric_stats: tuple = field(default=None)

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("need at least 2 classes")
        if self.ffn_width == 0:
            self.ffn_width = 4 * self.d
        if self.time_table_size == 0:
            self.time_table_size = self.window if self.window else 512
        if self.numeric_stats is None:
            self.numeric_stats = tuple(
                None if dim.is_categorical else (dim.mean, dim.std)
                for dim in self.schema.dims
            )
        else:
            self.numeric_stats = tuple(
                None if s is None else (float(s[0]), float(s[1]))
                for s in self.numeric_stats
            )
        if len(self.numeric_stats) != self.schema.width:
            raise ValueError("numeric_stats arity does not match schema")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @classmethod
    def small(cls, schema, **overrides):
        """Desk-scale profile: d=64, 2 blocks, fusion width 64."""
        base = dict(d=64, blocks=2, ffn_width=256, fusion_width=64,
                    window=256, dropout=0.0)
        base.update(overrides)
        return cls(schema=schema, **base)

    def to_dict(self):
        out = asdict(self)
        out["schema"] = self.schema.to_dict()
        out["numeric_stats"] = [
            None if s is None else list(s) for s in self.numeric_stats
        ]
        return out

    @classmethod
    def from_dict(cls, obj):
        obj = dict(obj)
        obj["schema"] = ValueSchema.from_dict(obj["schema"])
        stats = obj.get("numeric_stats")
        if stats is not None:
            obj["numeric_stats"] = tuple(
                None if s is None else tuple(s) for s in stats
            )
        return cls(**obj)


def init_parameters(config, seed=0):
    """Fresh (main store, baseline store) with scaled-normal initialization."""
    rng = np.random.default_rng(seed)
    cfg = config
    store = nm.ParameterStore(dtype=cfg.np_dtype)

    def normal(rows, cols, scl):
        return rng.standard_normal((rows, cols)) * scl

    d, h = cfg.d, cfg.fusion_width
    for dim, spec in enumerate(cfg.schema.dims):
        if spec.is_categorical:
            store.add(f"emb.value{dim}", normal(d, spec.cardinality, 0.1))
        else:
            store.add(f"emb.value{dim}.w", normal(d, 1, 0.1))
            store.add(f"emb.value{dim}.b", np.zeros((d, 1)))
    store.add("emb.member", normal(d, cfg.slot_count, 0.1))
    store.add("emb.relpos", normal(d, cfg.max_seq_pos, 0.1))
    store.add("emb.time", normal(d, cfg.time_table_size, 0.1))

    proj = 1.0 / np.sqrt(d)
    for b in range(cfg.blocks):
        store.add(f"block{b}.wq", normal(d, d, proj))
        store.add(f"block{b}.wk", normal(d, d, proj))
        store.add(f"block{b}.wv", normal(d, d, proj))
        store.add(f"block{b}.ffn.w1", normal(cfg.ffn_width, d, proj))
        store.add(f"block{b}.ffn.b1", np.zeros((cfg.ffn_width, 1)))
        store.add(f"block{b}.ffn.w2",
                  normal(d, cfg.ffn_width, 1.0 / np.sqrt(cfg.ffn_width)))
        store.add(f"block{b}.ffn.b2", np.zeros((d, 1)))

    gate = 1.0 / np.sqrt(h + d)
    for name in ("wf", "wi", "wo", "wc"):
        store.add(f"fuse.{name}", normal(h, h + d, gate))
    for name in ("bf", "bi", "bo", "bc"):
        store.add(f"fuse.{name}", np.zeros((h, 1)))

    head = 1.0 / np.sqrt(h)
    store.add("policy.w", normal(1, h, head))
    store.add("policy.b", np.full((1, 1), float(cfg.policy_bias_init)))
    store.add("classifier.w", normal(cfg.class_count, h, head))
    store.add("classifier.b", np.zeros((cfg.class_count, 1)))

    baseline = nm.ParameterStore(dtype=cfg.np_dtype)
    h2 = max(1, h // 2)
    baseline.add("baseline.w1", normal(h2, h, head))
    baseline.add("baseline.b1", np.zeros((h2, 1)))
    baseline.add("baseline.w2", normal(1, h2, 1.0 / np.sqrt(h2)))
    baseline.add("baseline.b2", np.zeros((1, 1)))
    return store, baseline


class Model:
    """Config plus the two parameter stores, with checkpoint round-trip."""

    def __init__(self, config, seed=0):
        self.config = config
        self.store, self.baseline = init_parameters(config, seed)

    def zero_grads(self):
        self.store.zero_grads()
        self.baseline.zero_grads()

    def save(self, path):
        arrays = self.store.state_dict()
        arrays.update(self.baseline.state_dict())
        nm.save_checkpoint(path, arrays, extra={"config": self.config.to_dict()})

    @classmethod
    def load(cls, path):
        extra, arrays = nm.load_checkpoint(path)
        config = ModelConfig.from_dict(extra["config"])
        model = cls(config, seed=0)
        main = {k: v for k, v in arrays.items() if not k.startswith("baseline.")}
        base = {k: v for k, v in arrays.items() if k.startswith("baseline.")}
        model.store.load_arrays(main)
        model.baseline.load_arrays(base)
        return model
