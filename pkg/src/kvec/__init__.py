"""Early co-classification of concurrent key-value sequences.

A single chronological stream mixes items from many concurrent per-key
sequences. This package learns per-key representations with a
correlation-masked causal attention encoder, decides per key when to stop
watching and classify via a learned halting policy, and measures the
accuracy-earliness trade-off. Everything runs on plain numpy with full
numerical verification (finite-difference gradient checks, brute-force mask
oracles, streaming/batch equivalence).

Modules
-------
sequence   tangled streams, sessions, correlation predicates, dynamic mask
numerics   2-D reverse-mode autodiff, Adam, masked softmax, checkpoints
encoder    input embeddings, masked attention blocks, gated state fusion
halting    halting policy, classifier head, baseline value net, rewards
model      configuration, parameter initialization, checkpoint round-trip
training   episode generation, three-part loss, training loop
streaming  per-item incremental inference with a sliding latent cache
datasets   synthetic tangled-traffic generator and jsonl (de)serialization
evalkit    metrics, halting baselines, sweeps, attention-split analysis
cli        command-line entry point (generate/train/eval/sweep/analyze/...)
"""

__version__ = "0.1.0"
