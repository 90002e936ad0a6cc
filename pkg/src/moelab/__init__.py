"""moelab: a desk-scale mixture-of-experts transformer lab.

Float64 tensors with reverse-mode autodiff, a top-K routed MoE layer with
capacity-based token dropping, a rotary-attention decoder with interleaved
residual-MoE blocks, denoising training objectives over synthetic corpora,
a reproducible training loop, and routing-decision analysis tooling.
"""

__version__ = "0.1.0"
