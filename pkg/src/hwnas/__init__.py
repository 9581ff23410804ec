"""Hardware-aware NAS over mobile convolution layer families.

The package is organized as a small library plus a CLI:

- ``arch``: immutable architecture IR (layers, blocks, networks),
  shape derivation, JSON serialization and DOT export.
- ``space``: search spaces as ordered categorical decisions.
- ``analysis``: exact multiply-add and parameter counting, feature
  extraction for the latency model.
- ``cost``: linear latency regression and parametric device simulators.
- ``tucker``: mode-2 Tucker decomposition of convolution kernels.
- ``controller``: categorical policy, latency-penalized reward and the
  policy-gradient (REINFORCE) update with Adam.
- ``search``: search drivers, synthetic quality oracles, exhaustive and
  random baselines, ablation reports.
- ``cli``: command-line entry point over all of the above.
"""

__version__ = "0.1.0"
