"""ESG text-classification benchmark pipeline.

Three binary classification tasks (Environmental / Social / Governance text
or not), two model families: a 4-bit-quantized causal LM fine-tuned with
low-rank adapters, and classical SVM / gradient-boosted-tree baselines over
binary bag-of-words features, with a shared weighted-metrics report format.
"""

__version__ = "0.1.0"
