"""History-aware multimodal transformer for instruction-guided graph
navigation: differentiable-tensor engine, transformer blocks, the full
navigation model, a synthetic world simulator, proxy-task pretraining,
RL+IL fine-tuning, and the trajectory metric suite.
"""

__version__ = "0.1.0"
