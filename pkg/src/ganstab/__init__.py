"""GAN-based stability classifier for smart-grid data, with an evasion-attack
suite and evaluation harness."""

__version__ = "0.1.0"

from .data import Dataset, NormStats, SplitBundle, load_csv, split_stable_only  # noqa: E402
from .gan import GanModel, TrainConfig, classify, train  # noqa: E402

__all__ = ["Dataset", "NormStats", "SplitBundle", "load_csv", "split_stable_only",
           "GanModel", "TrainConfig", "classify", "train", "__version__"]
