"""Multi-scale, domain-invariant contrastive pre-training for sleep staging on synthetic EEG."""

__version__ = "0.1.0"
