"""Multi-input autoregressive remaining-useful-life model for rolling bearings.

The package is organised bottom-up:

``numcore``    numpy kernels with hand-written backward passes, AdamW, gradient checks
``datapipe``   bearing ingestion, normalisation, FPT detection, labels, padding/windowing
``armodel``    the CNN backbone + HI-window branch network and the autoregressive shift
``trainer``    multi-iteration autoregressive training loop
``evaluator``  segment-wise rollout and RMSE / MAE / Score metrics
``synthgen``   seeded synthetic degradation records
``plotting``   matplotlib figures written next to CSV/JSON outputs
``cli``        the ``arrul`` command line
"""

__version__ = "0.1.0"
