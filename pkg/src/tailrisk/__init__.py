"""tailrisk: rare-event risk, ERM neglect and online adaptation on finite spaces."""

__version__ = "0.1.0"
