"""camox - smartphone-camera oximetry: PPG extraction, CNN SpO2 regression and evaluation."""

__version__ = "0.1.0"
