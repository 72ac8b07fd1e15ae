"""Desk-scale small-object detector: contextual anchor attention, RFAFPN
fusion, ACmix augmentation and detection evaluation on a numpy autodiff engine."""

__version__ = "0.1.0"
