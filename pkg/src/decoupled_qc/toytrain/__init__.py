"""Desk-scale segmentation network, phantoms and the cascaded training protocol."""
