"""Trainable networks: staged joint localization and recurrent instances."""
