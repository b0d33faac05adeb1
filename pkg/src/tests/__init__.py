"""Test suite for the seasonal contrastive pre-training pipeline."""
