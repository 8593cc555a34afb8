"""Command-line pipeline and ablation sweeps"""
