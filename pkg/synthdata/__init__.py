"""Synthetic product and defect corpus"""
