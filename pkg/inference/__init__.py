"""Pair generation and export"""
