"""Unbalanced abnormal prompt and its token table"""
