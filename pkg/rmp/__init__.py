"""Refined mask prediction branch"""
