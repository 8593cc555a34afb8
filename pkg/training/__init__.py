"""Configuration, losses and training loops"""
