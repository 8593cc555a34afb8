"""Miniature latent-diffusion substrate: noise schedule, VAE, U-Net, checkpoints"""
