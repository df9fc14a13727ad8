# Diffusion module
