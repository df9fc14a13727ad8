# Tensor module
