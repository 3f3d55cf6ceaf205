"""Two-stage PET reconstruction: posterior-mean estimator + conditioned diffusion."""
