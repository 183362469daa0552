"""flashlab: desk-scale few-step distillation of conditional diffusion models.

Modules:
    gradcore    -- reverse-mode autodiff tensors, Adam, finite-difference oracle
    schedule    -- cosine noise schedule, forward process, eps/x0/score conversions
    timesteps   -- mixture-of-Gaussians timestep distribution and phase plans
    nets        -- conditional denoiser MLPs, LoRA students, discriminator
    sampling    -- CFG, DDIM/Euler solver steps, teacher rollouts, few-step sampler
    losses      -- distillation / adversarial / distribution-matching objectives
    engine      -- teacher pretraining and the full distillation loop
    datametrics -- synthetic 2-d datasets, Gaussian oracle, SW / MMD metrics
    cli         -- command-line front end, configs, checkpoints, CSV and SVG output
"""

__version__ = "0.1.0"
